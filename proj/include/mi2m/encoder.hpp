#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mi2m/checkpoint.hpp"
#include "mi2m/dataset.hpp"
#include "mi2m/optim.hpp"
#include "mi2m/tape.hpp"
#include "mi2m/tokenizer.hpp"

namespace mi2m {

// Masked patch positions per modality. Counts follow the ceiling rule
// |M| = ceil(alpha * N), indices unique, uniform without replacement.
struct MaskPlan {
  std::vector<int> wifi;    // ascending
  std::vector<int> vision;  // ascending
  double alpha = 0.0;
  uint64_t seed = 0;
};

MaskPlan plan_mask(int n_wifi, int n_vision, double alpha, uint64_t seed);

enum class ModalityMode { both, wifi_only, vision_only };
const char* modality_mode_name(ModalityMode m);
ModalityMode modality_mode_from(const std::string& name);

struct EncoderConfig {
  int layers = 6;
  int dim = 384;
  int heads = 6;
  int ffn_mult = 4;
  int n_wifi = 38;   // 0 when the modality is disabled
  int n_vision = 196;
  int wifi_patch_dim = 90;
  int vision_patch_dim = 768;
  int wifi_vocab = 8192;
  int vision_vocab = 8192;
  ModalityMode modality = ModalityMode::both;

  bool wifi_active() const { return modality != ModalityMode::vision_only; }
  bool vision_active() const { return modality != ModalityMode::wifi_only; }
  int seq_len() const {
    return (wifi_active() ? n_wifi : 0) + (vision_active() ? n_vision : 0);
  }
  int wifi_offset() const { return 0; }
  int vision_offset() const { return wifi_active() ? n_wifi : 0; }
  int d_head() const { return dim / heads; }
  void validate() const;
};

struct EncoderParams {
  EncoderConfig cfg;
  ParamStore params;
};

EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed);

// Patch matrices for the active modalities of one frame (CSI pre-normalized).
struct FramePatches {
  ad::Mat wifi;    // (n_wifi, wifi_patch_dim) or empty
  ad::Mat vision;  // (n_vision, vision_patch_dim) or empty
};

FramePatches make_frame_patches(const MultimodalFrame& frame, const PatchGeometry& geometry,
                                const EncoderConfig& cfg);

// Joint embedded sequence with masked positions replaced by the shared mask
// embedding; length is always seq_len (masking replaces, never removes).
struct CorruptedSample {
  ad::Mat embedded;  // (seq_len, dim)
  MaskPlan plan;
  std::vector<int> wifi_targets;    // filled during pretraining
  std::vector<int> vision_targets;
};

CorruptedSample embed_and_corrupt(const FramePatches& patches, const MaskPlan& plan,
                                  const EncoderParams& params);

// Scaled dot-product attention: softmax over the key axis of Q K^T / sqrt(d_k)
// applied to V. Rows of the attention matrix sum to 1.
ad::Mat attention(const ad::Mat& queries, const ad::Mat& keys, const ad::Mat& values, int d_k);

// Deterministic forward pass through the transformer stack (post-norm blocks
// plus a final normalization). Throws NumericError naming the block on
// non-finite activations.
ad::Mat encode_sequence(const EncoderParams& params, const ad::Mat& embedded);
ad::Mat encode(const CorruptedSample& sample, const EncoderParams& params);

struct MaskedPredictions {
  ad::Mat wifi;    // (|M_w|, wifi_vocab) probability rows
  ad::Mat vision;  // (|M_v|, vision_vocab)
};

MaskedPredictions predict_tokens(const ad::Mat& hidden, const EncoderParams& params,
                                 const MaskPlan& plan);

// Negative mean log-probability of the target tokens over masked positions
// only; unmasked positions contribute exactly zero.
double mi2m_loss(const MaskedPredictions& pred, const std::vector<int>& wifi_targets,
                 const std::vector<int>& vision_targets);

// --- tape-side builders (training / gradient checks) --------------------------

ad::Var embed_and_corrupt_tape(TapeBinding& tb, const EncoderParams& params,
                               const FramePatches& patches, const MaskPlan& plan);
ad::Var encode_sequence_tape(TapeBinding& tb, const EncoderParams& params, ad::Var x);

// --- pretraining ----------------------------------------------------------------

struct PretrainData {
  std::vector<MultimodalFrame> frames;  // CSI pre-normalized
  PatchGeometry geometry;
  std::vector<std::vector<int>> wifi_tokens;    // per frame; unused entries empty
  std::vector<std::vector<int>> vision_tokens;
};

enum class MaskMode { fresh, fixed };

struct PretrainSchedule {
  double lr = 5e-4;
  int batch = 128;
  int epochs = 80;
  double alpha = 0.4;
  uint64_t seed = 1;
  MaskMode mask_mode = MaskMode::fresh;
  int start_epoch = 0;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
};

// Per step: plan fresh masks, corrupt, encode, predict, minimize the masked
// token prediction loss with Adam. step_trace receives (epoch, step, loss);
// on_epoch fires after each epoch.
std::vector<EpochStats> pretrain(const PretrainData& data, EncoderParams& params,
                                 const PretrainSchedule& schedule,
                                 const std::function<void(int, int, double)>& step_trace = {},
                                 const std::function<void(int)>& on_epoch = {});

// Mean-pooled hidden vectors of the uncorrupted frame.
Eigen::VectorXd extract_frame_feature(const FramePatches& patches, const EncoderParams& params);

// Checkpoint io (magic MI2MENC1); includes optimizer state and epoch for
// resumable training, plus the CSI normalization statistics.
void save_encoder(const EncoderParams& params, const std::string& path, int epoch,
                  const CsiNormalizer* norm = nullptr);
EncoderParams load_encoder(const std::string& path, int* epoch = nullptr,
                           CsiNormalizer* norm = nullptr);

}  // namespace mi2m
