#pragma once

#include <string>
#include <vector>

#include "mi2m/checkpoint.hpp"
#include "mi2m/common.hpp"
#include "mi2m/dataset.hpp"
#include "mi2m/optim.hpp"
#include "mi2m/tape.hpp"

namespace mi2m {

// Patch decomposition of both modalities. CSI patches tile the
// (subcarrier, packet) plane with antenna pairs as channels; image patches
// tile (H, W) with color channels.
struct PatchGeometry {
  int csi_rows = 6, csi_cols = 5;
  int image_rows = 16, image_cols = 16;

  void validate(const DatasetShapes& s) const;
  int n_wifi(const DatasetShapes& s) const {
    return (s.subcarriers / csi_rows) * (s.packets / csi_cols);
  }
  int n_vision(const DatasetShapes& s) const {
    return (s.height / image_rows) * (s.width / image_cols);
  }
  int wifi_patch_dim(const DatasetShapes& s) const {
    return s.antennas * csi_rows * csi_cols;
  }
  int vision_patch_dim(const DatasetShapes& s) const {
    return s.channels * image_rows * image_cols;
  }
  bool operator==(const PatchGeometry&) const = default;
};

// Row-major patch order; each row is one patch flattened channels x rows x
// cols. unpatchify is the exact inverse.
ad::Mat patchify(const Tensor3f& t, int patch_rows, int patch_cols);
Tensor3f unpatchify(const ad::Mat& patches, int d0, int d1, int d2, int patch_rows,
                    int patch_cols);

// One draw of the Gumbel-softmax relaxation over a logits vector. With
// hard=true the result is the exact one-hot at the perturbed argmax.
Eigen::VectorXd gumbel_softmax_sample(const Eigen::VectorXd& logits, double tau,
                                      uint64_t noise_seed, bool hard = false);

enum class Modality { wifi, vision };
const char* modality_name(Modality m);

struct TokenizerConfig {
  Modality modality = Modality::wifi;
  int channels = 3;
  int patch_rows = 6;
  int patch_cols = 5;
  int codebook_size = 8192;
  int hidden = 64;

  int mid_rows() const { return (patch_rows + 1) / 2; }
  int mid_cols() const { return (patch_cols + 1) / 2; }
  int mid_features() const { return hidden * mid_rows() * mid_cols(); }
  int patch_dim() const { return channels * patch_rows * patch_cols; }
};

// dVAE tokenizer for one modality: a two-stage strided-conv encoder to
// codebook logits and a two-stage decoder back to the patch.
struct TokenizerParams {
  TokenizerConfig cfg;
  ParamStore params;
  double tau = 1.0;        // current temperature (schedule state)
  long long steps_done = 0;
};

TokenizerParams init_tokenizer(const TokenizerConfig& cfg, uint64_t seed);

struct TokenizerSchedule {
  double lr = 5e-4;
  int steps = 300;
  int batch = 128;
  double tau_start = 1.0;
  double tau_end = 1.0 / 16.0;
  // weight of the codebook-usage term (marginal entropy of the batch code
  // distribution); keeps the argmax assignment from collapsing onto a
  // handful of codes
  double usage_weight = 0.05;
  uint64_t seed = 1;
};

// Minimizes mean squared reconstruction error (Gaussian likelihood) through
// the Gumbel-softmax relaxation; hard straight-through sampling in the final
// third of the schedule. Returns the per-step loss trace.
std::vector<double> train_tokenizer(const ad::Mat& patches, TokenizerParams& params,
                                    const TokenizerSchedule& schedule);

// One training batch as a tape graph: encoder logits -> Gumbel-softmax codes
// -> decoder -> mean squared reconstruction error, plus usage_weight times
// the codebook-usage penalty (log|V| minus the entropy of the batch-mean
// soft code distribution). The trainer uses this; gradient checks drive it
// directly with fixed noise.
ad::Var tokenizer_batch_loss_tape(TapeBinding& tb, const TokenizerParams& params,
                                  const ad::Mat& batch, const ad::Mat& noise, double tau,
                                  bool hard, double usage_weight = 0.0);

struct TokenGrid {
  Modality modality = Modality::wifi;
  std::vector<int> tokens;
};

// Deterministic argmax over encoder logits, one token per patch row.
TokenGrid tokenize_patches(const ad::Mat& patches, const TokenizerParams& params);
TokenGrid tokenize(const Tensor3f& frame_tensor, const TokenizerParams& params,
                   const PatchGeometry& geometry);

ad::Mat decode_tokens(const TokenGrid& tokens, const TokenizerParams& params);
Tensor3f detokenize(const TokenGrid& tokens, const TokenizerParams& params,
                    const PatchGeometry& geometry, const DatasetShapes& shapes);

// Plain (tape-free) encoder logits for one patch row; the training path is
// cross-checked against this in tests.
Eigen::VectorXd tokenizer_logits(const TokenizerParams& params,
                                 const Eigen::RowVectorXd& patch);

// Checkpoint io (magic MI2MTOK1). The WiFi tokenizer optionally carries the
// dataset CSI normalization statistics.
void save_tokenizer(const TokenizerParams& params, const std::string& path,
                    const CsiNormalizer* norm = nullptr);
TokenizerParams load_tokenizer(const std::string& path, CsiNormalizer* norm = nullptr);

// Samples up to max_patches patch rows for tokenizer training from a frame
// provider, uniformly over (frame, patch) pairs.
ad::Mat sample_patch_pool(const std::vector<ad::Mat>& frame_patches, int max_patches,
                          uint64_t seed);

}  // namespace mi2m
