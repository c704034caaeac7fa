#pragma once

#include <string>
#include <vector>

#include "mi2m/config.hpp"
#include "mi2m/dataset.hpp"
#include "mi2m/encoder.hpp"
#include "mi2m/eval.hpp"
#include "mi2m/temporal.hpp"
#include "mi2m/tokenizer.hpp"

namespace mi2m {

// A manifest loaded with all clips in memory, split into pretrain/test frame
// sets, with CSI normalization fitted on the pretrain side.
struct PreparedDataset {
  DatasetManifest manifest;
  std::vector<std::vector<MultimodalFrame>> clips;
  std::vector<int> frames_per_clip;
  FrameSplit split;
  CsiNormalizer norm;

  MultimodalFrame normalized_frame(const FrameRef& ref) const;
};

PreparedDataset prepare_dataset(const std::string& manifest_path, const RunConfig& cfg);

EncoderConfig encoder_config_for(const RunConfig& cfg, const DatasetShapes& shapes);

struct TrainedTokenizers {
  TokenizerParams wifi;
  TokenizerParams vision;
  std::vector<double> wifi_trace;
  std::vector<double> vision_trace;
};

TrainedTokenizers train_tokenizers(const PreparedDataset& data, const RunConfig& cfg,
                                   uint64_t seed);

// Tokenizes the pretraining frames once and runs masked pretraining.
EncoderParams pretrain_encoder(const PreparedDataset& data, const TrainedTokenizers& toks,
                               const RunConfig& cfg, uint64_t seed,
                               const std::function<void(int, int, double)>& step_trace = {},
                               const std::function<void(int, EncoderParams&)>& on_epoch = {},
                               std::vector<EpochStats>* stats_out = nullptr,
                               EncoderParams* resume_from = nullptr, int start_epoch = 0);

struct FinetuneResult {
  TemporalHeadParams head;
  std::vector<FinetuneEpoch> metrics;
  std::vector<std::string> clip_ids;
  BudgetReport budget;
};

// Budgeted few-shot finetuning on the pretrain-side windows; the encoder
// stays frozen unless cfg.ft_freeze is false.
FinetuneResult finetune_head(const PreparedDataset& data, EncoderParams& encoder,
                             const RunConfig& cfg, uint64_t seed);

std::vector<ClipWindow> test_windows(const PreparedDataset& data, int seq_len);

TrainedModel assemble_model(const PreparedDataset& data, const EncoderParams& encoder,
                            const FinetuneResult& ft, const RunConfig& cfg);

// Full protocol cell: split -> tokenizer train -> pretrain -> budgeted
// finetune -> evaluate, averaged over cfg seeds. Supports cross-dataset
// cells (pretrain on A, finetune/evaluate on B).
struct ProtocolSpec {
  std::string pretrain_manifest;
  std::string finetune_manifest;  // empty = same as pretrain
  RunConfig cfg;
};

std::vector<EvalReport> run_protocol(const ProtocolSpec& spec);

// Sentinel-file lock guarding a checkpoint directory against concurrent
// writers. Throws IoError when already locked.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::string& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::string path_;
};

// CLI commands; each validates the config up front and maps to an exit code.
int cmd_synth(const RunConfig& cfg);
int cmd_pretrain(const RunConfig& cfg, bool resume);
int cmd_finetune(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);

}  // namespace mi2m
