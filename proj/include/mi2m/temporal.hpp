#pragma once

#include <string>
#include <vector>

#include "mi2m/checkpoint.hpp"
#include "mi2m/optim.hpp"
#include "mi2m/tape.hpp"

namespace mi2m {

struct TemporalConfig {
  int feature_dim = 384;  // encoder width d
  int hidden = 256;
  int num_classes = 6;
  bool output_sigmoid = true;  // Eq-faithful sigmoid before the classifier
};

// GRU weights (input projections W_*, square state projections U_*, biases
// B_*), the sigmoid output layer (W_o, B_o) and the linear classifier.
struct TemporalHeadParams {
  TemporalConfig cfg;
  ParamStore params;
};

TemporalHeadParams init_temporal_head(const TemporalConfig& cfg, uint64_t seed);

// One recurrence step:
//   r = sigmoid(W_r f + U_r s + B_r)
//   z = sigmoid(W_z f + U_z s + B_z)
//   h = tanh(W_h f + U_h (r . s) + B_h)
//   s' = (1 - z) . s + z . h
Eigen::RowVectorXd gru_step(const Eigen::RowVectorXd& f_t, const Eigen::RowVectorXd& s_prev,
                            const TemporalHeadParams& params);

// o = sigmoid(W_o s + B_o); entries in (0, 1).
Eigen::RowVectorXd gru_output(const Eigen::RowVectorXd& s_t, const TemporalHeadParams& params);

// Softmax over classifier logits.
Eigen::RowVectorXd classify(const Eigen::RowVectorXd& o_t, const TemporalHeadParams& params);

// -log p[y]; y must lie in [0, K).
double cross_entropy(const Eigen::RowVectorXd& probs, int y);

// Runs the GRU over a (T, feature_dim) sequence and classifies from the last
// step's output. Returns class probabilities.
Eigen::RowVectorXd classify_sequence(const ad::Mat& features, const TemporalHeadParams& params);
int predict_class(const ad::Mat& features, const TemporalHeadParams& params);

// --- finetuning -----------------------------------------------------------------

struct FinetuneData {
  std::vector<ad::Mat> sequences;  // per clip: (T, feature_dim) frame features
  std::vector<int> labels;
  std::vector<std::string> clip_ids;
};

struct FinetuneSchedule {
  double lr = 4e-4;
  int batch = 32;
  int epochs = 10;
  uint64_t seed = 1;
};

struct FinetuneEpoch {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
};

// Cross-entropy training of GRU + classifier only. Throws ConfigError listing
// the classes absent from the budget.
std::vector<FinetuneEpoch> finetune(const FinetuneData& data, TemporalHeadParams& params,
                                    const FinetuneSchedule& schedule);

// Tape-side classifier logits over a batch of stacked per-step features
// (each (B, feature_dim)); used by both head-only and unfrozen training.
ad::Var temporal_logits_tape(TapeBinding& tb, const TemporalConfig& cfg,
                             const std::vector<ad::Var>& step_features);

// Checkpoint io (magic MI2MGRU1); extra meta rides along for task wiring.
void save_temporal_head(const TemporalHeadParams& params, const std::string& path,
                        const std::vector<std::pair<std::string, std::string>>& extra_meta = {});
TemporalHeadParams load_temporal_head(const std::string& path, Blob* raw = nullptr);

}  // namespace mi2m
