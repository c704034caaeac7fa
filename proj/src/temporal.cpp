#include "mi2m/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mi2m {

using ad::Mat;
using ad::Var;

TemporalHeadParams init_temporal_head(const TemporalConfig& cfg, uint64_t seed) {
  if (cfg.feature_dim < 1 || cfg.hidden < 1 || cfg.num_classes < 2)
    throw ConfigError("temporal head: feature_dim/hidden/num_classes invalid");
  TemporalHeadParams p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, "temporal-init"));
  auto& ps = p.params;
  double si = std::sqrt(1.0 / cfg.feature_dim);
  double sh = std::sqrt(1.0 / cfg.hidden);
  ps.create_normal("gru.wr", cfg.feature_dim, cfg.hidden, si, rng);
  ps.create_normal("gru.wz", cfg.feature_dim, cfg.hidden, si, rng);
  ps.create_normal("gru.wh", cfg.feature_dim, cfg.hidden, si, rng);
  ps.create_normal("gru.ur", cfg.hidden, cfg.hidden, sh, rng);
  ps.create_normal("gru.uz", cfg.hidden, cfg.hidden, sh, rng);
  ps.create_normal("gru.uh", cfg.hidden, cfg.hidden, sh, rng);
  ps.create("gru.br", 1, cfg.hidden);
  ps.create("gru.bz", 1, cfg.hidden);
  ps.create("gru.bh", 1, cfg.hidden);
  ps.create_normal("gru.wo", cfg.hidden, cfg.hidden, sh, rng);
  ps.create("gru.bo", 1, cfg.hidden);
  ps.create_normal("cls.w", cfg.hidden, cfg.num_classes, sh, rng);
  ps.create("cls.b", 1, cfg.num_classes);
  return p;
}

namespace {

Eigen::RowVectorXd sigmoid_row(const Eigen::RowVectorXd& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& x) {
  double m = x.maxCoeff();
  Eigen::ArrayXd e = (x.array() - m).exp().transpose();
  return (e / e.sum()).matrix().transpose();
}

}  // namespace

Eigen::RowVectorXd gru_step(const Eigen::RowVectorXd& f_t, const Eigen::RowVectorXd& s_prev,
                            const TemporalHeadParams& params) {
  const auto& ps = params.params;
  if (f_t.size() != params.cfg.feature_dim)
    throw ValidationError("gru_step: feature width " + std::to_string(f_t.size()) +
                          " != configured " + std::to_string(params.cfg.feature_dim));
  if (s_prev.size() != params.cfg.hidden)
    throw ValidationError("gru_step: state width mismatch");
  Eigen::RowVectorXd r =
      sigmoid_row(f_t * ps.at("gru.wr") + s_prev * ps.at("gru.ur") + ps.at("gru.br").row(0));
  Eigen::RowVectorXd z =
      sigmoid_row(f_t * ps.at("gru.wz") + s_prev * ps.at("gru.uz") + ps.at("gru.bz").row(0));
  Eigen::RowVectorXd h =
      (f_t * ps.at("gru.wh") + r.cwiseProduct(s_prev) * ps.at("gru.uh") + ps.at("gru.bh").row(0))
          .array()
          .tanh();
  return (1.0 - z.array()) * s_prev.array() + z.array() * h.array();
}

Eigen::RowVectorXd gru_output(const Eigen::RowVectorXd& s_t, const TemporalHeadParams& params) {
  if (s_t.size() != params.cfg.hidden) throw ValidationError("gru_output: state width mismatch");
  return sigmoid_row(s_t * params.params.at("gru.wo") + params.params.at("gru.bo").row(0));
}

Eigen::RowVectorXd classify(const Eigen::RowVectorXd& o_t, const TemporalHeadParams& params) {
  if (o_t.size() != params.cfg.hidden) throw ValidationError("classify: input width mismatch");
  return softmax_row(o_t * params.params.at("cls.w") + params.params.at("cls.b").row(0));
}

double cross_entropy(const Eigen::RowVectorXd& probs, int y) {
  if (y < 0 || y >= probs.size())
    throw ValidationError("cross_entropy: class " + std::to_string(y) + " outside [0, " +
                          std::to_string(probs.size()) + ")");
  return -std::log(probs(y));
}

Eigen::RowVectorXd classify_sequence(const Mat& features, const TemporalHeadParams& params) {
  if (features.cols() != params.cfg.feature_dim)
    throw ValidationError("classify_sequence: feature width mismatch");
  Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(params.cfg.hidden);
  for (Eigen::Index t = 0; t < features.rows(); ++t) s = gru_step(features.row(t), s, params);
  Eigen::RowVectorXd o = params.cfg.output_sigmoid
                             ? gru_output(s, params)
                             : Eigen::RowVectorXd(s * params.params.at("gru.wo") +
                                                  params.params.at("gru.bo").row(0));
  return classify(o, params);
}

int predict_class(const Mat& features, const TemporalHeadParams& params) {
  Eigen::RowVectorXd p = classify_sequence(features, params);
  Eigen::Index arg = 0;
  p.maxCoeff(&arg);
  return static_cast<int>(arg);
}

Var temporal_logits_tape(TapeBinding& tb, const TemporalConfig& cfg,
                         const std::vector<Var>& step_features) {
  if (step_features.empty()) throw ValidationError("temporal_logits_tape: empty sequence");
  const Eigen::Index batch = step_features[0].rows();
  Var s = tb.constant(Mat::Zero(batch, cfg.hidden));
  for (Var f : step_features) {
    Var r = ad::sigmoid(ad::add_rowvec(
        ad::add(ad::matmul(f, tb.use("gru.wr")), ad::matmul(s, tb.use("gru.ur"))),
        tb.use("gru.br")));
    Var z = ad::sigmoid(ad::add_rowvec(
        ad::add(ad::matmul(f, tb.use("gru.wz")), ad::matmul(s, tb.use("gru.uz"))),
        tb.use("gru.bz")));
    Var h = ad::tanh_(ad::add_rowvec(
        ad::add(ad::matmul(f, tb.use("gru.wh")), ad::matmul(ad::mul(r, s), tb.use("gru.uh"))),
        tb.use("gru.bh")));
    s = ad::add(ad::mul(ad::affine(z, -1.0, 1.0), s), ad::mul(z, h));
  }
  Var o = ad::add_rowvec(ad::matmul(s, tb.use("gru.wo")), tb.use("gru.bo"));
  if (cfg.output_sigmoid) o = ad::sigmoid(o);
  return ad::add_rowvec(ad::matmul(o, tb.use("cls.w")), tb.use("cls.b"));
}

std::vector<FinetuneEpoch> finetune(const FinetuneData& data, TemporalHeadParams& params,
                                    const FinetuneSchedule& schedule) {
  const size_t n = data.sequences.size();
  if (n == 0 || data.labels.size() != n)
    throw std::invalid_argument("finetune: sequences and labels must be non-empty and aligned");
  std::set<int> present(data.labels.begin(), data.labels.end());
  std::string missing;
  for (int k = 0; k < params.cfg.num_classes; ++k)
    if (!present.count(k)) missing += (missing.empty() ? "" : ", ") + std::to_string(k);
  if (!missing.empty())
    throw ConfigError("finetune: classes absent from the budget: " + missing);
  for (size_t i = 0; i < n; ++i)
    if (data.labels[i] < 0 || data.labels[i] >= params.cfg.num_classes)
      throw ValidationError("finetune: label outside [0, K)");

  AdamConfig adam;
  adam.lr = schedule.lr;
  const int seq_len = static_cast<int>(data.sequences[0].rows());
  for (const Mat& s : data.sequences)
    if (s.rows() != seq_len || s.cols() != params.cfg.feature_dim)
      throw ValidationError("finetune: inconsistent sequence shapes");

  std::vector<FinetuneEpoch> out;
  const int batch = std::max(1, std::min<int>(schedule.batch, static_cast<int>(n)));
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(derive_seed(schedule.seed, "finetune-order", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    long long correct = 0;
    int steps = 0;
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch), ++steps) {
      size_t bend = std::min(n, at + static_cast<size_t>(batch));
      int bsz = static_cast<int>(bend - at);
      TapeBinding tb(params.params);
      std::vector<Var> step_features;
      step_features.reserve(static_cast<size_t>(seq_len));
      for (int t = 0; t < seq_len; ++t) {
        Mat ft(bsz, params.cfg.feature_dim);
        for (int b = 0; b < bsz; ++b)
          ft.row(b) = data.sequences[static_cast<size_t>(order[at + static_cast<size_t>(b)])].row(t);
        step_features.push_back(tb.constant(std::move(ft)));
      }
      std::vector<int> targets(static_cast<size_t>(bsz));
      for (int b = 0; b < bsz; ++b)
        targets[static_cast<size_t>(b)] = data.labels[static_cast<size_t>(order[at + static_cast<size_t>(b)])];
      Var logits = temporal_logits_tape(tb, params.cfg, step_features);
      for (int b = 0; b < bsz; ++b) {
        Eigen::Index arg = 0;
        logits.value().row(b).maxCoeff(&arg);
        if (static_cast<int>(arg) == targets[static_cast<size_t>(b)]) ++correct;
      }
      Var loss = ad::affine(ad::nll_rows(logits, targets), 1.0 / bsz, 0.0);
      double lv = loss.value()(0, 0);
      if (!std::isfinite(lv))
        throw NumericError("finetune: non-finite loss at epoch " + std::to_string(epoch));
      tb.tape().backward(loss);
      params.params.adam_step(tb.collect_grads(), adam);
      loss_sum += lv * bsz;
    }
    out.push_back(FinetuneEpoch{epoch, loss_sum / static_cast<double>(n),
                                static_cast<double>(correct) / static_cast<double>(n)});
  }
  return out;
}

void save_temporal_head(const TemporalHeadParams& params, const std::string& path,
                        const std::vector<std::pair<std::string, std::string>>& extra_meta) {
  Blob b;
  b.magic = "MI2MGRU1";
  b.set_meta("feature_dim", fmt_int(params.cfg.feature_dim));
  b.set_meta("hidden", fmt_int(params.cfg.hidden));
  b.set_meta("num_classes", fmt_int(params.cfg.num_classes));
  b.set_meta("output_sigmoid", params.cfg.output_sigmoid ? "1" : "0");
  for (const auto& [k, v] : extra_meta) b.set_meta(k, v);
  store_params(b, params.params);
  b.save(path);
}

TemporalHeadParams load_temporal_head(const std::string& path, Blob* raw) {
  Blob b = Blob::load(path, "MI2MGRU1");
  TemporalConfig cfg;
  cfg.feature_dim = static_cast<int>(b.meta_int("feature_dim"));
  cfg.hidden = static_cast<int>(b.meta_int("hidden"));
  cfg.num_classes = static_cast<int>(b.meta_int("num_classes"));
  cfg.output_sigmoid = b.meta_at("output_sigmoid") == "1";
  TemporalHeadParams p = init_temporal_head(cfg, 0);
  load_params(b, p.params, false);
  if (raw) *raw = std::move(b);
  return p;
}

}  // namespace mi2m
