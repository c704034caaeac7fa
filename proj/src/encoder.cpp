#include "mi2m/encoder.hpp"

#include <cmath>

namespace mi2m {

using ad::Mat;
using ad::Var;

MaskPlan plan_mask(int n_wifi, int n_vision, double alpha, uint64_t seed) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("plan_mask: alpha must be in (0, 1)");
  if (n_wifi < 0 || n_vision < 0) throw std::invalid_argument("plan_mask: negative patch count");
  MaskPlan plan;
  plan.alpha = alpha;
  plan.seed = seed;
  Rng rng(derive_seed(seed, "mask-plan"));
  int kw = static_cast<int>(std::ceil(alpha * n_wifi));
  int kv = static_cast<int>(std::ceil(alpha * n_vision));
  plan.wifi = rng.sample_without_replacement(kw, n_wifi);
  plan.vision = rng.sample_without_replacement(kv, n_vision);
  return plan;
}

const char* modality_mode_name(ModalityMode m) {
  switch (m) {
    case ModalityMode::both: return "both";
    case ModalityMode::wifi_only: return "wifi";
    case ModalityMode::vision_only: return "vision";
  }
  return "both";
}

ModalityMode modality_mode_from(const std::string& name) {
  if (name == "both") return ModalityMode::both;
  if (name == "wifi") return ModalityMode::wifi_only;
  if (name == "vision") return ModalityMode::vision_only;
  throw ConfigError("unknown modality mode '" + name + "' (both|wifi|vision)");
}

void EncoderConfig::validate() const {
  if (layers < 0) throw ConfigError("encoder: layers must be >= 0");
  if (dim < 1 || heads < 1) throw ConfigError("encoder: dim and heads must be positive");
  if (dim % heads != 0) throw ConfigError("encoder: heads must divide dim (num_heads * d_k = d)");
  if (ffn_mult < 1) throw ConfigError("encoder: ffn_mult must be >= 1");
  if (wifi_active() && (n_wifi < 1 || wifi_patch_dim < 1 || wifi_vocab < 2))
    throw ConfigError("encoder: wifi patch configuration invalid");
  if (vision_active() && (n_vision < 1 || vision_patch_dim < 1 || vision_vocab < 2))
    throw ConfigError("encoder: vision patch configuration invalid");
}

namespace {

std::string blk(int i, const char* suffix) {
  return "blk" + std::to_string(i) + "." + suffix;
}

}  // namespace

EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  EncoderParams p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, "encoder-init"));
  auto& ps = p.params;
  const double s = 0.02;
  if (cfg.wifi_active()) {
    ps.create_normal("embed.wifi.w", cfg.wifi_patch_dim, cfg.dim, s, rng);
    ps.create("embed.wifi.b", 1, cfg.dim);
    ps.create_normal("embed.type.wifi", 1, cfg.dim, s, rng);
  }
  if (cfg.vision_active()) {
    ps.create_normal("embed.vision.w", cfg.vision_patch_dim, cfg.dim, s, rng);
    ps.create("embed.vision.b", 1, cfg.dim);
    ps.create_normal("embed.type.vision", 1, cfg.dim, s, rng);
  }
  ps.create_normal("embed.mask", 1, cfg.dim, s, rng);
  ps.create_normal("embed.pos", cfg.seq_len(), cfg.dim, s, rng);
  for (int i = 0; i < cfg.layers; ++i) {
    ps.create_normal(blk(i, "attn.wq"), cfg.dim, cfg.dim, s, rng);
    ps.create(blk(i, "attn.bq"), 1, cfg.dim);
    ps.create_normal(blk(i, "attn.wk"), cfg.dim, cfg.dim, s, rng);
    ps.create(blk(i, "attn.bk"), 1, cfg.dim);
    ps.create_normal(blk(i, "attn.wv"), cfg.dim, cfg.dim, s, rng);
    ps.create(blk(i, "attn.bv"), 1, cfg.dim);
    ps.create_normal(blk(i, "attn.wo"), cfg.dim, cfg.dim, s, rng);
    ps.create(blk(i, "attn.bo"), 1, cfg.dim);
    ps.create(blk(i, "ln1.g"), 1, cfg.dim).setOnes();
    ps.create(blk(i, "ln1.b"), 1, cfg.dim);
    ps.create_normal(blk(i, "ffn.w1"), cfg.dim, cfg.ffn_mult * cfg.dim, s, rng);
    ps.create(blk(i, "ffn.b1"), 1, cfg.ffn_mult * cfg.dim);
    ps.create_normal(blk(i, "ffn.w2"), cfg.ffn_mult * cfg.dim, cfg.dim, s, rng);
    ps.create(blk(i, "ffn.b2"), 1, cfg.dim);
    ps.create(blk(i, "ln2.g"), 1, cfg.dim).setOnes();
    ps.create(blk(i, "ln2.b"), 1, cfg.dim);
  }
  ps.create("lnf.g", 1, cfg.dim).setOnes();
  ps.create("lnf.b", 1, cfg.dim);
  if (cfg.wifi_active()) {
    ps.create_normal("head.wifi.w", cfg.dim, cfg.wifi_vocab, s, rng);
    ps.create("head.wifi.b", 1, cfg.wifi_vocab);
  }
  if (cfg.vision_active()) {
    ps.create_normal("head.vision.w", cfg.dim, cfg.vision_vocab, s, rng);
    ps.create("head.vision.b", 1, cfg.vision_vocab);
  }
  return p;
}

FramePatches make_frame_patches(const MultimodalFrame& frame, const PatchGeometry& geometry,
                                const EncoderConfig& cfg) {
  FramePatches fp;
  if (cfg.wifi_active()) {
    fp.wifi = patchify(frame.csi, geometry.csi_rows, geometry.csi_cols);
    if (fp.wifi.rows() != cfg.n_wifi || fp.wifi.cols() != cfg.wifi_patch_dim)
      throw ValidationError("frame patches: wifi grid " + std::to_string(fp.wifi.rows()) + "x" +
                            std::to_string(fp.wifi.cols()) + " does not match encoder (" +
                            std::to_string(cfg.n_wifi) + "x" +
                            std::to_string(cfg.wifi_patch_dim) + ")");
  }
  if (cfg.vision_active()) {
    fp.vision = patchify(frame.image, geometry.image_rows, geometry.image_cols);
    if (fp.vision.rows() != cfg.n_vision || fp.vision.cols() != cfg.vision_patch_dim)
      throw ValidationError("frame patches: vision grid does not match encoder configuration");
  }
  return fp;
}

namespace {

void check_plan(const MaskPlan& plan, const EncoderConfig& cfg) {
  auto check_side = [](const std::vector<int>& idx, int n, const char* side) {
    int prev = -1;
    for (int i : idx) {
      if (i < 0 || i >= n)
        throw ValidationError(std::string("mask plan: ") + side + " index " + std::to_string(i) +
                              " outside [0, " + std::to_string(n) + ")");
      if (i <= prev) throw ValidationError(std::string("mask plan: ") + side +
                                           " indices must be ascending and unique");
      prev = i;
    }
  };
  check_side(plan.wifi, cfg.wifi_active() ? cfg.n_wifi : 0, "wifi");
  check_side(plan.vision, cfg.vision_active() ? cfg.n_vision : 0, "vision");
}

}  // namespace

CorruptedSample embed_and_corrupt(const FramePatches& patches, const MaskPlan& plan,
                                  const EncoderParams& params) {
  const EncoderConfig& cfg = params.cfg;
  check_plan(plan, cfg);
  const auto& ps = params.params;
  Mat x(cfg.seq_len(), cfg.dim);
  if (cfg.wifi_active()) {
    if (patches.wifi.rows() != cfg.n_wifi)
      throw ValidationError("embed_and_corrupt: wifi patches missing or wrong count");
    Mat e = patches.wifi * ps.at("embed.wifi.w");
    e.rowwise() += Eigen::RowVectorXd(ps.at("embed.wifi.b").row(0));
    for (int i : plan.wifi) e.row(i) = ps.at("embed.mask").row(0);
    e.rowwise() += Eigen::RowVectorXd(ps.at("embed.type.wifi").row(0));
    x.middleRows(cfg.wifi_offset(), cfg.n_wifi) = e;
  }
  if (cfg.vision_active()) {
    if (patches.vision.rows() != cfg.n_vision)
      throw ValidationError("embed_and_corrupt: vision patches missing or wrong count");
    Mat e = patches.vision * ps.at("embed.vision.w");
    e.rowwise() += Eigen::RowVectorXd(ps.at("embed.vision.b").row(0));
    for (int i : plan.vision) e.row(i) = ps.at("embed.mask").row(0);
    e.rowwise() += Eigen::RowVectorXd(ps.at("embed.type.vision").row(0));
    x.middleRows(cfg.vision_offset(), cfg.n_vision) = e;
  }
  x += ps.at("embed.pos");
  CorruptedSample out;
  out.embedded = std::move(x);
  out.plan = plan;
  return out;
}

Mat attention(const Mat& queries, const Mat& keys, const Mat& values, int d_k) {
  if (d_k <= 0) throw ValidationError("attention: d_k must be positive");
  if (queries.cols() != keys.cols())
    throw ValidationError("attention: query/key width mismatch (" +
                          std::to_string(queries.cols()) + " vs " + std::to_string(keys.cols()) +
                          ")");
  if (keys.rows() != values.rows())
    throw ValidationError("attention: key/value count mismatch (" + std::to_string(keys.rows()) +
                          " vs " + std::to_string(values.rows()) + ")");
  Mat scores = queries * keys.transpose() / std::sqrt(static_cast<double>(d_k));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    double m = scores.row(r).maxCoeff();
    Eigen::ArrayXd e = (scores.row(r).array() - m).exp();
    scores.row(r) = (e / e.sum()).matrix();
  }
  return scores * values;
}

namespace {

Mat layer_norm_plain(const Mat& x, const Mat& gain, const Mat& bias, double eps = 1e-5) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + eps);
    y.row(r) =
        (((x.row(r).array() - mu) * inv) * gain.row(0).array() + bias.row(0).array()).matrix();
  }
  return y;
}

Mat gelu_plain(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
}

Mat softmax_rows_plain(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - m).exp();
    y.row(r) = (e / e.sum()).matrix();
  }
  return y;
}

}  // namespace

Mat encode_sequence(const EncoderParams& params, const Mat& embedded) {
  const EncoderConfig& cfg = params.cfg;
  const auto& ps = params.params;
  if (embedded.rows() != cfg.seq_len() || embedded.cols() != cfg.dim)
    throw ValidationError("encode: embedded sequence must be " + std::to_string(cfg.seq_len()) +
                          "x" + std::to_string(cfg.dim));
  Mat x = embedded;
  const int dh = cfg.d_head();
  for (int l = 0; l < cfg.layers; ++l) {
    Mat q = x * ps.at(blk(l, "attn.wq"));
    q.rowwise() += Eigen::RowVectorXd(ps.at(blk(l, "attn.bq")).row(0));
    Mat k = x * ps.at(blk(l, "attn.wk"));
    k.rowwise() += Eigen::RowVectorXd(ps.at(blk(l, "attn.bk")).row(0));
    Mat v = x * ps.at(blk(l, "attn.wv"));
    v.rowwise() += Eigen::RowVectorXd(ps.at(blk(l, "attn.bv")).row(0));
    Mat heads(x.rows(), cfg.dim);
    for (int h = 0; h < cfg.heads; ++h)
      heads.middleCols(h * dh, dh) = attention(q.middleCols(h * dh, dh),
                                               k.middleCols(h * dh, dh),
                                               v.middleCols(h * dh, dh), dh);
    Mat attn_out = heads * ps.at(blk(l, "attn.wo"));
    attn_out.rowwise() += Eigen::RowVectorXd(ps.at(blk(l, "attn.bo")).row(0));
    x = layer_norm_plain(x + attn_out, ps.at(blk(l, "ln1.g")), ps.at(blk(l, "ln1.b")));
    Mat h1 = gelu_plain((x * ps.at(blk(l, "ffn.w1"))).rowwise() +
                        Eigen::RowVectorXd(ps.at(blk(l, "ffn.b1")).row(0)));
    Mat f = (h1 * ps.at(blk(l, "ffn.w2"))).rowwise() +
            Eigen::RowVectorXd(ps.at(blk(l, "ffn.b2")).row(0));
    x = layer_norm_plain(x + f, ps.at(blk(l, "ln2.g")), ps.at(blk(l, "ln2.b")));
    if (!x.allFinite())
      throw NumericError("encode: non-finite activations in block " + std::to_string(l));
  }
  x = layer_norm_plain(x, ps.at("lnf.g"), ps.at("lnf.b"));
  if (!x.allFinite()) throw NumericError("encode: non-finite activations in final norm");
  return x;
}

Mat encode(const CorruptedSample& sample, const EncoderParams& params) {
  return encode_sequence(params, sample.embedded);
}

MaskedPredictions predict_tokens(const Mat& hidden, const EncoderParams& params,
                                 const MaskPlan& plan) {
  const EncoderConfig& cfg = params.cfg;
  check_plan(plan, cfg);
  if (hidden.rows() != cfg.seq_len() || hidden.cols() != cfg.dim)
    throw ValidationError("predict_tokens: hidden shape mismatch");
  MaskedPredictions out;
  if (cfg.wifi_active() && !plan.wifi.empty()) {
    Mat rows(static_cast<Eigen::Index>(plan.wifi.size()), cfg.dim);
    for (size_t i = 0; i < plan.wifi.size(); ++i)
      rows.row(static_cast<Eigen::Index>(i)) = hidden.row(cfg.wifi_offset() + plan.wifi[i]);
    Mat logits = rows * params.params.at("head.wifi.w");
    logits.rowwise() += Eigen::RowVectorXd(params.params.at("head.wifi.b").row(0));
    out.wifi = softmax_rows_plain(logits);
  }
  if (cfg.vision_active() && !plan.vision.empty()) {
    Mat rows(static_cast<Eigen::Index>(plan.vision.size()), cfg.dim);
    for (size_t i = 0; i < plan.vision.size(); ++i)
      rows.row(static_cast<Eigen::Index>(i)) = hidden.row(cfg.vision_offset() + plan.vision[i]);
    Mat logits = rows * params.params.at("head.vision.w");
    logits.rowwise() += Eigen::RowVectorXd(params.params.at("head.vision.b").row(0));
    out.vision = softmax_rows_plain(logits);
  }
  return out;
}

double mi2m_loss(const MaskedPredictions& pred, const std::vector<int>& wifi_targets,
                 const std::vector<int>& vision_targets) {
  if (static_cast<Eigen::Index>(wifi_targets.size()) != pred.wifi.rows() ||
      static_cast<Eigen::Index>(vision_targets.size()) != pred.vision.rows())
    throw ValidationError("mi2m_loss: one target per masked position required");
  double sum = 0.0;
  long long count = 0;
  auto side = [&](const Mat& p, const std::vector<int>& t) {
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      int tok = t[static_cast<size_t>(r)];
      if (tok < 0 || tok >= p.cols())
        throw ValidationError("mi2m_loss: target token " + std::to_string(tok) +
                              " outside codebook [0, " + std::to_string(p.cols()) + ")");
      sum -= std::log(p(r, tok));
      ++count;
    }
  };
  side(pred.wifi, wifi_targets);
  side(pred.vision, vision_targets);
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// --- tape-side builders ------------------------------------------------------

Var embed_and_corrupt_tape(TapeBinding& tb, const EncoderParams& params,
                           const FramePatches& patches, const MaskPlan& plan) {
  const EncoderConfig& cfg = params.cfg;
  check_plan(plan, cfg);
  std::vector<Var> parts;
  if (cfg.wifi_active()) {
    Var e = ad::add_rowvec(ad::matmul(tb.constant(patches.wifi), tb.use("embed.wifi.w")),
                           tb.use("embed.wifi.b"));
    e = ad::mask_rows(e, plan.wifi, tb.use("embed.mask"));
    e = ad::add_rowvec(e, tb.use("embed.type.wifi"));
    parts.push_back(e);
  }
  if (cfg.vision_active()) {
    Var e = ad::add_rowvec(ad::matmul(tb.constant(patches.vision), tb.use("embed.vision.w")),
                           tb.use("embed.vision.b"));
    e = ad::mask_rows(e, plan.vision, tb.use("embed.mask"));
    e = ad::add_rowvec(e, tb.use("embed.type.vision"));
    parts.push_back(e);
  }
  Var x = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
  return ad::add(x, tb.use("embed.pos"));
}

Var encode_sequence_tape(TapeBinding& tb, const EncoderParams& params, Var x) {
  const EncoderConfig& cfg = params.cfg;
  const int dh = cfg.d_head();
  for (int l = 0; l < cfg.layers; ++l) {
    Var q = ad::add_rowvec(ad::matmul(x, tb.use(blk(l, "attn.wq"))), tb.use(blk(l, "attn.bq")));
    Var k = ad::add_rowvec(ad::matmul(x, tb.use(blk(l, "attn.wk"))), tb.use(blk(l, "attn.bk")));
    Var v = ad::add_rowvec(ad::matmul(x, tb.use(blk(l, "attn.wv"))), tb.use(blk(l, "attn.bv")));
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      Var qh = ad::slice_cols(q, h * dh, dh);
      Var kh = ad::slice_cols(k, h * dh, dh);
      Var vh = ad::slice_cols(v, h * dh, dh);
      Var scores = ad::affine(ad::matmul(qh, ad::transpose(kh)),
                              1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
      heads.push_back(ad::matmul(ad::softmax_rows(scores), vh));
    }
    Var attn_out = ad::add_rowvec(ad::matmul(ad::concat_cols(heads), tb.use(blk(l, "attn.wo"))),
                                  tb.use(blk(l, "attn.bo")));
    x = ad::layer_norm_rows(ad::add(x, attn_out), tb.use(blk(l, "ln1.g")),
                            tb.use(blk(l, "ln1.b")));
    Var h1 = ad::gelu(
        ad::add_rowvec(ad::matmul(x, tb.use(blk(l, "ffn.w1"))), tb.use(blk(l, "ffn.b1"))));
    Var f = ad::add_rowvec(ad::matmul(h1, tb.use(blk(l, "ffn.w2"))), tb.use(blk(l, "ffn.b2")));
    x = ad::layer_norm_rows(ad::add(x, f), tb.use(blk(l, "ln2.g")), tb.use(blk(l, "ln2.b")));
    if (!x.value().allFinite())
      throw NumericError("encode: non-finite activations in block " + std::to_string(l));
  }
  return ad::layer_norm_rows(x, tb.use("lnf.g"), tb.use("lnf.b"));
}

std::vector<EpochStats> pretrain(const PretrainData& data, EncoderParams& params,
                                 const PretrainSchedule& schedule,
                                 const std::function<void(int, int, double)>& step_trace,
                                 const std::function<void(int)>& on_epoch) {
  const EncoderConfig& cfg = params.cfg;
  const size_t n = data.frames.size();
  if (n == 0) throw std::invalid_argument("pretrain: empty frame set");
  if (cfg.wifi_active() && data.wifi_tokens.size() != n)
    throw ConfigError("pretrain: wifi token targets missing");
  if (cfg.vision_active() && data.vision_tokens.size() != n)
    throw ConfigError("pretrain: vision token targets missing");
  for (size_t i = 0; i < n; ++i) {
    if (cfg.wifi_active() &&
        static_cast<int>(data.wifi_tokens[i].size()) != cfg.n_wifi)
      throw ConfigError("pretrain: wifi token grid size mismatch at frame " + std::to_string(i));
    if (cfg.vision_active() &&
        static_cast<int>(data.vision_tokens[i].size()) != cfg.n_vision)
      throw ConfigError("pretrain: vision token grid size mismatch at frame " +
                        std::to_string(i));
  }
  AdamConfig adam;
  adam.lr = schedule.lr;
  std::vector<EpochStats> stats;
  const int batch = std::max(1, std::min<int>(schedule.batch, static_cast<int>(n)));
  for (int epoch = schedule.start_epoch; epoch < schedule.epochs; ++epoch) {
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(derive_seed(schedule.seed, "epoch-order", static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_sum = 0.0;
    int steps = 0;
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch), ++steps) {
      size_t bend = std::min(n, at + static_cast<size_t>(batch));
      TapeBinding tb(params.params);
      std::vector<Var> wifi_rows, vision_rows;
      std::vector<int> wifi_targets, vision_targets;
      for (size_t bi = at; bi < bend; ++bi) {
        int idx = order[bi];
        uint64_t mask_seed =
            schedule.mask_mode == MaskMode::fresh
                ? derive_seed(schedule.seed, "mask", static_cast<uint64_t>(epoch),
                              static_cast<uint64_t>(idx))
                : derive_seed(schedule.seed, "mask-fixed", static_cast<uint64_t>(idx));
        MaskPlan plan = plan_mask(cfg.wifi_active() ? cfg.n_wifi : 0,
                                  cfg.vision_active() ? cfg.n_vision : 0, schedule.alpha,
                                  mask_seed);
        FramePatches patches =
            make_frame_patches(data.frames[static_cast<size_t>(idx)], data.geometry, cfg);
        Var x = embed_and_corrupt_tape(tb, params, patches, plan);
        Var h = encode_sequence_tape(tb, params, x);
        if (!plan.wifi.empty()) {
          std::vector<int> rows;
          rows.reserve(plan.wifi.size());
          for (int i : plan.wifi) rows.push_back(cfg.wifi_offset() + i);
          wifi_rows.push_back(ad::gather_rows(h, rows));
          for (int i : plan.wifi)
            wifi_targets.push_back(data.wifi_tokens[static_cast<size_t>(idx)][static_cast<size_t>(i)]);
        }
        if (!plan.vision.empty()) {
          std::vector<int> rows;
          rows.reserve(plan.vision.size());
          for (int i : plan.vision) rows.push_back(cfg.vision_offset() + i);
          vision_rows.push_back(ad::gather_rows(h, rows));
          for (int i : plan.vision)
            vision_targets.push_back(
                data.vision_tokens[static_cast<size_t>(idx)][static_cast<size_t>(i)]);
        }
      }
      std::vector<Var> nlls;
      long long total = 0;
      if (!wifi_rows.empty()) {
        Var logits = ad::add_rowvec(
            ad::matmul(ad::concat_rows(wifi_rows), tb.use("head.wifi.w")), tb.use("head.wifi.b"));
        nlls.push_back(ad::nll_rows(logits, wifi_targets));
        total += static_cast<long long>(wifi_targets.size());
      }
      if (!vision_rows.empty()) {
        Var logits = ad::add_rowvec(ad::matmul(ad::concat_rows(vision_rows),
                                               tb.use("head.vision.w")),
                                    tb.use("head.vision.b"));
        nlls.push_back(ad::nll_rows(logits, vision_targets));
        total += static_cast<long long>(vision_targets.size());
      }
      Var sum = nlls[0];
      for (size_t i = 1; i < nlls.size(); ++i) sum = ad::add(sum, nlls[i]);
      Var loss = ad::affine(sum, 1.0 / static_cast<double>(total), 0.0);
      double lv = loss.value()(0, 0);
      if (!std::isfinite(lv))
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(steps));
      tb.tape().backward(loss);
      params.params.adam_step(tb.collect_grads(), adam);
      epoch_sum += lv;
      if (step_trace) step_trace(epoch, steps, lv);
    }
    stats.push_back(EpochStats{epoch, steps > 0 ? epoch_sum / steps : 0.0});
    if (on_epoch) on_epoch(epoch);
  }
  return stats;
}

Eigen::VectorXd extract_frame_feature(const FramePatches& patches, const EncoderParams& params) {
  MaskPlan empty;
  empty.alpha = 0.0;
  CorruptedSample s = embed_and_corrupt(patches, empty, params);
  Mat h = encode_sequence(params, s.embedded);
  return h.colwise().mean().transpose();
}

void save_encoder(const EncoderParams& params, const std::string& path, int epoch,
                  const CsiNormalizer* norm) {
  Blob b;
  b.magic = "MI2MENC1";
  b.set_meta("layers", fmt_int(params.cfg.layers));
  b.set_meta("dim", fmt_int(params.cfg.dim));
  b.set_meta("heads", fmt_int(params.cfg.heads));
  b.set_meta("ffn_mult", fmt_int(params.cfg.ffn_mult));
  b.set_meta("n_wifi", fmt_int(params.cfg.n_wifi));
  b.set_meta("n_vision", fmt_int(params.cfg.n_vision));
  b.set_meta("wifi_patch_dim", fmt_int(params.cfg.wifi_patch_dim));
  b.set_meta("vision_patch_dim", fmt_int(params.cfg.vision_patch_dim));
  b.set_meta("wifi_vocab", fmt_int(params.cfg.wifi_vocab));
  b.set_meta("vision_vocab", fmt_int(params.cfg.vision_vocab));
  b.set_meta("modality", modality_mode_name(params.cfg.modality));
  b.set_meta("epoch", fmt_int(epoch));
  store_params(b, params.params);
  store_optimizer_state(b, const_cast<ParamStore&>(params.params));
  if (norm && !norm->empty()) {
    Mat mn(norm->antennas, norm->subcarriers), mx(norm->antennas, norm->subcarriers);
    for (int a = 0; a < norm->antennas; ++a)
      for (int k = 0; k < norm->subcarriers; ++k) {
        mn(a, k) = norm->min_v[static_cast<size_t>(a) * norm->subcarriers + k];
        mx(a, k) = norm->max_v[static_cast<size_t>(a) * norm->subcarriers + k];
      }
    b.add_array("norm.csi_min", mn);
    b.add_array("norm.csi_max", mx);
  }
  b.save(path);
}

EncoderParams load_encoder(const std::string& path, int* epoch, CsiNormalizer* norm) {
  Blob b = Blob::load(path, "MI2MENC1");
  EncoderConfig cfg;
  cfg.layers = static_cast<int>(b.meta_int("layers"));
  cfg.dim = static_cast<int>(b.meta_int("dim"));
  cfg.heads = static_cast<int>(b.meta_int("heads"));
  cfg.ffn_mult = static_cast<int>(b.meta_int("ffn_mult"));
  cfg.n_wifi = static_cast<int>(b.meta_int("n_wifi"));
  cfg.n_vision = static_cast<int>(b.meta_int("n_vision"));
  cfg.wifi_patch_dim = static_cast<int>(b.meta_int("wifi_patch_dim"));
  cfg.vision_patch_dim = static_cast<int>(b.meta_int("vision_patch_dim"));
  cfg.wifi_vocab = static_cast<int>(b.meta_int("wifi_vocab"));
  cfg.vision_vocab = static_cast<int>(b.meta_int("vision_vocab"));
  cfg.modality = modality_mode_from(b.meta_at("modality"));
  EncoderParams p = init_encoder(cfg, 0);
  load_params(b, p.params, true);
  if (epoch) *epoch = static_cast<int>(b.meta_int("epoch"));
  if (norm && b.has_array("norm.csi_min")) {
    const Mat& mn = b.array_at("norm.csi_min");
    const Mat& mx = b.array_at("norm.csi_max");
    norm->antennas = static_cast<int>(mn.rows());
    norm->subcarriers = static_cast<int>(mn.cols());
    norm->min_v.resize(static_cast<size_t>(mn.size()));
    norm->max_v.resize(static_cast<size_t>(mx.size()));
    for (int a = 0; a < norm->antennas; ++a)
      for (int k = 0; k < norm->subcarriers; ++k) {
        norm->min_v[static_cast<size_t>(a) * norm->subcarriers + k] = static_cast<float>(mn(a, k));
        norm->max_v[static_cast<size_t>(a) * norm->subcarriers + k] = static_cast<float>(mx(a, k));
      }
  }
  return p;
}

}  // namespace mi2m
