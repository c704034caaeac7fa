#include "mi2m/tokenizer.hpp"

#include <cmath>

namespace mi2m {

using ad::IndexMap;
using ad::Mat;
using ad::Var;

void PatchGeometry::validate(const DatasetShapes& s) const {
  auto check = [](int dim, int patch, const char* what) {
    if (patch <= 0) throw ValidationError(std::string("patch size must be positive for ") + what);
    if (dim % patch != 0)
      throw ValidationError(std::string("patch geometry does not divide ") + what + ": " +
                            std::to_string(dim) + " % " + std::to_string(patch) + " != 0");
  };
  check(s.subcarriers, csi_rows, "csi subcarriers");
  check(s.packets, csi_cols, "csi packets");
  check(s.height, image_rows, "image height");
  check(s.width, image_cols, "image width");
}

Mat patchify(const Tensor3f& t, int patch_rows, int patch_cols) {
  if (patch_rows <= 0 || patch_cols <= 0 || t.d1 % patch_rows != 0 || t.d2 % patch_cols != 0)
    throw ValidationError("patchify: patch (" + std::to_string(patch_rows) + "," +
                          std::to_string(patch_cols) + ") does not divide tensor (" +
                          std::to_string(t.d1) + "," + std::to_string(t.d2) + ")");
  int gr = t.d1 / patch_rows, gc = t.d2 / patch_cols;
  Mat out(gr * gc, t.d0 * patch_rows * patch_cols);
  for (int gy = 0; gy < gr; ++gy)
    for (int gx = 0; gx < gc; ++gx) {
      int p = gy * gc + gx;
      for (int c = 0; c < t.d0; ++c)
        for (int y = 0; y < patch_rows; ++y)
          for (int x = 0; x < patch_cols; ++x)
            out(p, (c * patch_rows + y) * patch_cols + x) =
                t.at(c, gy * patch_rows + y, gx * patch_cols + x);
    }
  return out;
}

Tensor3f unpatchify(const Mat& patches, int d0, int d1, int d2, int patch_rows, int patch_cols) {
  if (d1 % patch_rows != 0 || d2 % patch_cols != 0)
    throw ValidationError("unpatchify: patch dims do not divide target shape");
  int gr = d1 / patch_rows, gc = d2 / patch_cols;
  if (patches.rows() != gr * gc || patches.cols() != d0 * patch_rows * patch_cols)
    throw ValidationError("unpatchify: patch matrix shape does not match target");
  Tensor3f t(d0, d1, d2);
  for (int gy = 0; gy < gr; ++gy)
    for (int gx = 0; gx < gc; ++gx) {
      int p = gy * gc + gx;
      for (int c = 0; c < d0; ++c)
        for (int y = 0; y < patch_rows; ++y)
          for (int x = 0; x < patch_cols; ++x)
            t.at(c, gy * patch_rows + y, gx * patch_cols + x) =
                static_cast<float>(patches(p, (c * patch_rows + y) * patch_cols + x));
    }
  return t;
}

Eigen::VectorXd gumbel_softmax_sample(const Eigen::VectorXd& logits, double tau,
                                      uint64_t noise_seed, bool hard) {
  if (tau <= 0) throw std::invalid_argument("gumbel_softmax_sample: tau must be > 0");
  if (!logits.allFinite()) throw NumericError("gumbel_softmax_sample: non-finite logits");
  Rng rng(noise_seed);
  Eigen::VectorXd u(logits.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = (logits(i) + rng.gumbel()) / tau;
  double m = u.maxCoeff();
  Eigen::ArrayXd e = (u.array() - m).exp();
  Eigen::VectorXd y = (e / e.sum()).matrix();
  if (hard) {
    Eigen::Index arg = 0;
    y.maxCoeff(&arg);
    y.setZero();
    y(arg) = 1.0;
  }
  return y;
}

const char* modality_name(Modality m) { return m == Modality::wifi ? "wifi" : "vision"; }

namespace {

// im2col index map for input laid out as a (channels, h*w) matrix with
// column index y*w + x; output columns follow the same convention.
IndexMap build_im2col(int channels, int h, int w, int k, int stride, int pad, int* out_h,
                      int* out_w) {
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  IndexMap map;
  map.rows = channels * k * k;
  map.cols = oh * ow;
  map.idx.assign(static_cast<size_t>(map.rows) * map.cols, -1);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      int col = oy * ow + ox;
      for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            int y = oy * stride - pad + ky;
            int x = ox * stride - pad + kx;
            if (y < 0 || y >= h || x < 0 || x >= w) continue;
            int row = (c * k + ky) * k + kx;
            // source matrix is (channels, h*w); col-major flat index
            map.at(row, col) = static_cast<int64_t>(y * w + x) * channels + c;
          }
    }
  *out_h = oh;
  *out_w = ow;
  return map;
}

// Nearest 2x upsample of a (channels, mh*mw) matrix followed by a crop to
// (h, w), expressed as a flat gather.
IndexMap build_upsample_crop(int channels, int mh, int mw, int h, int w) {
  IndexMap map;
  map.rows = channels;
  map.cols = h * w;
  map.idx.assign(static_cast<size_t>(map.rows) * map.cols, -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sy = std::min(y / 2, mh - 1);
      int sx = std::min(x / 2, mw - 1);
      for (int c = 0; c < channels; ++c)
        map.at(c, y * w + x) = static_cast<int64_t>(sy * mw + sx) * channels + c;
    }
  return map;
}

struct TokenizerPlans {
  IndexMap enc_im2col;    // (C*9, mid) over the patch
  IndexMap dec_upsample;  // (hidden, patch positions)
  IndexMap dec_im2col;    // (hidden*9, patch positions)
  int mid_h = 0, mid_w = 0;
};

TokenizerPlans build_plans(const TokenizerConfig& cfg) {
  TokenizerPlans p;
  p.enc_im2col = build_im2col(cfg.channels, cfg.patch_rows, cfg.patch_cols, 3, 2, 1, &p.mid_h,
                              &p.mid_w);
  if (p.mid_h != cfg.mid_rows() || p.mid_w != cfg.mid_cols())
    throw ValidationError("tokenizer: unexpected mid feature size");
  p.dec_upsample = build_upsample_crop(cfg.hidden, p.mid_h, p.mid_w, cfg.patch_rows,
                                       cfg.patch_cols);
  int h = 0, w = 0;
  p.dec_im2col = build_im2col(cfg.hidden, cfg.patch_rows, cfg.patch_cols, 3, 1, 1, &h, &w);
  return p;
}

// Reinterprets one flattened patch row (channels x rows x cols, row-major)
// as the (channels, positions) matrix the conv plans expect.
Mat patch_row_to_image(const TokenizerConfig& cfg, const Eigen::RowVectorXd& row) {
  Mat img(cfg.channels, cfg.patch_rows * cfg.patch_cols);
  for (int c = 0; c < cfg.channels; ++c)
    for (int y = 0; y < cfg.patch_rows; ++y)
      for (int x = 0; x < cfg.patch_cols; ++x)
        img(c, y * cfg.patch_cols + x) = row((c * cfg.patch_rows + y) * cfg.patch_cols + x);
  return img;
}

Eigen::RowVectorXd image_to_patch_row(const TokenizerConfig& cfg, const Mat& img) {
  Eigen::RowVectorXd row(cfg.patch_dim());
  for (int c = 0; c < cfg.channels; ++c)
    for (int y = 0; y < cfg.patch_rows; ++y)
      for (int x = 0; x < cfg.patch_cols; ++x)
        row((c * cfg.patch_rows + y) * cfg.patch_cols + x) = img(c, y * cfg.patch_cols + x);
  return row;
}

Mat gather_plain(const Mat& x, const IndexMap& map) {
  Mat y(map.rows, map.cols);
  for (int c = 0; c < map.cols; ++c)
    for (int r = 0; r < map.rows; ++r) {
      int64_t k = map.at(r, c);
      y(r, c) = k < 0 ? 0.0 : x.data()[k];
    }
  return y;
}

}  // namespace

TokenizerParams init_tokenizer(const TokenizerConfig& cfg, uint64_t seed) {
  if (cfg.codebook_size < 2) throw ValidationError("tokenizer: codebook size must be >= 2");
  if (cfg.hidden < 1) throw ValidationError("tokenizer: hidden width must be >= 1");
  TokenizerParams p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, "tokenizer-init", static_cast<uint64_t>(cfg.modality)));
  int f = cfg.mid_features();
  p.params.create_normal("enc.conv1.w", cfg.hidden, cfg.channels * 9,
                         std::sqrt(2.0 / (cfg.channels * 9)), rng);
  p.params.create("enc.conv1.b", cfg.hidden, 1);
  p.params.create_normal("enc.fc.w", f, cfg.codebook_size, std::sqrt(2.0 / f), rng);
  p.params.create("enc.fc.b", 1, cfg.codebook_size);
  p.params.create_normal("dec.fc.w", cfg.codebook_size, f, 0.02, rng);
  p.params.create("dec.fc.b", 1, f);
  p.params.create_normal("dec.conv.w", cfg.channels, cfg.hidden * 9,
                         std::sqrt(2.0 / (cfg.hidden * 9)), rng);
  p.params.create("dec.conv.b", cfg.channels, 1);
  return p;
}

namespace {

// Encoder logits for a batch of patches on a tape. Returns the (B, |V|)
// logits var.
Var encoder_logits_tape(TapeBinding& tb, const TokenizerParams& tp, const TokenizerPlans& plans,
                        const Mat& batch) {
  std::vector<Var> feats;
  feats.reserve(static_cast<size_t>(batch.rows()));
  Var w1 = tb.use("enc.conv1.w");
  Var b1 = tb.use("enc.conv1.b");
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    Var img = tb.constant(patch_row_to_image(tp.cfg, batch.row(i)));
    Var cols = ad::gather_flat(img, plans.enc_im2col);
    Var e1 = ad::relu(ad::add_colvec(ad::matmul(w1, cols), b1));
    feats.push_back(ad::reshape(e1, 1, tp.cfg.mid_features()));
  }
  Var e = ad::concat_rows(feats);
  return ad::add_rowvec(ad::matmul(e, tb.use("enc.fc.w")), tb.use("enc.fc.b"));
}

Var decoder_recon_tape(TapeBinding& tb, const TokenizerParams& tp, const TokenizerPlans& plans,
                       Var codes /* (B, |V|) */, std::vector<Var>* recon_rows) {
  Var d = ad::relu(ad::add_rowvec(ad::matmul(codes, tb.use("dec.fc.w")), tb.use("dec.fc.b")));
  Var wc = tb.use("dec.conv.w");
  Var bc = tb.use("dec.conv.b");
  std::vector<Var> recons;
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    Var di = ad::reshape(ad::slice_rows(d, static_cast<int>(i), 1), tp.cfg.hidden,
                         plans.mid_h * plans.mid_w);
    Var up = ad::gather_flat(di, plans.dec_upsample);
    Var cols = ad::gather_flat(up, plans.dec_im2col);
    Var rec = ad::add_colvec(ad::matmul(wc, cols), bc);
    recons.push_back(rec);
  }
  if (recon_rows) *recon_rows = recons;
  return recons.empty() ? Var{} : recons[0];
}

}  // namespace

Var tokenizer_batch_loss_tape(TapeBinding& tb, const TokenizerParams& params, const Mat& batch,
                              const Mat& noise, double tau, bool hard, double usage_weight) {
  if (batch.cols() != params.cfg.patch_dim())
    throw ValidationError("tokenizer batch: patch dim " + std::to_string(batch.cols()) +
                          " != configured " + std::to_string(params.cfg.patch_dim()));
  TokenizerPlans plans = build_plans(params.cfg);
  Var logits = encoder_logits_tape(tb, params, plans, batch);
  Var codes = ad::gumbel_softmax_rows(logits, noise, tau, hard);
  std::vector<Var> recons;
  decoder_recon_tape(tb, params, plans, codes, &recons);
  std::vector<Var> losses;
  losses.reserve(recons.size());
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    Var target = tb.constant(patch_row_to_image(params.cfg, batch.row(i)));
    Var diff = ad::sub(recons[static_cast<size_t>(i)], target);
    losses.push_back(ad::sum_all(ad::mul(diff, diff)));
  }
  Var total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
  Var loss = ad::affine(total, 1.0 / (static_cast<double>(batch.rows()) * params.cfg.patch_dim()),
                        0.0);
  if (usage_weight > 0.0) {
    // log|V| - H(batch-mean noise-free code distribution); zero when the
    // assignment spreads uniformly over the codebook
    Var soft = ad::softmax_rows(ad::affine(logits, 1.0 / tau, 0.0));
    Var mean_code = ad::mean_rows(soft);
    Var neg_entropy = ad::sum_all(ad::mul(mean_code, ad::log_(mean_code)));
    Var penalty = ad::affine(neg_entropy, usage_weight,
                             usage_weight * std::log(static_cast<double>(params.cfg.codebook_size)));
    loss = ad::add(loss, penalty);
  }
  return loss;
}

std::vector<double> train_tokenizer(const Mat& patches, TokenizerParams& params,
                                    const TokenizerSchedule& schedule) {
  if (patches.rows() == 0) throw std::invalid_argument("train_tokenizer: empty patch stream");
  if (patches.cols() != params.cfg.patch_dim())
    throw ValidationError("train_tokenizer: patch dim " + std::to_string(patches.cols()) +
                          " != configured " + std::to_string(params.cfg.patch_dim()));
  if (schedule.steps < 1) throw std::invalid_argument("train_tokenizer: steps must be >= 1");
  AdamConfig adam;
  adam.lr = schedule.lr;
  Rng pick(derive_seed(schedule.seed, "tok-batch", static_cast<uint64_t>(params.cfg.modality)));
  Rng gnoise(derive_seed(schedule.seed, "tok-gumbel", static_cast<uint64_t>(params.cfg.modality)));
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(schedule.steps));
  const int batch = std::min<int>(schedule.batch, static_cast<int>(patches.rows()));
  for (int step = 0; step < schedule.steps; ++step) {
    double frac = schedule.steps > 1 ? static_cast<double>(step) / (schedule.steps - 1) : 0.0;
    params.tau = schedule.tau_start * std::pow(schedule.tau_end / schedule.tau_start, frac);
    bool hard = step >= (2 * schedule.steps) / 3;

    Mat b(batch, patches.cols());
    for (int i = 0; i < batch; ++i)
      b.row(i) = patches.row(static_cast<Eigen::Index>(pick.below(patches.rows())));
    Mat noise(batch, params.cfg.codebook_size);
    for (Eigen::Index c = 0; c < noise.cols(); ++c)
      for (Eigen::Index r = 0; r < noise.rows(); ++r) noise(r, c) = gnoise.gumbel();

    TapeBinding tb(params.params);
    Var loss = tokenizer_batch_loss_tape(tb, params, b, noise, params.tau, hard,
                                         schedule.usage_weight);
    double lv = loss.value()(0, 0);
    if (!std::isfinite(lv)) throw NumericError("train_tokenizer: non-finite loss at step " +
                                               std::to_string(step));
    tb.tape().backward(loss);
    params.params.adam_step(tb.collect_grads(), adam);
    trace.push_back(lv);
    ++params.steps_done;
  }
  return trace;
}

Eigen::VectorXd tokenizer_logits(const TokenizerParams& params, const Eigen::RowVectorXd& patch) {
  TokenizerPlans plans = build_plans(params.cfg);
  Mat img = patch_row_to_image(params.cfg, patch);
  Mat cols = gather_plain(img, plans.enc_im2col);
  Mat e1 = ((params.params.at("enc.conv1.w") * cols).colwise() +
            Eigen::VectorXd(params.params.at("enc.conv1.b").col(0)))
               .cwiseMax(0.0);
  Eigen::Map<const Eigen::VectorXd> flat(e1.data(), e1.size());
  return params.params.at("enc.fc.w").transpose() * flat +
         params.params.at("enc.fc.b").row(0).transpose();
}

TokenGrid tokenize_patches(const Mat& patches, const TokenizerParams& params) {
  if (patches.cols() != params.cfg.patch_dim())
    throw ValidationError("tokenize: patch dim mismatch (" + std::to_string(patches.cols()) +
                          " vs " + std::to_string(params.cfg.patch_dim()) + ")");
  TokenGrid grid;
  grid.modality = params.cfg.modality;
  grid.tokens.reserve(static_cast<size_t>(patches.rows()));
  for (Eigen::Index i = 0; i < patches.rows(); ++i) {
    Eigen::VectorXd logits = tokenizer_logits(params, patches.row(i));
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    grid.tokens.push_back(static_cast<int>(arg));
  }
  return grid;
}

TokenGrid tokenize(const Tensor3f& frame_tensor, const TokenizerParams& params,
                   const PatchGeometry& geometry) {
  int pr = params.cfg.modality == Modality::wifi ? geometry.csi_rows : geometry.image_rows;
  int pc = params.cfg.modality == Modality::wifi ? geometry.csi_cols : geometry.image_cols;
  if (pr != params.cfg.patch_rows || pc != params.cfg.patch_cols)
    throw ValidationError("tokenize: geometry does not match tokenizer configuration");
  if (frame_tensor.d0 != params.cfg.channels)
    throw ValidationError("tokenize: channel count mismatch");
  return tokenize_patches(patchify(frame_tensor, pr, pc), params);
}

ad::Mat decode_tokens(const TokenGrid& tokens, const TokenizerParams& params) {
  TokenizerPlans plans = build_plans(params.cfg);
  const int n = static_cast<int>(tokens.tokens.size());
  Mat out(n, params.cfg.patch_dim());
  const Mat& wfc = params.params.at("dec.fc.w");
  const Eigen::RowVectorXd bfc = params.params.at("dec.fc.b").row(0);
  const Mat& wc = params.params.at("dec.conv.w");
  const Eigen::VectorXd bc = params.params.at("dec.conv.b").col(0);
  for (int i = 0; i < n; ++i) {
    int tok = tokens.tokens[static_cast<size_t>(i)];
    if (tok < 0 || tok >= params.cfg.codebook_size)
      throw ValidationError("detokenize: token " + std::to_string(tok) + " outside [0, " +
                            std::to_string(params.cfg.codebook_size) + ")");
    Eigen::RowVectorXd d = (wfc.row(tok) + bfc).cwiseMax(0.0);
    Eigen::Map<const Mat> di(d.data(), params.cfg.hidden, plans.mid_h * plans.mid_w);
    Mat up = gather_plain(di, plans.dec_upsample);
    Mat cols = gather_plain(up, plans.dec_im2col);
    Mat rec = (wc * cols).colwise() + bc;
    out.row(i) = image_to_patch_row(params.cfg, rec);
  }
  return out;
}

Tensor3f detokenize(const TokenGrid& tokens, const TokenizerParams& params,
                    const PatchGeometry& geometry, const DatasetShapes& shapes) {
  bool wifi = params.cfg.modality == Modality::wifi;
  int expected = wifi ? geometry.n_wifi(shapes) : geometry.n_vision(shapes);
  if (static_cast<int>(tokens.tokens.size()) != expected)
    throw ValidationError("detokenize: token count " + std::to_string(tokens.tokens.size()) +
                          " != expected " + std::to_string(expected));
  Mat patches = decode_tokens(tokens, params);
  if (wifi)
    return unpatchify(patches, shapes.antennas, shapes.subcarriers, shapes.packets,
                      geometry.csi_rows, geometry.csi_cols);
  return unpatchify(patches, shapes.channels, shapes.height, shapes.width, geometry.image_rows,
                    geometry.image_cols);
}

void save_tokenizer(const TokenizerParams& params, const std::string& path,
                    const CsiNormalizer* norm) {
  Blob b;
  b.magic = "MI2MTOK1";
  b.set_meta("modality", modality_name(params.cfg.modality));
  b.set_meta("channels", fmt_int(params.cfg.channels));
  b.set_meta("patch_rows", fmt_int(params.cfg.patch_rows));
  b.set_meta("patch_cols", fmt_int(params.cfg.patch_cols));
  b.set_meta("codebook_size", fmt_int(params.cfg.codebook_size));
  b.set_meta("hidden", fmt_int(params.cfg.hidden));
  b.set_meta("tau", fmt_double(params.tau));
  b.set_meta("steps_done", fmt_int(params.steps_done));
  store_params(b, params.params);
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

TokenizerParams load_tokenizer(const std::string& path, CsiNormalizer* norm) {
  Blob b = Blob::load(path, "MI2MTOK1");
  TokenizerConfig cfg;
  cfg.modality = b.meta_at("modality") == "wifi" ? Modality::wifi : Modality::vision;
  cfg.channels = static_cast<int>(b.meta_int("channels"));
  cfg.patch_rows = static_cast<int>(b.meta_int("patch_rows"));
  cfg.patch_cols = static_cast<int>(b.meta_int("patch_cols"));
  cfg.codebook_size = static_cast<int>(b.meta_int("codebook_size"));
  cfg.hidden = static_cast<int>(b.meta_int("hidden"));
  TokenizerParams p = init_tokenizer(cfg, 0);
  load_params(b, p.params, false);
  p.tau = b.meta_double("tau");
  p.steps_done = b.meta_int("steps_done");
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

ad::Mat sample_patch_pool(const std::vector<Mat>& frame_patches, int max_patches, uint64_t seed) {
  if (frame_patches.empty()) throw std::invalid_argument("sample_patch_pool: no frames");
  long long total = 0;
  for (const Mat& m : frame_patches) total += m.rows();
  if (total == 0) throw std::invalid_argument("sample_patch_pool: no patches");
  Rng rng(derive_seed(seed, "patch-pool"));
  int n = static_cast<int>(std::min<long long>(max_patches, total));
  Mat out(n, frame_patches[0].cols());
  for (int i = 0; i < n; ++i) {
    long long k = static_cast<long long>(rng.below(static_cast<uint64_t>(total)));
    for (const Mat& m : frame_patches) {
      if (k < m.rows()) {
        out.row(i) = m.row(static_cast<Eigen::Index>(k));
        break;
      }
      k -= m.rows();
    }
  }
  return out;
}

}  // namespace mi2m
