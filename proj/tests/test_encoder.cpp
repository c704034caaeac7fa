#include <doctest.h>

#include <set>

#include "mi2m/encoder.hpp"
#include "test_util.hpp"

using namespace mi2m;
using ad::Mat;

namespace {

// Independent direct-arithmetic attention reference: per query row, explicit
// exponential weights over keys. Deliberately written without matrix algebra.
Mat attention_oracle(const Mat& q, const Mat& k, const Mat& v, int d_k) {
  Mat out(q.rows(), v.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<double> scores(static_cast<size_t>(k.rows()));
    double maxs = -1e300;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      double dot = 0;
      for (Eigen::Index d = 0; d < q.cols(); ++d) dot += q(i, d) * k(j, d);
      scores[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(d_k));
      maxs = std::max(maxs, scores[static_cast<size_t>(j)]);
    }
    double z = 0;
    for (double& s : scores) {
      s = std::exp(s - maxs);
      z += s;
    }
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      double acc = 0;
      for (Eigen::Index j = 0; j < k.rows(); ++j)
        acc += scores[static_cast<size_t>(j)] / z * v(j, c);
      out(i, c) = acc;
    }
  }
  return out;
}

EncoderConfig tiny_encoder_cfg() {
  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.n_wifi = 2;
  cfg.n_vision = 2;
  cfg.wifi_patch_dim = 5;
  cfg.vision_patch_dim = 7;
  cfg.wifi_vocab = 6;
  cfg.vision_vocab = 9;
  return cfg;
}

FramePatches tiny_patches(uint64_t seed, const EncoderConfig& cfg) {
  FramePatches fp;
  if (cfg.wifi_active()) fp.wifi = testutil::random_mat(cfg.n_wifi, cfg.wifi_patch_dim, seed, 0.5);
  if (cfg.vision_active())
    fp.vision = testutil::random_mat(cfg.n_vision, cfg.vision_patch_dim, seed + 1, 0.5);
  return fp;
}

}  // namespace

TEST_CASE("mask plan counts follow the ceiling rule and are deterministic") {
  MaskPlan p = plan_mask(38, 196, 0.4, 7);
  CHECK(p.wifi.size() == 16);    // ceil(15.2)
  CHECK(p.vision.size() == 79);  // ceil(78.4)

  MaskPlan q = plan_mask(38, 196, 0.4, 7);
  CHECK(p.wifi == q.wifi);
  CHECK(p.vision == q.vision);

  MaskPlan tinyp = plan_mask(38, 196, 0.01, 3);
  CHECK(tinyp.wifi.size() == 1);  // ceiling keeps at least one masked position
  CHECK(tinyp.vision.size() == 2);

  CHECK_THROWS_AS(plan_mask(10, 10, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(plan_mask(10, 10, 1.0, 1), std::invalid_argument);
}

TEST_CASE("mask plan invariants over 1000 random tuples") {
  Rng rng(515);
  for (int trial = 0; trial < 1000; ++trial) {
    int nw = 1 + static_cast<int>(rng.below(64));
    int nv = 1 + static_cast<int>(rng.below(256));
    double alpha = 0.01 + 0.98 * rng.uniform();
    uint64_t seed = rng.next_u64();
    MaskPlan p = plan_mask(nw, nv, alpha, seed);
    CHECK(p.wifi.size() == static_cast<size_t>(std::ceil(alpha * nw)));
    CHECK(p.vision.size() == static_cast<size_t>(std::ceil(alpha * nv)));
    std::set<int> sw(p.wifi.begin(), p.wifi.end());
    CHECK(sw.size() == p.wifi.size());
    if (!p.wifi.empty()) {
      CHECK(*p.wifi.begin() >= 0);
      CHECK(p.wifi.back() < nw);
    }
    std::set<int> sv(p.vision.begin(), p.vision.end());
    CHECK(sv.size() == p.vision.size());
    if (!p.vision.empty()) {
      CHECK(*p.vision.begin() >= 0);
      CHECK(p.vision.back() < nv);
    }
  }
}

TEST_CASE("attention: single key returns the value row, twin keys average") {
  Mat q = testutil::random_mat(1, 4, 1);
  Mat k = testutil::random_mat(1, 4, 2);
  Mat v = testutil::random_mat(1, 6, 3);
  Mat out = attention(q, k, v, 4);
  CHECK((out - v).cwiseAbs().maxCoeff() < 1e-15);

  Mat k2(2, 4), v2(2, 6);
  k2.row(0) = k.row(0);
  k2.row(1) = k.row(0);
  v2 = testutil::random_mat(2, 6, 4);
  Mat out2 = attention(q, k2, v2, 4);
  Mat mean = 0.5 * (v2.row(0) + v2.row(1));
  CHECK((out2 - mean).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(attention(q, testutil::random_mat(2, 3, 5), v2, 3), ValidationError);
  CHECK_THROWS_AS(attention(q, k2, testutil::random_mat(3, 6, 6), 4), ValidationError);
}

TEST_CASE("attention matches the direct-arithmetic oracle on random instances") {
  Rng rng(606);
  for (int trial = 0; trial < 120; ++trial) {
    int nq = 1 + static_cast<int>(rng.below(6));
    int nk = 1 + static_cast<int>(rng.below(6));
    int dk = 1 + static_cast<int>(rng.below(8));
    int dv = 1 + static_cast<int>(rng.below(8));
    Mat q = testutil::random_mat(nq, dk, rng.next_u64());
    Mat k = testutil::random_mat(nk, dk, rng.next_u64());
    Mat v = testutil::random_mat(nk, dv, rng.next_u64());
    Mat got = attention(q, k, v, dk);
    Mat want = attention_oracle(q, k, v, dk);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("attention rows sum to one and co-permuting keys/values changes nothing") {
  Rng rng(707);
  Mat q = testutil::random_mat(3, 4, 70);
  Mat k = testutil::random_mat(5, 4, 71);
  Mat v = testutil::random_mat(5, 2, 72);
  // row-sum property via constant values: attention(q,k,1) = 1
  Mat ones = Mat::Ones(5, 1);
  Mat out = attention(q, k, ones, 4);
  for (int r = 0; r < 3; ++r) CHECK(out(r, 0) == doctest::Approx(1.0).epsilon(1e-12));
  // permutation symmetry
  std::vector<int> perm = {4, 2, 0, 1, 3};
  Mat kp(5, 4), vp(5, 2);
  for (int i = 0; i < 5; ++i) {
    kp.row(i) = k.row(perm[static_cast<size_t>(i)]);
    vp.row(i) = v.row(perm[static_cast<size_t>(i)]);
  }
  CHECK((attention(q, k, v, 4) - attention(q, kp, vp, 4)).cwiseAbs().maxCoeff() < 1e-12);
  (void)rng;
}

TEST_CASE("embed_and_corrupt: length preserved, empty plan untouched, mask shared") {
  EncoderConfig cfg = tiny_encoder_cfg();
  EncoderParams enc = init_encoder(cfg, 11);
  FramePatches fp = tiny_patches(21, cfg);

  MaskPlan empty;
  CorruptedSample clean = embed_and_corrupt(fp, empty, enc);
  CHECK(clean.embedded.rows() == cfg.seq_len());
  CHECK(clean.embedded.cols() == cfg.dim);

  MaskPlan plan;
  plan.wifi = {1};
  plan.vision = {0};
  CorruptedSample corrupted = embed_and_corrupt(fp, plan, enc);
  CHECK(corrupted.embedded.rows() == cfg.seq_len());  // masking replaces, never removes

  // unmasked rows bit-identical to the uncorrupted path
  for (int i : {0, 3})
    CHECK(corrupted.embedded.row(i) == clean.embedded.row(i));
  // masked rows differ
  CHECK(corrupted.embedded.row(1) != clean.embedded.row(1));
  CHECK(corrupted.embedded.row(2) != clean.embedded.row(2));

  // the mask embedding is shared: subtracting the index-determined terms
  // (positional + modality type) leaves the same vector everywhere
  const auto& ps = enc.params;
  Eigen::RowVectorXd at_wifi = corrupted.embedded.row(1) - ps.at("embed.pos").row(1) -
                               ps.at("embed.type.wifi").row(0);
  Eigen::RowVectorXd at_vision = corrupted.embedded.row(2) - ps.at("embed.pos").row(2) -
                                 ps.at("embed.type.vision").row(0);
  CHECK((at_wifi - ps.at("embed.mask").row(0)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((at_vision - ps.at("embed.mask").row(0)).cwiseAbs().maxCoeff() < 1e-12);

  // two frames, same plan: embeddings differ only where raw patches differ
  FramePatches fp2 = fp;
  fp2.wifi.row(0) = testutil::random_mat(1, cfg.wifi_patch_dim, 77, 0.5);
  CorruptedSample c2 = embed_and_corrupt(fp2, plan, enc);
  CHECK(c2.embedded.row(0) != corrupted.embedded.row(0));
  for (int i = 1; i < cfg.seq_len(); ++i) CHECK(c2.embedded.row(i) == corrupted.embedded.row(i));

  MaskPlan bad;
  bad.wifi = {5};  // out of range
  CHECK_THROWS_AS(embed_and_corrupt(fp, bad, enc), ValidationError);
}

TEST_CASE("encode: shape contract and the L=0 final-normalization identity") {
  EncoderConfig cfg = tiny_encoder_cfg();
  EncoderParams enc = init_encoder(cfg, 13);
  FramePatches fp = tiny_patches(31, cfg);
  CorruptedSample s = embed_and_corrupt(fp, plan_mask(2, 2, 0.4, 5), enc);
  Mat h = encode(s, enc);
  CHECK(h.rows() == cfg.seq_len());
  CHECK(h.cols() == cfg.dim);

  EncoderConfig c0 = cfg;
  c0.layers = 0;
  EncoderParams enc0 = init_encoder(c0, 13);
  CorruptedSample s0 = embed_and_corrupt(fp, MaskPlan{}, enc0);
  Mat h0 = encode(s0, enc0);
  // with an empty stack the output is the embedded input after the final norm
  Mat manual(s0.embedded.rows(), s0.embedded.cols());
  for (Eigen::Index r = 0; r < manual.rows(); ++r) {
    double mu = s0.embedded.row(r).mean();
    double var = (s0.embedded.row(r).array() - mu).square().mean();
    manual.row(r) = ((s0.embedded.row(r).array() - mu) / std::sqrt(var + 1e-5)).matrix();
  }
  CHECK((h0 - manual).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tape and plain encoder forwards agree") {
  EncoderConfig cfg = tiny_encoder_cfg();
  cfg.layers = 2;
  EncoderParams enc = init_encoder(cfg, 17);
  FramePatches fp = tiny_patches(41, cfg);
  MaskPlan plan = plan_mask(cfg.n_wifi, cfg.n_vision, 0.5, 3);

  CorruptedSample s = embed_and_corrupt(fp, plan, enc);
  Mat plain = encode(s, enc);

  TapeBinding tb(enc.params);
  ad::Var x = embed_and_corrupt_tape(tb, enc, fp, plan);
  CHECK((x.value() - s.embedded).cwiseAbs().maxCoeff() < 1e-14);
  ad::Var h = encode_sequence_tape(tb, enc, x);
  CHECK((h.value() - plain).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("predict_tokens: zero head gives uniform rows of the codebook width") {
  EncoderConfig cfg = tiny_encoder_cfg();
  EncoderParams enc = init_encoder(cfg, 19);
  enc.params.at("head.wifi.w").setZero();
  enc.params.at("head.wifi.b").setZero();
  enc.params.at("head.vision.w").setZero();
  enc.params.at("head.vision.b").setZero();
  FramePatches fp = tiny_patches(51, cfg);
  MaskPlan plan = plan_mask(cfg.n_wifi, cfg.n_vision, 0.5, 9);
  Mat h = encode(embed_and_corrupt(fp, plan, enc), enc);
  MaskedPredictions pred = predict_tokens(h, enc, plan);
  REQUIRE(pred.wifi.rows() == static_cast<Eigen::Index>(plan.wifi.size()));
  CHECK(pred.wifi.cols() == cfg.wifi_vocab);
  CHECK(pred.vision.cols() == cfg.vision_vocab);
  for (Eigen::Index r = 0; r < pred.wifi.rows(); ++r) {
    CHECK(pred.wifi.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(pred.wifi.row(r).maxCoeff() == doctest::Approx(1.0 / cfg.wifi_vocab).epsilon(1e-9));
  }
  for (Eigen::Index r = 0; r < pred.vision.rows(); ++r)
    CHECK(pred.vision.row(r).minCoeff() == doctest::Approx(1.0 / cfg.vision_vocab).epsilon(1e-9));
}

TEST_CASE("mi2m_loss: uniform entropy, perfect predictions, hand-built case") {
  // uniform over 8192 -> ln(8192)
  MaskedPredictions uni;
  uni.wifi = Mat::Constant(3, 8192, 1.0 / 8192);
  uni.vision = Mat::Constant(2, 8192, 1.0 / 8192);
  double lu = mi2m_loss(uni, {0, 5, 17}, {2, 9});
  CHECK(lu == doctest::Approx(std::log(8192.0)).epsilon(1e-9));
  CHECK(lu == doctest::Approx(9.0109).epsilon(1e-4));

  // perfect one-hot predictions -> exactly zero
  MaskedPredictions perfect;
  perfect.wifi = Mat::Zero(2, 4);
  perfect.wifi(0, 1) = 1.0;
  perfect.wifi(1, 3) = 1.0;
  perfect.vision = Mat(0, 4);
  CHECK(mi2m_loss(perfect, {1, 3}, {}) == 0.0);

  // 3-position case against independent direct arithmetic
  MaskedPredictions hand;
  hand.wifi = Mat(1, 3);
  hand.wifi << 0.2, 0.5, 0.3;
  hand.vision = Mat(2, 3);
  hand.vision << 0.1, 0.6, 0.3, 0.25, 0.25, 0.5;
  double expected = -(std::log(0.5) + std::log(0.1) + std::log(0.5)) / 3.0;
  CHECK(mi2m_loss(hand, {1}, {0, 2}) == doctest::Approx(expected).epsilon(1e-12));

  // target outside the codebook
  CHECK_THROWS_AS(mi2m_loss(hand, {3}, {0, 2}), ValidationError);
  // unmasked positions contribute exactly zero: no masked rows -> loss 0
  MaskedPredictions none;
  CHECK(mi2m_loss(none, {}, {}) == 0.0);
}

TEST_CASE("encoder stack gradient check on a tiny configuration") {
  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.n_wifi = 2;
  cfg.n_vision = 2;
  cfg.wifi_patch_dim = 3;
  cfg.vision_patch_dim = 4;
  cfg.wifi_vocab = 5;
  cfg.vision_vocab = 5;
  EncoderParams enc = init_encoder(cfg, 23);
  FramePatches fp;
  fp.wifi = testutil::random_mat(2, 3, 61, 0.5);
  fp.vision = testutil::random_mat(2, 4, 62, 0.5);
  MaskPlan plan;
  plan.wifi = {0};
  plan.vision = {1};
  plan.alpha = 0.4;
  std::vector<int> wifi_targets = {3};
  std::vector<int> vision_targets = {1};

  auto build = [&](TapeBinding& tb) {
    ad::Var x = embed_and_corrupt_tape(tb, enc, fp, plan);
    ad::Var h = encode_sequence_tape(tb, enc, x);
    ad::Var wrows = ad::gather_rows(h, {0});
    ad::Var vrows = ad::gather_rows(h, {cfg.n_wifi + 1});
    ad::Var lw = ad::nll_rows(
        ad::add_rowvec(ad::matmul(wrows, tb.use("head.wifi.w")), tb.use("head.wifi.b")),
        wifi_targets);
    ad::Var lv = ad::nll_rows(
        ad::add_rowvec(ad::matmul(vrows, tb.use("head.vision.w")), tb.use("head.vision.b")),
        vision_targets);
    return ad::affine(ad::add(lw, lv), 0.5, 0.0);
  };
  auto loss_value = [&]() {
    TapeBinding tb(enc.params);
    return build(tb).value()(0, 0);
  };
  TapeBinding tb(enc.params);
  ad::Var loss = build(tb);
  tb.tape().backward(loss);
  auto grads = tb.collect_grads();

  // every parameter of the stack, embeddings through heads
  for (size_t i = 0; i < enc.params.count(); ++i) {
    const std::string& name = enc.params.name_at(i);
    if (!grads.count(name)) continue;
    INFO("parameter ", name);
    testutil::expect_grad_match(loss_value, enc.params.at(name), grads.at(name), 1e-4);
  }
}

TEST_CASE("wifi-only and vision-only modality modes restrict the sequence") {
  EncoderConfig cfg = tiny_encoder_cfg();
  cfg.modality = ModalityMode::vision_only;
  EncoderParams enc = init_encoder(cfg, 29);
  CHECK(enc.cfg.seq_len() == cfg.n_vision);
  CHECK_FALSE(enc.params.has("embed.wifi.w"));
  FramePatches fp;
  fp.vision = testutil::random_mat(cfg.n_vision, cfg.vision_patch_dim, 63, 0.5);
  MaskPlan plan = plan_mask(0, cfg.n_vision, 0.4, 3);
  CHECK(plan.wifi.empty());
  CorruptedSample s = embed_and_corrupt(fp, plan, enc);
  CHECK(s.embedded.rows() == cfg.n_vision);
  Mat h = encode(s, enc);
  CHECK(h.rows() == cfg.n_vision);
}
