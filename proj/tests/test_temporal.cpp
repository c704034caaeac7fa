#include <doctest.h>

#include "mi2m/temporal.hpp"
#include "test_util.hpp"

using namespace mi2m;
using ad::Mat;

namespace {

TemporalHeadParams tiny_head(int d, int h, int k, uint64_t seed, bool sigmoid = true) {
  TemporalConfig cfg;
  cfg.feature_dim = d;
  cfg.hidden = h;
  cfg.num_classes = k;
  cfg.output_sigmoid = sigmoid;
  return init_temporal_head(cfg, seed);
}

// Direct evaluation of the gate equations, scalar loops only.
Eigen::RowVectorXd gru_step_oracle(const Eigen::RowVectorXd& f, const Eigen::RowVectorXd& s,
                                   const TemporalHeadParams& p) {
  int H = p.cfg.hidden, D = p.cfg.feature_dim;
  auto& ps = p.params;
  Eigen::RowVectorXd out(H);
  for (int j = 0; j < H; ++j) {
    double ar = ps.at("gru.br")(0, j), az = ps.at("gru.bz")(0, j), ah = ps.at("gru.bh")(0, j);
    for (int i = 0; i < D; ++i) {
      ar += f(i) * ps.at("gru.wr")(i, j);
      az += f(i) * ps.at("gru.wz")(i, j);
      ah += f(i) * ps.at("gru.wh")(i, j);
    }
    double ur = 0, uz = 0;
    for (int i = 0; i < H; ++i) {
      ur += s(i) * ps.at("gru.ur")(i, j);
      uz += s(i) * ps.at("gru.uz")(i, j);
    }
    double r_j = 1.0 / (1.0 + std::exp(-(ar + ur)));
    double z_j = 1.0 / (1.0 + std::exp(-(az + uz)));
    (void)r_j;
    (void)z_j;
    out(j) = 0;  // filled below once r over all j is known
  }
  // reset gate needs the full r vector before the candidate state
  Eigen::RowVectorXd r(H), z(H), h(H);
  for (int j = 0; j < H; ++j) {
    double ar = ps.at("gru.br")(0, j), az = ps.at("gru.bz")(0, j);
    for (int i = 0; i < D; ++i) {
      ar += f(i) * ps.at("gru.wr")(i, j);
      az += f(i) * ps.at("gru.wz")(i, j);
    }
    for (int i = 0; i < H; ++i) {
      ar += s(i) * ps.at("gru.ur")(i, j);
      az += s(i) * ps.at("gru.uz")(i, j);
    }
    r(j) = 1.0 / (1.0 + std::exp(-ar));
    z(j) = 1.0 / (1.0 + std::exp(-az));
  }
  for (int j = 0; j < H; ++j) {
    double ah = ps.at("gru.bh")(0, j);
    for (int i = 0; i < D; ++i) ah += f(i) * ps.at("gru.wh")(i, j);
    for (int i = 0; i < H; ++i) ah += r(i) * s(i) * ps.at("gru.uh")(i, j);
    h(j) = std::tanh(ah);
  }
  for (int j = 0; j < H; ++j) out(j) = (1.0 - z(j)) * s(j) + z(j) * h(j);
  return out;
}

}  // namespace

TEST_CASE("gru_step closed forms: zero parameters halve the state; zero state") {
  TemporalHeadParams p = tiny_head(3, 4, 2, 1);
  for (size_t i = 0; i < p.params.count(); ++i) p.params.at(p.params.name_at(i)).setZero();

  Eigen::RowVectorXd f = Eigen::RowVectorXd::Random(3);
  Eigen::RowVectorXd s(4);
  s << 0.8, -0.4, 0.2, 1.0;
  Eigen::RowVectorXd next = gru_step(f, s, p);
  for (int j = 0; j < 4; ++j) CHECK(next(j) == doctest::Approx(s(j) / 2.0).epsilon(1e-15));

  // s_prev = 0 -> s_t = z . h for any parameters
  TemporalHeadParams q = tiny_head(3, 4, 2, 2);
  Eigen::RowVectorXd zero = Eigen::RowVectorXd::Zero(4);
  Eigen::RowVectorXd st = gru_step(f, zero, q);
  auto& ps = q.params;
  Eigen::RowVectorXd z =
      (f * ps.at("gru.wz") + ps.at("gru.bz").row(0)).unaryExpr([](double v) {
        return 1.0 / (1.0 + std::exp(-v));
      });
  Eigen::RowVectorXd h =
      (f * ps.at("gru.wh") + ps.at("gru.bh").row(0)).array().tanh();
  CHECK((st - z.cwiseProduct(h)).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(gru_step(Eigen::RowVectorXd::Zero(5), s, p), ValidationError);
}

TEST_CASE("gru_step and gru_output match the direct-evaluation oracle") {
  Rng rng(33);
  for (int trial = 0; trial < 120; ++trial) {
    int d = 1 + static_cast<int>(rng.below(5));
    int h = 1 + static_cast<int>(rng.below(6));
    TemporalHeadParams p = tiny_head(d, h, 2, 100 + static_cast<uint64_t>(trial));
    Eigen::RowVectorXd f = testutil::random_mat(1, d, rng.next_u64()).row(0);
    Eigen::RowVectorXd s = testutil::random_mat(1, h, rng.next_u64(), 0.5).row(0);
    Eigen::RowVectorXd got = gru_step(f, s, p);
    Eigen::RowVectorXd want = gru_step_oracle(f, s, p);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6);

    // output gate: sigmoid(W_o s + B_o), direct evaluation
    Eigen::RowVectorXd o = gru_output(got, p);
    for (int j = 0; j < h; ++j) {
      double a = p.params.at("gru.bo")(0, j);
      for (int i = 0; i < h; ++i) a += got(i) * p.params.at("gru.wo")(i, j);
      CHECK(o(j) == doctest::Approx(1.0 / (1.0 + std::exp(-a))).epsilon(1e-6));
      CHECK(o(j) > 0.0);
      CHECK(o(j) < 1.0);
    }
  }
}

TEST_CASE("gru_output at zero weights is one half everywhere") {
  TemporalHeadParams p = tiny_head(2, 5, 2, 3);
  p.params.at("gru.wo").setZero();
  p.params.at("gru.bo").setZero();
  Eigen::RowVectorXd o = gru_output(Eigen::RowVectorXd::Random(5), p);
  for (int j = 0; j < 5; ++j) CHECK(o(j) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("classify: zero weights uniform, normalization, shift invariance") {
  TemporalHeadParams p = tiny_head(2, 4, 6, 5);
  p.params.at("cls.w").setZero();
  p.params.at("cls.b").setZero();
  Eigen::RowVectorXd pc = classify(Eigen::RowVectorXd::Random(4), p);
  for (int k = 0; k < 6; ++k) CHECK(pc(k) == doctest::Approx(1.0 / 6).epsilon(1e-9));

  TemporalHeadParams q = tiny_head(2, 4, 6, 6);
  Eigen::RowVectorXd o = Eigen::RowVectorXd::Random(4);
  Eigen::RowVectorXd p1 = classify(o, q);
  CHECK(p1.sum() == doctest::Approx(1.0).epsilon(1e-6));
  // adding a constant to all logits leaves probabilities unchanged
  q.params.at("cls.b").array() += 3.7;
  Eigen::RowVectorXd p2 = classify(o, q);
  CHECK((p1 - p2).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("cross_entropy values: uniform 27 classes, perfect, hand case") {
  Eigen::RowVectorXd uniform = Eigen::RowVectorXd::Constant(27, 1.0 / 27);
  CHECK(cross_entropy(uniform, 13) == doctest::Approx(std::log(27.0)).epsilon(1e-9));
  CHECK(cross_entropy(uniform, 0) == doctest::Approx(3.2958).epsilon(1e-4));

  Eigen::RowVectorXd onehot = Eigen::RowVectorXd::Zero(5);
  onehot(2) = 1.0;
  CHECK(cross_entropy(onehot, 2) == 0.0);

  Eigen::RowVectorXd hand(3);
  hand << 0.7, 0.2, 0.1;
  CHECK(cross_entropy(hand, 0) == doctest::Approx(0.35667).epsilon(1e-4));

  CHECK_THROWS_AS(cross_entropy(hand, 3), ValidationError);
  CHECK_THROWS_AS(cross_entropy(hand, -1), ValidationError);
}

TEST_CASE("state stays bounded: |s_t| <= max(|s_0|, 1) for bounded inputs") {
  Rng rng(44);
  for (int trial = 0; trial < 30; ++trial) {
    TemporalHeadParams p = tiny_head(4, 6, 2, 200 + static_cast<uint64_t>(trial));
    Eigen::RowVectorXd s = testutil::random_mat(1, 6, rng.next_u64(), 0.3).row(0);
    double bound = std::max(s.cwiseAbs().maxCoeff(), 1.0);
    for (int t = 0; t < 20; ++t) {
      Eigen::RowVectorXd f = testutil::random_mat(1, 4, rng.next_u64()).row(0);
      s = gru_step(f, s, p);
      CHECK(s.cwiseAbs().maxCoeff() <= bound + 1e-12);
    }
  }
}

TEST_CASE("classify_sequence agrees with composing the public step ops") {
  TemporalHeadParams p = tiny_head(3, 5, 4, 7);
  Mat seq = testutil::random_mat(8, 3, 90, 0.7);
  Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(5);
  for (int t = 0; t < 8; ++t) s = gru_step(seq.row(t), s, p);
  Eigen::RowVectorXd expect = classify(gru_output(s, p), p);
  Eigen::RowVectorXd got = classify_sequence(seq, p);
  CHECK((expect - got).cwiseAbs().maxCoeff() < 1e-12);

  // the ablation flag bypasses the output sigmoid
  TemporalHeadParams q = tiny_head(3, 5, 4, 7, /*sigmoid=*/false);
  Eigen::RowVectorXd s2 = Eigen::RowVectorXd::Zero(5);
  for (int t = 0; t < 8; ++t) s2 = gru_step(seq.row(t), s2, q);
  Eigen::RowVectorXd lin = s2 * q.params.at("gru.wo") + q.params.at("gru.bo").row(0);
  Eigen::RowVectorXd expect2 = classify(lin, q);
  CHECK((expect2 - classify_sequence(seq, q)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("full temporal head gradients match finite differences") {
  TemporalConfig cfg;
  cfg.feature_dim = 3;
  cfg.hidden = 4;
  cfg.num_classes = 3;
  TemporalHeadParams head = init_temporal_head(cfg, 9);

  std::vector<Mat> step_mats;
  for (int t = 0; t < 3; ++t) step_mats.push_back(testutil::random_mat(2, 3, 300 + t, 0.6));
  std::vector<int> targets = {1, 2};

  auto build = [&](TapeBinding& tb) {
    std::vector<ad::Var> steps;
    for (const Mat& m : step_mats) steps.push_back(tb.constant(m));
    ad::Var logits = temporal_logits_tape(tb, cfg, steps);
    return ad::affine(ad::nll_rows(logits, targets), 0.5, 0.0);
  };
  auto loss_value = [&]() {
    TapeBinding tb(head.params);
    return build(tb).value()(0, 0);
  };
  TapeBinding tb(head.params);
  ad::Var loss = build(tb);
  tb.tape().backward(loss);
  auto grads = tb.collect_grads();
  for (size_t i = 0; i < head.params.count(); ++i) {
    const std::string& name = head.params.name_at(i);
    INFO("parameter ", name);
    testutil::expect_grad_match(loss_value, head.params.at(name), grads.at(name), 1e-4);
  }
}

TEST_CASE("finetune learns a separable toy problem and reports metrics") {
  TemporalConfig cfg;
  cfg.feature_dim = 4;
  cfg.hidden = 8;
  cfg.num_classes = 2;
  TemporalHeadParams head = init_temporal_head(cfg, 77);

  FinetuneData data;
  Rng rng(88);
  for (int i = 0; i < 40; ++i) {
    int label = i % 2;
    Mat seq(4, 4);
    for (int t = 0; t < 4; ++t)
      for (int d = 0; d < 4; ++d)
        seq(t, d) = 0.2 * rng.normal() + (label == 0 ? 1.0 : -1.0) * (d < 2 ? 1.0 : -1.0);
    data.sequences.push_back(seq);
    data.labels.push_back(label);
    data.clip_ids.push_back("toy#" + std::to_string(i));
  }
  FinetuneSchedule sched;
  sched.lr = 5e-3;
  sched.batch = 8;
  sched.epochs = 30;
  sched.seed = 5;
  auto metrics = finetune(data, head, sched);
  REQUIRE(metrics.size() == 30);
  CHECK(metrics.back().loss < metrics.front().loss);
  CHECK(metrics.back().train_acc > 0.9);

  // missing class -> configuration error naming it
  FinetuneData missing = data;
  for (int& l : missing.labels) l = 0;
  TemporalHeadParams head2 = init_temporal_head(cfg, 78);
  CHECK_THROWS_WITH_AS(finetune(missing, head2, sched), doctest::Contains("1"), ConfigError);
}

TEST_CASE("temporal head checkpoints round trip with extra meta") {
  TemporalHeadParams head = tiny_head(3, 4, 5, 42);
  std::string dir = testutil::scratch_dir("head_ckpt");
  std::string path = dir + "/head.ckpt";
  save_temporal_head(head, path, {{"task", "joint"}, {"k_act", "6"}, {"k_subj", "4"}});
  Blob raw;
  TemporalHeadParams back = load_temporal_head(path, &raw);
  CHECK(back.params.equal_values(head.params));
  CHECK(raw.meta_at("task") == "joint");
  std::string path2 = dir + "/head2.ckpt";
  save_temporal_head(back, path2, {{"task", raw.meta_at("task")},
                                   {"k_act", raw.meta_at("k_act")},
                                   {"k_subj", raw.meta_at("k_subj")}});
  CHECK(testutil::read_file(path) == testutil::read_file(path2));
}
