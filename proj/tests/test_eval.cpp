#include <doctest.h>

#include "mi2m/eval.hpp"
#include "mi2m/pipeline.hpp"
#include "test_util.hpp"

using namespace mi2m;

namespace {

// Small prepared dataset + untrained model, enough to drive evaluate().
struct Fixture {
  PreparedDataset data;
  TrainedModel model;
  RunConfig cfg;
};

Fixture make_fixture(const std::string& name, const std::string& task = "activity") {
  Fixture fx;
  fx.cfg.synth_activities = 2;
  fx.cfg.synth_subjects = 2;
  fx.cfg.synth_clips_per_pair = 1;
  fx.cfg.synth_frames_per_clip = 20;
  fx.cfg.synth_subcarriers = 12;
  fx.cfg.synth_packets = 10;
  fx.cfg.synth_antennas = 2;
  fx.cfg.synth_channels = 1;
  fx.cfg.synth_height = 8;
  fx.cfg.synth_width = 8;
  fx.cfg.geom_csi_rows = 6;
  fx.cfg.geom_csi_cols = 5;
  fx.cfg.geom_image_rows = 4;
  fx.cfg.geom_image_cols = 4;
  fx.cfg.enc_layers = 1;
  fx.cfg.enc_dim = 8;
  fx.cfg.enc_heads = 2;
  fx.cfg.tok_codebook_size = 8;
  fx.cfg.ft_seq_len = 4;
  fx.cfg.ft_gru_hidden = 6;
  fx.cfg.ft_task = task;
  fx.cfg.seed = 5;
  std::string root = testutil::scratch_dir(name);
  generate_synthetic(fx.cfg.synth_config(), root);
  fx.data = prepare_dataset(root + "/manifest.mi2m", fx.cfg);

  EncoderConfig ec = encoder_config_for(fx.cfg, fx.data.manifest.shapes);
  fx.model.encoder = init_encoder(ec, 31);
  TemporalConfig tc;
  tc.feature_dim = ec.dim;
  tc.hidden = fx.cfg.ft_gru_hidden;
  tc.num_classes = task_class_count(task, 2, 2);
  fx.model.head = init_temporal_head(tc, 32);
  fx.model.geometry = fx.cfg.geometry();
  fx.model.norm = fx.data.norm;
  fx.model.seq_len = fx.cfg.ft_seq_len;
  fx.model.task = task;
  fx.model.k_act = 2;
  fx.model.k_subj = 2;
  return fx;
}

}  // namespace

TEST_CASE("accuracy_report: constant predictor on a balanced set scores 1/K") {
  std::vector<int> labels, constant, perfect;
  for (int i = 0; i < 60; ++i) {
    labels.push_back(i % 6);
    constant.push_back(0);
    perfect.push_back(i % 6);
  }
  EvalReport r = accuracy_report(constant, labels, 6);
  CHECK(r.overall_accuracy == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(r.per_class_tp[0] == 1.0);
  for (int k = 1; k < 6; ++k) CHECK(r.per_class_tp[static_cast<size_t>(k)] == 0.0);

  EvalReport p = accuracy_report(perfect, labels, 6);
  CHECK(p.overall_accuracy == 1.0);
  for (double v : p.per_class_tp) CHECK(v == 1.0);
  CHECK(p.correct == p.total);
}

TEST_CASE("uniform random predictor converges to 1/K within 3-sigma binomial bounds") {
  const int K = 5, N = 4000;
  Rng rng(321);
  std::vector<int> labels, pred;
  for (int i = 0; i < N; ++i) {
    labels.push_back(i % K);
    pred.push_back(static_cast<int>(rng.below(K)));
  }
  EvalReport r = accuracy_report(pred, labels, K);
  double p = 1.0 / K;
  double sigma = std::sqrt(p * (1 - p) / N);
  CHECK(std::abs(r.overall_accuracy - p) < 3.0 * sigma);
}

TEST_CASE("evaluate: deterministic, never mutates the model, checks protocol ids") {
  Fixture fx = make_fixture("eval_basic");
  auto windows = test_windows(fx.data, fx.cfg.ft_seq_len);
  REQUIRE(windows.size() >= 4);

  ParamStore enc_before = fx.model.encoder.params;
  ParamStore head_before = fx.model.head.params;
  EvalReport a = evaluate(fx.model, fx.data.manifest, windows, EvalCondition::normal, 3.0);
  EvalReport b = evaluate(fx.model, fx.data.manifest, windows, EvalCondition::normal, 3.0);
  CHECK(a.overall_accuracy == b.overall_accuracy);
  CHECK(a.total == static_cast<long long>(windows.size()));
  CHECK(fx.model.encoder.params.equal_values(enc_before));
  CHECK(fx.model.head.params.equal_values(head_before));
  CHECK(a.correct == static_cast<long long>(a.overall_accuracy * a.total + 0.5));

  // overlap between finetune and test clip ids is a protocol violation
  fx.model.finetune_clip_ids.push_back(windows[0].clip_id);
  CHECK_THROWS_WITH_AS(
      evaluate(fx.model, fx.data.manifest, windows, EvalCondition::normal, 3.0),
      doctest::Contains("protocol violation"), ValidationError);
}

TEST_CASE("dark condition touches only the vision modality") {
  Fixture fx = make_fixture("eval_dark");
  // a wifi-only model ignores images entirely, so darkening cannot move it
  fx.cfg.enc_modality = "wifi";
  EncoderConfig ec = encoder_config_for(fx.cfg, fx.data.manifest.shapes);
  fx.model.encoder = init_encoder(ec, 41);
  auto windows = test_windows(fx.data, fx.cfg.ft_seq_len);
  EvalReport normal = evaluate(fx.model, fx.data.manifest, windows, EvalCondition::normal, 3.0);
  EvalReport dark = evaluate(fx.model, fx.data.manifest, windows, EvalCondition::dark, 3.0);
  CHECK(normal.overall_accuracy == dark.overall_accuracy);
  CHECK(normal.correct == dark.correct);
  CHECK(dark.condition == "dark(gamma=3)");
}

TEST_CASE("joint task encodes activity and subject into one label space") {
  CHECK(task_label("activity", 3, 1, 4) == 3);
  CHECK(task_label("joint", 3, 1, 4) == 13);
  CHECK(task_class_count("activity", 6, 22) == 6);
  CHECK(task_class_count("joint", 6, 22) == 132);
  Fixture fx = make_fixture("eval_joint", "joint");
  auto windows = test_windows(fx.data, fx.cfg.ft_seq_len);
  EvalReport r = evaluate(fx.model, fx.data.manifest, windows, EvalCondition::normal, 3.0);
  CHECK(r.per_class_tp.size() == 4);  // 2 activities x 2 subjects
}

TEST_CASE("report rendering carries the record fields and the table:") {
  EvalReport r;
  r.task = "activity";
  r.condition = "normal";
  r.pretrain_dataset = "envA-seed1";
  r.finetune_dataset = "envA-seed1";
  r.seeds = {1, 2, 3};
  r.per_class_tp = {0.9674, 0.9411, 0.9365};
  r.per_class_count = {31, 31, 30};
  r.correct = 88;
  r.total = 92;
  r.overall_accuracy = 88.0 / 92.0;
  std::string rec = render_report_record(r);
  CHECK(rec.find("[report]") != std::string::npos);
  CHECK(rec.find("seeds=1,2,3") != std::string::npos);
  CHECK(rec.find("class0.tp_rate=0.9674") != std::string::npos);
  CHECK(rec.find("overall_accuracy=") != std::string::npos);
  std::string tbl = render_report_table(r);
  CHECK(tbl.find("Average") != std::string::npos);
  CHECK(tbl.find("96.74") != std::string::npos);
  CHECK(tbl.find("95.65") != std::string::npos);  // 88/92
}

TEST_CASE("mean_report averages accuracies and pools seeds") {
  EvalReport a, b;
  a.task = b.task = "activity";
  a.per_class_tp = {1.0, 0.5};
  b.per_class_tp = {0.5, 0.0};
  a.per_class_count = {2, 2};
  b.per_class_count = {2, 2};
  a.overall_accuracy = 0.75;
  b.overall_accuracy = 0.25;
  a.correct = 3;
  b.correct = 1;
  a.total = b.total = 4;
  a.seeds = {1};
  b.seeds = {2};
  EvalReport m = mean_report({a, b});
  CHECK(m.overall_accuracy == doctest::Approx(0.5));
  CHECK(m.per_class_tp[0] == doctest::Approx(0.75));
  CHECK(m.seeds == std::vector<uint64_t>{1, 2});
  CHECK(m.total == 8);
}
