#include <doctest.h>

#include "mi2m/checkpoint.hpp"
#include "mi2m/config.hpp"
#include "test_util.hpp"

using namespace mi2m;

TEST_CASE("defaults carry the reference hyperparameters") {
  RunConfig cfg;
  CHECK(cfg.tok_codebook_size == 8192);
  CHECK(cfg.enc_alpha == 0.4);
  CHECK(cfg.enc_lr == 5e-4);
  CHECK(cfg.enc_batch == 128);
  CHECK(cfg.enc_epochs == 80);
  CHECK(cfg.ft_lr == 4e-4);
  CHECK(cfg.ft_batch == 32);
  CHECK(cfg.ft_epochs == 10);
  CHECK(cfg.ft_seq_len == 8);
  CHECK(cfg.ft_budget_seconds == 60.0);
  CHECK(cfg.eval_gamma == 3.0);
  // reference input shapes
  CHECK(cfg.synth_shapes() == DatasetShapes{3, 114, 10, 3, 224, 224});
  // default patch geometry: 38 CSI patches, 196 image patches
  CHECK(cfg.geometry().n_wifi(cfg.synth_shapes()) == 38);
  CHECK(cfg.geometry().n_vision(cfg.synth_shapes()) == 196);
  validate_config(cfg);
}

TEST_CASE("config round trips: parse -> serialize -> parse is identity") {
  RunConfig cfg;
  cfg.dataset_path = "/tmp/data/manifest.mi2m";
  cfg.enc_layers = 2;
  cfg.enc_dim = 64;
  cfg.ft_task = "joint";
  cfg.eval_seeds = "4,5,6";
  cfg.seed = 99;
  cfg.synth_noise_sigma = 0.125;
  std::string text = serialize_config(cfg);
  RunConfig back = parse_config_text(text);
  CHECK(serialize_config(back) == text);

  // file write -> read -> write is byte-identical
  std::string dir = testutil::scratch_dir("config_rt");
  save_config_file(cfg, dir + "/a.mi2m");
  RunConfig loaded = load_config_file(dir + "/a.mi2m");
  save_config_file(loaded, dir + "/b.mi2m");
  CHECK(testutil::read_file(dir + "/a.mi2m") == testutil::read_file(dir + "/b.mi2m"));
}

TEST_CASE("overrides apply dotted keys and reject unknown ones") {
  RunConfig cfg;
  apply_override(cfg, "encoder.layers=3");
  apply_override(cfg, "finetune.freeze=false");
  apply_override(cfg, "tokenizer.tau_end=0.125");
  CHECK(cfg.enc_layers == 3);
  CHECK(cfg.ft_freeze == false);
  CHECK(cfg.tok_tau_end == 0.125);
  CHECK_THROWS_AS(apply_override(cfg, "encoder.depth=3"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "no-equals-sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "encoder.layers=abc"), ValidationError);
}

TEST_CASE("comments and blank lines parse; malformed lines fail") {
  RunConfig cfg = parse_config_text("# a comment\n\nseed=17\nencoder.dim=48\n");
  CHECK(cfg.seed == 17);
  CHECK(cfg.enc_dim == 48);
  CHECK_THROWS_AS(parse_config_text("seed 17\n"), ConfigError);
}

TEST_CASE("validation is fail-fast on out-of-range values") {
  RunConfig cfg;
  cfg.enc_alpha = 1.5;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.enc_heads = 5;  // does not divide 384
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.split_pretrain_fraction = 1.0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.ft_task = "segmentation";
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.eval_seeds = "";
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.eval_gamma = -1;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
}

TEST_CASE("seeds list parses comma separated values") {
  RunConfig cfg;
  cfg.eval_seeds = "1, 2,3";
  auto s = cfg.seeds_list();
  CHECK(s == std::vector<uint64_t>{1, 2, 3});
}

TEST_CASE("checkpoint blob round trips byte-identically through load/save") {
  Blob b;
  b.magic = "MI2MENC1";
  b.set_meta("layers", "2");
  b.set_meta("dim", "64");
  b.add_array("w", testutil::random_mat(3, 5, 1));
  b.add_array("b", testutil::random_mat(1, 5, 2));
  std::string dir = testutil::scratch_dir("blob_rt");
  b.save(dir + "/a.ckpt");
  Blob back = Blob::load(dir + "/a.ckpt", "MI2MENC1");
  back.save(dir + "/b.ckpt");
  CHECK(testutil::read_file(dir + "/a.ckpt") == testutil::read_file(dir + "/b.ckpt"));

  CHECK_THROWS_AS(Blob::load(dir + "/a.ckpt", "MI2MTOK1"), ValidationError);
  CHECK_THROWS_AS(Blob::load(dir + "/missing.ckpt", "MI2MENC1"), IoError);
}

TEST_CASE("seed derivation separates component streams deterministically") {
  CHECK(derive_seed(1, "tokenizer") == derive_seed(1, "tokenizer"));
  CHECK(derive_seed(1, "tokenizer") != derive_seed(1, "encoder"));
  CHECK(derive_seed(1, "tokenizer") != derive_seed(2, "tokenizer"));
  CHECK(derive_seed(1, "mask", 3, 4) != derive_seed(1, "mask", 4, 3));
}
