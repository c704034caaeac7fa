#pragma once

#include <string>
#include <vector>

#include "mi2m/common.hpp"
#include "mi2m/dataset.hpp"
#include "mi2m/encoder.hpp"
#include "mi2m/tokenizer.hpp"

namespace mi2m {

// Flat dotted-key run configuration. Defaults mirror the reference
// hyperparameter set (codebook 8192, mask ratio 0.4, pretrain lr 5e-4 /
// batch 128 / 80 epochs, finetune lr 4e-4 / batch 32 / 10 epochs, sequence
// length 8); everything is overridable from file or command line.
struct RunConfig {
  std::string dataset_path;

  // synth
  int synth_activities = 6;
  int synth_subjects = 4;
  int synth_clips_per_pair = 2;
  int synth_frames_per_clip = 120;
  int synth_antennas = 3;
  int synth_subcarriers = 114;
  int synth_packets = 10;
  int synth_channels = 3;
  int synth_height = 224;
  int synth_width = 224;
  double synth_noise_sigma = 0.05;
  double synth_csi_noise_sigma = 0.05;
  std::string synth_environment = "envA";
  double synth_background = 0.35;
  double synth_env_base_freq = 3.0;
  double synth_env_base_phase = 0.0;
  double synth_frame_rate = 100.0;

  double split_pretrain_fraction = 0.8;

  // geometry
  int geom_csi_rows = 6, geom_csi_cols = 5;
  int geom_image_rows = 16, geom_image_cols = 16;

  // tokenizer
  int tok_codebook_size = 8192;
  int tok_hidden = 64;
  double tok_lr = 5e-4;
  int tok_steps = 300;
  int tok_batch = 128;
  double tok_tau_start = 1.0;
  double tok_tau_end = 0.0625;
  double tok_usage_weight = 0.05;
  int tok_max_patches = 20000;

  // encoder
  int enc_layers = 6;
  int enc_dim = 384;
  int enc_heads = 6;
  double enc_alpha = 0.4;
  double enc_lr = 5e-4;
  int enc_batch = 128;
  int enc_epochs = 80;
  std::string enc_modality = "both";

  // finetune
  double ft_lr = 4e-4;
  int ft_batch = 32;
  int ft_epochs = 10;
  int ft_seq_len = 8;
  double ft_budget_seconds = 60.0;
  bool ft_freeze = true;
  std::string ft_task = "activity";  // activity | joint
  int ft_gru_hidden = 256;
  bool ft_output_sigmoid = true;

  // eval / protocol
  std::string eval_condition = "normal";  // normal | dark
  double eval_gamma = 3.0;
  std::string eval_seeds = "1,2,3";
  std::string protocol_pretrain_data;  // manifest path; empty = plain eval
  std::string protocol_finetune_data;

  std::string output_dir;  // empty = $MI2M_HOME or ./mi2m_out
  uint64_t seed = 1;

  DatasetShapes synth_shapes() const {
    return DatasetShapes{synth_antennas, synth_subcarriers, synth_packets,
                         synth_channels, synth_height, synth_width};
  }
  SyntheticConfig synth_config() const;
  PatchGeometry geometry() const {
    return PatchGeometry{geom_csi_rows, geom_csi_cols, geom_image_rows, geom_image_cols};
  }
  std::vector<uint64_t> seeds_list() const;
  std::string resolved_output_dir() const;
};

// key=value lines, '#' comments allowed; unknown keys are errors (fail-fast).
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key_equals_value);

// Canonical serialization: fixed key order, shortest round-trip numbers.
std::string serialize_config(const RunConfig& cfg);
void save_config_file(const RunConfig& cfg, const std::string& path);

// Range/consistency checks that need no data access.
void validate_config(const RunConfig& cfg);

}  // namespace mi2m
