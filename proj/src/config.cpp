#include "mi2m/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace mi2m {

namespace {

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("not a boolean: '" + s + "' (use true/false)");
}

#define STR_FIELD(key, member)                                        \
  Field{key, [](const RunConfig& c) { return c.member; },             \
        [](RunConfig& c, const std::string& v) { c.member = v; }}
#define INT_FIELD(key, member)                                                 \
  Field{key, [](const RunConfig& c) { return fmt_int(c.member); },             \
        [](RunConfig& c, const std::string& v) { c.member = static_cast<int>(parse_int(v)); }}
#define U64_FIELD(key, member)                                                 \
  Field{key, [](const RunConfig& c) { return fmt_int(static_cast<long long>(c.member)); }, \
        [](RunConfig& c, const std::string& v) { c.member = static_cast<uint64_t>(parse_int(v)); }}
#define DBL_FIELD(key, member)                                                 \
  Field{key, [](const RunConfig& c) { return fmt_double(c.member); },          \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(v); }}
#define BOOL_FIELD(key, member)                                                \
  Field{key, [](const RunConfig& c) { return fmt_bool(c.member); },            \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      STR_FIELD("dataset.path", dataset_path),
      DBL_FIELD("encoder.alpha", enc_alpha),
      INT_FIELD("encoder.batch", enc_batch),
      INT_FIELD("encoder.dim", enc_dim),
      INT_FIELD("encoder.epochs", enc_epochs),
      INT_FIELD("encoder.heads", enc_heads),
      INT_FIELD("encoder.layers", enc_layers),
      DBL_FIELD("encoder.lr", enc_lr),
      STR_FIELD("encoder.modality", enc_modality),
      STR_FIELD("eval.condition", eval_condition),
      DBL_FIELD("eval.gamma", eval_gamma),
      STR_FIELD("eval.seeds", eval_seeds),
      INT_FIELD("finetune.batch", ft_batch),
      DBL_FIELD("finetune.budget_seconds", ft_budget_seconds),
      INT_FIELD("finetune.epochs", ft_epochs),
      BOOL_FIELD("finetune.freeze", ft_freeze),
      INT_FIELD("finetune.gru_hidden", ft_gru_hidden),
      DBL_FIELD("finetune.lr", ft_lr),
      BOOL_FIELD("finetune.output_sigmoid", ft_output_sigmoid),
      INT_FIELD("finetune.seq_len", ft_seq_len),
      STR_FIELD("finetune.task", ft_task),
      INT_FIELD("geometry.csi_patch_cols", geom_csi_cols),
      INT_FIELD("geometry.csi_patch_rows", geom_csi_rows),
      INT_FIELD("geometry.image_patch_cols", geom_image_cols),
      INT_FIELD("geometry.image_patch_rows", geom_image_rows),
      STR_FIELD("output.dir", output_dir),
      STR_FIELD("protocol.finetune_data", protocol_finetune_data),
      STR_FIELD("protocol.pretrain_data", protocol_pretrain_data),
      U64_FIELD("seed", seed),
      DBL_FIELD("split.pretrain_fraction", split_pretrain_fraction),
      INT_FIELD("synth.activities", synth_activities),
      INT_FIELD("synth.antennas", synth_antennas),
      DBL_FIELD("synth.background", synth_background),
      INT_FIELD("synth.channels", synth_channels),
      INT_FIELD("synth.clips_per_pair", synth_clips_per_pair),
      DBL_FIELD("synth.csi_noise_sigma", synth_csi_noise_sigma),
      DBL_FIELD("synth.env_base_freq", synth_env_base_freq),
      DBL_FIELD("synth.env_base_phase", synth_env_base_phase),
      STR_FIELD("synth.environment", synth_environment),
      DBL_FIELD("synth.frame_rate", synth_frame_rate),
      INT_FIELD("synth.frames_per_clip", synth_frames_per_clip),
      INT_FIELD("synth.height", synth_height),
      DBL_FIELD("synth.noise_sigma", synth_noise_sigma),
      INT_FIELD("synth.packets", synth_packets),
      INT_FIELD("synth.subcarriers", synth_subcarriers),
      INT_FIELD("synth.subjects", synth_subjects),
      INT_FIELD("synth.width", synth_width),
      INT_FIELD("tokenizer.batch", tok_batch),
      INT_FIELD("tokenizer.codebook_size", tok_codebook_size),
      INT_FIELD("tokenizer.hidden", tok_hidden),
      DBL_FIELD("tokenizer.lr", tok_lr),
      INT_FIELD("tokenizer.max_patches", tok_max_patches),
      INT_FIELD("tokenizer.steps", tok_steps),
      DBL_FIELD("tokenizer.tau_end", tok_tau_end),
      DBL_FIELD("tokenizer.tau_start", tok_tau_start),
      DBL_FIELD("tokenizer.usage_weight", tok_usage_weight),
  };
  return f;
}

#undef STR_FIELD
#undef INT_FIELD
#undef U64_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const Field& f : fields())
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

SyntheticConfig RunConfig::synth_config() const {
  SyntheticConfig s;
  s.num_activities = synth_activities;
  s.num_subjects = synth_subjects;
  s.clips_per_pair = synth_clips_per_pair;
  s.frames_per_clip = synth_frames_per_clip;
  s.shapes = synth_shapes();
  s.noise_sigma = synth_noise_sigma;
  s.csi_noise_sigma = synth_csi_noise_sigma;
  s.seed = seed;
  s.environment_id = synth_environment;
  s.background_level = synth_background;
  s.env_base_freq = synth_env_base_freq;
  s.env_base_phase = synth_env_base_phase;
  s.frame_rate = synth_frame_rate;
  return s;
}

std::vector<uint64_t> RunConfig::seeds_list() const {
  std::vector<uint64_t> out;
  for (const std::string& part : split(eval_seeds, ',')) {
    std::string t = trim(part);
    if (t.empty()) continue;
    out.push_back(static_cast<uint64_t>(parse_int(t)));
  }
  if (out.empty()) throw ConfigError("eval.seeds must list at least one seed");
  return out;
}

std::string RunConfig::resolved_output_dir() const {
  if (!output_dir.empty()) return output_dir;
  if (const char* home = std::getenv("MI2M_HOME"); home && *home) return home;
  return "./mi2m_out";
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        t + "'");
    set_key(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing config file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& kv) {
  size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value, got '" + kv + "'");
  set_key(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += '=';
    out += f.get(cfg);
    out += '\n';
  }
  return out;
}

void save_config_file(const RunConfig& cfg, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config file: " + path);
  os << serialize_config(cfg);
  if (!os) throw IoError("write failed: " + path);
}

void validate_config(const RunConfig& cfg) {
  auto positive = [](long long v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(cfg.synth_activities, "synth.activities");
  positive(cfg.synth_subjects, "synth.subjects");
  positive(cfg.synth_clips_per_pair, "synth.clips_per_pair");
  positive(cfg.synth_frames_per_clip, "synth.frames_per_clip");
  positive(cfg.synth_antennas, "synth.antennas");
  positive(cfg.synth_subcarriers, "synth.subcarriers");
  positive(cfg.synth_packets, "synth.packets");
  positive(cfg.synth_channels, "synth.channels");
  positive(cfg.synth_height, "synth.height");
  positive(cfg.synth_width, "synth.width");
  if (cfg.synth_noise_sigma < 0 || cfg.synth_csi_noise_sigma < 0)
    throw ConfigError("synth noise sigma must be >= 0");
  if (cfg.synth_frame_rate <= 0) throw ConfigError("synth.frame_rate must be positive");
  if (!(cfg.split_pretrain_fraction > 0.0 && cfg.split_pretrain_fraction < 1.0))
    throw ConfigError("split.pretrain_fraction must lie in (0, 1)");
  positive(cfg.geom_csi_rows, "geometry.csi_patch_rows");
  positive(cfg.geom_csi_cols, "geometry.csi_patch_cols");
  positive(cfg.geom_image_rows, "geometry.image_patch_rows");
  positive(cfg.geom_image_cols, "geometry.image_patch_cols");
  if (cfg.tok_codebook_size < 2) throw ConfigError("tokenizer.codebook_size must be >= 2");
  positive(cfg.tok_hidden, "tokenizer.hidden");
  positive(cfg.tok_steps, "tokenizer.steps");
  positive(cfg.tok_batch, "tokenizer.batch");
  positive(cfg.tok_max_patches, "tokenizer.max_patches");
  if (cfg.tok_lr <= 0 || cfg.enc_lr <= 0 || cfg.ft_lr <= 0)
    throw ConfigError("learning rates must be positive");
  if (cfg.tok_tau_start <= 0 || cfg.tok_tau_end <= 0)
    throw ConfigError("tokenizer temperatures must be positive");
  if (cfg.tok_usage_weight < 0) throw ConfigError("tokenizer.usage_weight must be >= 0");
  if (cfg.enc_layers < 0) throw ConfigError("encoder.layers must be >= 0");
  positive(cfg.enc_dim, "encoder.dim");
  positive(cfg.enc_heads, "encoder.heads");
  if (cfg.enc_dim % cfg.enc_heads != 0)
    throw ConfigError("encoder.heads must divide encoder.dim");
  if (!(cfg.enc_alpha > 0.0 && cfg.enc_alpha < 1.0))
    throw ConfigError("encoder.alpha must lie in (0, 1)");
  positive(cfg.enc_batch, "encoder.batch");
  positive(cfg.enc_epochs, "encoder.epochs");
  modality_mode_from(cfg.enc_modality);  // throws on bad value
  positive(cfg.ft_batch, "finetune.batch");
  positive(cfg.ft_epochs, "finetune.epochs");
  positive(cfg.ft_seq_len, "finetune.seq_len");
  positive(cfg.ft_gru_hidden, "finetune.gru_hidden");
  if (cfg.ft_budget_seconds <= 0) throw ConfigError("finetune.budget_seconds must be positive");
  if (cfg.ft_task != "activity" && cfg.ft_task != "joint")
    throw ConfigError("finetune.task must be 'activity' or 'joint'");
  if (cfg.eval_condition != "normal" && cfg.eval_condition != "dark")
    throw ConfigError("eval.condition must be 'normal' or 'dark'");
  if (cfg.eval_gamma <= 0) throw ConfigError("eval.gamma must be positive");
  cfg.seeds_list();  // throws when malformed
}

}  // namespace mi2m
