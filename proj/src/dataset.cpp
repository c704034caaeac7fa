#include "mi2m/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

namespace mi2m {

namespace {

constexpr char kClipMagic[9] = "MI2MCLP1";
constexpr uint32_t kClipVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
  char b[4];
  if (!is.read(b, 4)) throw IoError("truncated clip file: " + path);
  uint32_t v;
  std::memcpy(&v, b, 4);
  return v;
}

void write_floats(std::ostream& os, const std::vector<float>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(sizeof(float) * v.size()));
}

void read_floats(std::istream& is, std::vector<float>& v, const std::string& path) {
  if (!is.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(sizeof(float) * v.size())))
    throw IoError("truncated clip file: " + path);
}

}  // namespace

void save_clip(const std::string& path, const std::vector<MultimodalFrame>& frames,
               const DatasetShapes& shapes, int activity, int subject) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open clip for writing: " + path);
  os.write(kClipMagic, 8);
  write_u32(os, kClipVersion);
  write_u32(os, static_cast<uint32_t>(shapes.antennas));
  write_u32(os, static_cast<uint32_t>(shapes.subcarriers));
  write_u32(os, static_cast<uint32_t>(shapes.packets));
  write_u32(os, static_cast<uint32_t>(shapes.channels));
  write_u32(os, static_cast<uint32_t>(shapes.height));
  write_u32(os, static_cast<uint32_t>(shapes.width));
  write_u32(os, static_cast<uint32_t>(activity));
  write_u32(os, static_cast<uint32_t>(subject));
  write_u32(os, static_cast<uint32_t>(frames.size()));
  for (const auto& f : frames) {
    if (!f.csi.same_shape(shapes.antennas, shapes.subcarriers, shapes.packets) ||
        !f.image.same_shape(shapes.channels, shapes.height, shapes.width))
      throw ValidationError("save_clip: frame shape differs from declared shapes");
    write_floats(os, f.csi.data);
    write_floats(os, f.image.data);
  }
  if (!os) throw IoError("write failed: " + path);
}

LoadedClip load_clip(const std::string& path, const DatasetShapes& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing clip file: " + path);
  char magic[8];
  if (!is.read(magic, 8)) throw IoError("truncated clip file: " + path);
  if (std::memcmp(magic, kClipMagic, 8) != 0)
    throw ValidationError("bad clip magic in " + path);
  if (read_u32(is, path) != kClipVersion)
    throw ValidationError("unsupported clip version in " + path);
  DatasetShapes s;
  s.antennas = static_cast<int>(read_u32(is, path));
  s.subcarriers = static_cast<int>(read_u32(is, path));
  s.packets = static_cast<int>(read_u32(is, path));
  s.channels = static_cast<int>(read_u32(is, path));
  s.height = static_cast<int>(read_u32(is, path));
  s.width = static_cast<int>(read_u32(is, path));
  if (!(s == expected))
    throw ValidationError(
        "clip " + path + " shape mismatch: declared (" + std::to_string(expected.antennas) +
        "," + std::to_string(expected.subcarriers) + "," + std::to_string(expected.packets) +
        "," + std::to_string(expected.channels) + "," + std::to_string(expected.height) + "," +
        std::to_string(expected.width) + "), found (" + std::to_string(s.antennas) + "," +
        std::to_string(s.subcarriers) + "," + std::to_string(s.packets) + "," +
        std::to_string(s.channels) + "," + std::to_string(s.height) + "," +
        std::to_string(s.width) + ")");
  LoadedClip out;
  out.activity = static_cast<int>(read_u32(is, path));
  out.subject = static_cast<int>(read_u32(is, path));
  uint32_t t = read_u32(is, path);
  out.frames.resize(t);
  for (uint32_t i = 0; i < t; ++i) {
    MultimodalFrame& f = out.frames[i];
    f.csi = Tensor3f(s.antennas, s.subcarriers, s.packets);
    f.image = Tensor3f(s.channels, s.height, s.width);
    f.timestamp_index = i;
    read_floats(is, f.csi.data, path);
    read_floats(is, f.image.data, path);
  }
  return out;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  if (m.frame_rate_ratio != m.shapes.packets)
    throw ValidationError("manifest: frame_rate_ratio must equal packets per frame");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open manifest for writing: " + path);
  os << "mi2m-manifest 1\n";
  os << "dataset_id=" << m.dataset_id << "\n";
  os << "csi_antennas=" << m.shapes.antennas << "\n";
  os << "csi_subcarriers=" << m.shapes.subcarriers << "\n";
  os << "csi_packets=" << m.shapes.packets << "\n";
  os << "image_channels=" << m.shapes.channels << "\n";
  os << "image_height=" << m.shapes.height << "\n";
  os << "image_width=" << m.shapes.width << "\n";
  os << "num_activities=" << m.num_activities << "\n";
  os << "num_subjects=" << m.num_subjects << "\n";
  os << "frame_rate_ratio=" << m.frame_rate_ratio << "\n";
  os << "frame_rate=" << fmt_double(m.frame_rate) << "\n";
  os << "split_seed=" << m.split_seed << "\n";
  for (const auto& c : m.clips)
    os << "clip=" << c.path << "|" << c.activity_label << "|" << c.subject_label << "|"
       << c.environment_id << "\n";
  if (!os) throw IoError("write failed: " + path);
}

DatasetManifest load_dataset(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("missing manifest file: " + manifest_path);
  std::string line;
  if (!std::getline(is, line) || trim(line) != "mi2m-manifest 1")
    throw ValidationError("not a mi2m manifest: " + manifest_path);
  DatasetManifest m;
  m.root_path = std::filesystem::path(manifest_path).parent_path().string();
  if (m.root_path.empty()) m.root_path = ".";
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ValidationError("manifest " + manifest_path + ": bad line '" + t + "'");
    std::string key = t.substr(0, eq);
    std::string val = t.substr(eq + 1);
    if (key == "clip") {
      auto parts = split(val, '|');
      if (parts.size() != 4)
        throw ValidationError("manifest " + manifest_path + ": bad clip entry '" + val + "'");
      ClipDescriptor d;
      d.path = parts[0];
      d.activity_label = static_cast<int>(parse_int(parts[1]));
      d.subject_label = static_cast<int>(parse_int(parts[2]));
      d.environment_id = parts[3];
      m.clips.push_back(std::move(d));
    } else {
      kv[key] = val;
    }
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end())
      throw ValidationError("manifest " + manifest_path + ": missing key '" + key + "'");
    return it->second;
  };
  m.dataset_id = need("dataset_id");
  m.shapes.antennas = static_cast<int>(parse_int(need("csi_antennas")));
  m.shapes.subcarriers = static_cast<int>(parse_int(need("csi_subcarriers")));
  m.shapes.packets = static_cast<int>(parse_int(need("csi_packets")));
  m.shapes.channels = static_cast<int>(parse_int(need("image_channels")));
  m.shapes.height = static_cast<int>(parse_int(need("image_height")));
  m.shapes.width = static_cast<int>(parse_int(need("image_width")));
  m.num_activities = static_cast<int>(parse_int(need("num_activities")));
  m.num_subjects = static_cast<int>(parse_int(need("num_subjects")));
  m.frame_rate_ratio = static_cast<int>(parse_int(need("frame_rate_ratio")));
  m.frame_rate = parse_double(need("frame_rate"));
  m.split_seed = parse_int(need("split_seed"));
  if (m.shapes.antennas <= 0 || m.shapes.subcarriers <= 0 || m.shapes.packets <= 0 ||
      m.shapes.channels <= 0 || m.shapes.height <= 0 || m.shapes.width <= 0)
    throw ValidationError("manifest " + manifest_path + ": shapes must be positive");
  if (m.num_activities <= 0 || m.num_subjects <= 0)
    throw ValidationError("manifest " + manifest_path + ": class counts must be positive");
  if (m.frame_rate_ratio != m.shapes.packets)
    throw ValidationError("manifest " + manifest_path +
                          ": frame_rate_ratio must equal csi_packets");
  return m;
}

std::vector<MultimodalFrame> load_clip_frames(const DatasetManifest& m, size_t clip_index) {
  const ClipDescriptor& d = m.clips.at(clip_index);
  LoadedClip c = load_clip(m.root_path + "/" + d.path, m.shapes);
  if (c.activity != d.activity_label || c.subject != d.subject_label)
    throw ValidationError("clip " + d.path + " labels disagree with manifest");
  return std::move(c.frames);
}

FrameSplit split_pretrain_test(const DatasetManifest& m,
                               const std::vector<int>& frames_per_clip,
                               double pretrain_fraction, uint64_t seed) {
  (void)seed;  // the contiguous split is order-determined; seed kept for protocol stability
  if (!(pretrain_fraction > 0.0 && pretrain_fraction < 1.0))
    throw std::invalid_argument("pretrain_fraction must be in (0, 1)");
  if (frames_per_clip.size() != m.clips.size())
    throw ValidationError("split: frame counts do not match manifest clips");
  FrameSplit out;
  for (size_t ci = 0; ci < frames_per_clip.size(); ++ci) {
    int n = frames_per_clip[ci];
    int cut = static_cast<int>(std::floor(pretrain_fraction * n));
    for (int f = 0; f < cut; ++f) out.pretrain.push_back({static_cast<int>(ci), f});
    for (int f = cut; f < n; ++f) out.test.push_back({static_cast<int>(ci), f});
  }
  return out;
}

std::vector<LabeledFrameRun> runs_from_split(const DatasetManifest& m,
                                             const std::vector<int>& frames_per_clip,
                                             const std::vector<FrameRef>& side) {
  (void)frames_per_clip;
  std::vector<LabeledFrameRun> runs;
  for (const FrameRef& r : side) {
    if (!runs.empty() && runs.back().clip_index == r.clip_index &&
        runs.back().first_frame + runs.back().count == r.frame_index) {
      ++runs.back().count;
      continue;
    }
    const ClipDescriptor& d = m.clips.at(static_cast<size_t>(r.clip_index));
    runs.push_back(LabeledFrameRun{r.clip_index, r.frame_index, 1, d.activity_label,
                                   d.subject_label, d.environment_id, d.path});
  }
  return runs;
}

std::vector<ClipWindow> segment_clips(const std::vector<LabeledFrameRun>& runs, int seq_len) {
  if (seq_len < 1) throw std::invalid_argument("seq_len must be >= 1");
  std::vector<ClipWindow> out;
  for (const auto& run : runs) {
    int nwin = run.count / seq_len;
    for (int w = 0; w < nwin; ++w) {
      ClipWindow cw;
      cw.clip_index = run.clip_index;
      cw.first_frame = run.first_frame + w * seq_len;
      cw.length = seq_len;
      cw.activity_label = run.activity_label;
      cw.subject_label = run.subject_label;
      cw.environment_id = run.environment_id;
      cw.clip_id = run.source_path + "#f" + std::to_string(cw.first_frame);
      out.push_back(std::move(cw));
    }
  }
  return out;
}

std::vector<ClipWindow> select_finetune_budget(const std::vector<ClipWindow>& clips,
                                               int num_activities, double seconds_per_class,
                                               double frame_rate, BudgetReport* report) {
  if (seconds_per_class <= 0) throw std::invalid_argument("seconds_per_class must be > 0");
  if (frame_rate <= 0) throw std::invalid_argument("frame_rate must be > 0");
  double budget_frames = seconds_per_class * frame_rate;
  std::vector<long long> used(static_cast<size_t>(num_activities), 0);
  std::vector<int> picked(static_cast<size_t>(num_activities), 0);
  std::vector<ClipWindow> out;
  for (const auto& c : clips) {
    if (c.activity_label < 0 || c.activity_label >= num_activities)
      throw ValidationError("clip window carries activity label " +
                            std::to_string(c.activity_label) + " outside [0, " +
                            std::to_string(num_activities) + ")");
    size_t a = static_cast<size_t>(c.activity_label);
    bool first_of_class = picked[a] == 0;
    if (!first_of_class &&
        static_cast<double>(used[a] + c.length) > budget_frames + 1e-9)
      continue;
    if (first_of_class || static_cast<double>(used[a] + c.length) <= budget_frames + 1e-9) {
      out.push_back(c);
      used[a] += c.length;
      ++picked[a];
    }
  }
  if (report) {
    report->missing_classes.clear();
    report->selected_per_class.assign(picked.begin(), picked.end());
    report->frames_per_class.assign(used.begin(), used.end());
    for (int a = 0; a < num_activities; ++a)
      if (picked[static_cast<size_t>(a)] == 0) report->missing_classes.push_back(a);
  }
  return out;
}

void darken(Tensor3f& image, double gamma) {
  if (gamma <= 0) throw std::invalid_argument("gamma must be > 0");
  for (float& v : image.data) v = std::pow(v, static_cast<float>(gamma));
}

// --- synthetic generation ----------------------------------------------------

namespace {

// The shared latent phase lives on a lattice of kPhaseSteps cells and each
// activity advances it at its own integer rate. Every rendered quantity is a
// smooth sinusoid of the phase, but the latent state space stays small, so
// masked patches are predictable from visible context at desk scale.
constexpr int kPhaseSteps = 24;

struct ActivityTraits {
  double omega;       // phase advance per frame (lattice-aligned)
  double lobe_x;      // trajectory harmonics
  double lobe_y;
  double psi;         // trajectory phase offset
  double carrier;     // CSI spatial frequency over subcarriers
};

ActivityTraits traits_for(int activity) {
  ActivityTraits t;
  int rate = 1 + activity % (kPhaseSteps / 2 - 1);
  t.omega = 2.0 * M_PI * rate / kPhaseSteps;
  t.lobe_x = 1.0 + activity % 3;
  t.lobe_y = 1.0 + (activity / 3) % 3;
  t.psi = (activity % 4) * (M_PI / 4.0);
  t.carrier = 1.5 + activity;
  return t;
}

double clip_phase0(const SyntheticConfig& cfg, int activity, int subject, int repetition) {
  Rng rng(derive_seed(cfg.seed, "clip-phase",
                      static_cast<uint64_t>(activity) * 104729u + static_cast<uint64_t>(subject),
                      static_cast<uint64_t>(repetition)));
  return 2.0 * M_PI * static_cast<double>(rng.below(kPhaseSteps)) / kPhaseSteps;
}

double channel_tint(int activity, int channel) {
  return 0.6 + 0.4 * std::sin(1.7 * (activity + 1) * (channel + 1));
}

double background_at(const SyntheticConfig& cfg, int c, int h, int w) {
  double u = static_cast<double>(h) / cfg.shapes.height;
  double v = static_cast<double>(w) / cfg.shapes.width;
  return cfg.background_level *
         (0.5 + 0.5 * std::sin(2.0 * M_PI * cfg.env_base_freq * (u + 0.5 * v) +
                               cfg.env_base_phase + c));
}

}  // namespace

double synth_csi_clean(const SyntheticConfig& cfg, int activity, int subject, int repetition,
                       int antenna, int subcarrier, long long global_packet) {
  ActivityTraits tr = traits_for(activity);
  double phase0 = clip_phase0(cfg, activity, subject, repetition);
  double base = 1.0 + 0.5 * std::sin(2.0 * M_PI * cfg.env_base_freq * subcarrier /
                                         cfg.shapes.subcarriers +
                                     cfg.env_base_phase);
  double t_cont = static_cast<double>(global_packet) / cfg.shapes.packets;
  double subject_gain = 0.6 + 0.4 * (subject + 1.0) / cfg.num_subjects;
  return base + 0.8 * subject_gain *
                    std::sin(2.0 * M_PI * tr.carrier * subcarrier / cfg.shapes.subcarriers +
                             phase0 + tr.omega * t_cont + 2.0 * M_PI * antenna / cfg.shapes.antennas);
}

std::vector<MultimodalFrame> synth_clip(const SyntheticConfig& cfg, int activity, int subject,
                                        int repetition, ClipLatent* latent) {
  const DatasetShapes& s = cfg.shapes;
  ActivityTraits tr = traits_for(activity);
  double phase0 = clip_phase0(cfg, activity, subject, repetition);
  Rng noise(derive_seed(cfg.seed, "clip-noise",
                        static_cast<uint64_t>(activity) * 104729u + static_cast<uint64_t>(subject),
                        static_cast<uint64_t>(repetition)));
  double radius = std::min(s.height, s.width) *
                  (0.10 + 0.12 * (subject + 1.0) / cfg.num_subjects);
  double sigma_r = radius / 2.0;
  if (latent) {
    latent->image_phase.clear();
    latent->csi_phase.clear();
  }
  std::vector<MultimodalFrame> frames(static_cast<size_t>(cfg.frames_per_clip));
  for (int t = 0; t < cfg.frames_per_clip; ++t) {
    double phase = phase0 + tr.omega * t;
    if (latent) {
      latent->image_phase.push_back(phase);
      latent->csi_phase.push_back(phase);
    }
    MultimodalFrame& f = frames[static_cast<size_t>(t)];
    f.timestamp_index = t;
    f.image = Tensor3f(s.channels, s.height, s.width);
    double cx = s.width * (0.5 + 0.30 * std::cos(tr.lobe_x * phase + tr.psi));
    double cy = s.height * (0.5 + 0.30 * std::sin(tr.lobe_y * phase));
    for (int c = 0; c < s.channels; ++c) {
      double tint = channel_tint(activity, c);
      for (int h = 0; h < s.height; ++h)
        for (int w = 0; w < s.width; ++w) {
          double dx = w - cx, dy = h - cy;
          double bump = 0.7 * tint * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_r * sigma_r));
          double v = background_at(cfg, c, h, w) + bump + cfg.noise_sigma * noise.normal();
          f.image.at(c, h, w) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    f.csi = Tensor3f(s.antennas, s.subcarriers, s.packets);
    // same field as synth_csi_clean, with the per-clip terms hoisted
    double subject_gain = 0.6 + 0.4 * (subject + 1.0) / cfg.num_subjects;
    for (int a = 0; a < s.antennas; ++a) {
      double ant_phase = 2.0 * M_PI * a / s.antennas;
      for (int k = 0; k < s.subcarriers; ++k) {
        double base = 1.0 + 0.5 * std::sin(2.0 * M_PI * cfg.env_base_freq * k / s.subcarriers +
                                           cfg.env_base_phase);
        double carrier = 2.0 * M_PI * tr.carrier * k / s.subcarriers;
        for (int p = 0; p < s.packets; ++p) {
          long long g = static_cast<long long>(t) * s.packets + p;
          double t_cont = static_cast<double>(g) / s.packets;
          double v = base + 0.8 * subject_gain *
                                std::sin(carrier + phase0 + tr.omega * t_cont + ant_phase) +
                     cfg.csi_noise_sigma * noise.normal();
          f.csi.at(a, k, p) = static_cast<float>(v);
        }
      }
    }
  }
  return frames;
}

DatasetManifest generate_synthetic(const SyntheticConfig& cfg, const std::string& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(root) / "clips", ec);
  if (ec) throw IoError("cannot create dataset directory " + root + ": " + ec.message());

  DatasetManifest m;
  m.root_path = root;
  m.dataset_id = cfg.environment_id + "-seed" + std::to_string(cfg.seed);
  m.shapes = cfg.shapes;
  m.num_activities = cfg.num_activities;
  m.num_subjects = cfg.num_subjects;
  m.frame_rate_ratio = cfg.shapes.packets;
  m.frame_rate = cfg.frame_rate;
  m.split_seed = static_cast<long long>(cfg.seed);
  for (int a = 0; a < cfg.num_activities; ++a)
    for (int s = 0; s < cfg.num_subjects; ++s)
      for (int r = 0; r < cfg.clips_per_pair; ++r) {
        std::string rel = "clips/a" + std::to_string(a) + "_s" + std::to_string(s) + "_r" +
                          std::to_string(r) + ".clip";
        auto frames = synth_clip(cfg, a, s, r);
        save_clip(root + "/" + rel, frames, cfg.shapes, a, s);
        m.clips.push_back(ClipDescriptor{rel, a, s, cfg.environment_id});
      }
  save_manifest(m, root + "/manifest.mi2m");
  return m;
}

void CsiNormalizer::fit_update(const Tensor3f& csi) {
  if (empty()) {
    antennas = csi.d0;
    subcarriers = csi.d1;
    min_v.assign(static_cast<size_t>(antennas) * subcarriers,
                 std::numeric_limits<float>::infinity());
    max_v.assign(static_cast<size_t>(antennas) * subcarriers,
                 -std::numeric_limits<float>::infinity());
  }
  if (csi.d0 != antennas || csi.d1 != subcarriers)
    throw ValidationError("normalizer: csi shape changed between frames");
  for (int a = 0; a < antennas; ++a)
    for (int k = 0; k < subcarriers; ++k) {
      size_t idx = static_cast<size_t>(a) * subcarriers + k;
      for (int p = 0; p < csi.d2; ++p) {
        float v = csi.at(a, k, p);
        min_v[idx] = std::min(min_v[idx], v);
        max_v[idx] = std::max(max_v[idx], v);
      }
    }
}

void CsiNormalizer::apply(Tensor3f& csi) const {
  if (empty()) throw ValidationError("normalizer: not fitted");
  if (csi.d0 != antennas || csi.d1 != subcarriers)
    throw ValidationError("normalizer: csi shape mismatch");
  for (int a = 0; a < antennas; ++a)
    for (int k = 0; k < subcarriers; ++k) {
      size_t idx = static_cast<size_t>(a) * subcarriers + k;
      float range = max_v[idx] - min_v[idx];
      for (int p = 0; p < csi.d2; ++p) {
        float& v = csi.at(a, k, p);
        v = range > 1e-12f ? (v - min_v[idx]) / range : 0.0f;
      }
    }
}

}  // namespace mi2m
