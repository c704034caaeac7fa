#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mi2m/common.hpp"
#include "mi2m/rng.hpp"

namespace mi2m {

// One synchronized time step: a CSI tensor (A, S, P) and an image (C, H, W).
// Frame t owns CSI packets [P*t, P*t + P) of the underlying packet stream.
struct MultimodalFrame {
  Tensor3f csi;
  Tensor3f image;
  long long timestamp_index = 0;
};

struct ActivityClip {
  std::vector<MultimodalFrame> frames;
  int activity_label = 0;
  int subject_label = 0;
  std::string environment_id;
  std::string clip_id;  // source path + window index; used for protocol checks
};

struct ClipDescriptor {
  std::string path;  // relative to manifest root
  int activity_label = 0;
  int subject_label = 0;
  std::string environment_id;
};

struct DatasetManifest {
  std::string root_path;
  std::string dataset_id;
  DatasetShapes shapes;
  int num_activities = 0;
  int num_subjects = 0;
  int frame_rate_ratio = 0;  // packets per video frame; must equal shapes.packets
  double frame_rate = 100.0; // video frames per second
  long long split_seed = 0;
  std::vector<ClipDescriptor> clips;

  std::string clip_path(size_t i) const { return root_path + "/" + clips[i].path; }
};

// --- on-disk formats --------------------------------------------------------

// Clip binary layout: 8-byte magic "MI2MCLP1", u32 version, u32 x 6 shapes
// (A,S,P,C,H,W), u32 activity, u32 subject, u32 T, then T x (csi floats,
// image floats) row-major, little-endian.
void save_clip(const std::string& path, const std::vector<MultimodalFrame>& frames,
               const DatasetShapes& shapes, int activity, int subject);

struct LoadedClip {
  std::vector<MultimodalFrame> frames;
  int activity = 0;
  int subject = 0;
};

LoadedClip load_clip(const std::string& path, const DatasetShapes& expected);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_dataset(const std::string& manifest_path);

// Loads every frame of clip i, validating shapes against the manifest.
std::vector<MultimodalFrame> load_clip_frames(const DatasetManifest& m, size_t clip_index);

// --- split / segmentation / budget ------------------------------------------

// Reference to a frame inside a manifest clip.
struct FrameRef {
  int clip_index = 0;
  int frame_index = 0;
};

struct FrameSplit {
  std::vector<FrameRef> pretrain;
  std::vector<FrameRef> test;
};

// Contiguous per-clip split: the first floor(fraction * N_T) frames of each
// clip go to pretraining, the remainder to test. No frame crosses over.
FrameSplit split_pretrain_test(const DatasetManifest& m,
                               const std::vector<int>& frames_per_clip,
                               double pretrain_fraction, uint64_t seed);

// A labeled run of consecutive frames from one source clip (one side of the
// split), ready for segmentation.
struct LabeledFrameRun {
  int clip_index = 0;
  int first_frame = 0;
  int count = 0;
  int activity_label = 0;
  int subject_label = 0;
  std::string environment_id;
  std::string source_path;
};

struct ClipWindow {
  int clip_index = 0;
  int first_frame = 0;
  int length = 0;
  int activity_label = 0;
  int subject_label = 0;
  std::string environment_id;
  std::string clip_id;
};

// Consecutive non-overlapping windows of seq_len frames; the trailing
// remainder shorter than seq_len is dropped.
std::vector<ClipWindow> segment_clips(const std::vector<LabeledFrameRun>& runs, int seq_len);

std::vector<LabeledFrameRun> runs_from_split(const DatasetManifest& m,
                                             const std::vector<int>& frames_per_clip,
                                             const std::vector<FrameRef>& side);

struct BudgetReport {
  std::vector<int> missing_classes;
  std::vector<int> selected_per_class;
  std::vector<long long> frames_per_class;
};

// Earliest windows per activity class whose total frame count stays within
// seconds_per_class * frame_rate; every class keeps at least one window when
// any exists for it.
std::vector<ClipWindow> select_finetune_budget(const std::vector<ClipWindow>& clips,
                                               int num_activities, double seconds_per_class,
                                               double frame_rate, BudgetReport* report = nullptr);

// Element-wise out = in^gamma on [0,1] pixels; monotone, endpoint-preserving.
void darken(Tensor3f& image, double gamma);

// --- synthetic generator ------------------------------------------------------

struct SyntheticConfig {
  int num_activities = 6;
  int num_subjects = 4;
  int clips_per_pair = 2;
  int frames_per_clip = 120;
  DatasetShapes shapes{3, 114, 10, 3, 224, 224};
  double noise_sigma = 0.05;      // image pixel noise
  double csi_noise_sigma = 0.05;  // CSI amplitude noise
  uint64_t seed = 1;
  std::string environment_id = "envA";
  double background_level = 0.35;
  // Environment texture knobs; changing them yields a distribution shift
  // without touching the activity signal model.
  double env_base_freq = 3.0;
  double env_base_phase = 0.0;
  double frame_rate = 100.0;
};

// Shared latent exposed for tests: both renderers consume the same per-frame
// phase sequence.
struct ClipLatent {
  std::vector<double> image_phase;
  std::vector<double> csi_phase;
};

// Renders one clip (both modalities) from the shared latent.
std::vector<MultimodalFrame> synth_clip(const SyntheticConfig& cfg, int activity, int subject,
                                        int repetition, ClipLatent* latent = nullptr);

// Value of the CSI amplitude field before noise, addressed by global packet
// index g = t * P + p. Exposed so alignment tests can recompute it.
double synth_csi_clean(const SyntheticConfig& cfg, int activity, int subject, int repetition,
                       int antenna, int subcarrier, long long global_packet);

// Writes manifest + clip files under cfg-driven output root; deterministic
// per seed.
DatasetManifest generate_synthetic(const SyntheticConfig& cfg, const std::string& root);

// --- CSI normalization --------------------------------------------------------

// Per-(antenna, subcarrier) min-max statistics over a pretraining frame set.
// Amplitude-only preprocessing; images are already in [0,1].
struct CsiNormalizer {
  int antennas = 0, subcarriers = 0;
  std::vector<float> min_v, max_v;  // antennas x subcarriers, row-major

  bool empty() const { return min_v.empty(); }
  void fit_update(const Tensor3f& csi);
  void apply(Tensor3f& csi) const;
};

}  // namespace mi2m
