#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mi2m/optim.hpp"
#include "mi2m/tape.hpp"

namespace mi2m {

// Versioned binary container shared by the three checkpoint formats
// (MI2MTOK1 / MI2MENC1 / MI2MGRU1). Layout, little-endian:
//   magic[8], u32 version,
//   u32 meta_count,  meta_count x (str key, str value),
//   u32 array_count, array_count x (str name, u32 rows, u32 cols, f64 data)
// where str = u32 length + bytes, f64 data is column-major.
// Meta order and array order are preserved, so load+save round-trips
// byte-identically.
struct Blob {
  std::string magic;
  uint32_t version = 1;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, ad::Mat>> arrays;

  void set_meta(const std::string& key, const std::string& value);
  bool has_meta(const std::string& key) const;
  const std::string& meta_at(const std::string& key) const;
  long long meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;

  void add_array(const std::string& name, ad::Mat m);
  bool has_array(const std::string& name) const;
  const ad::Mat& array_at(const std::string& name) const;

  void save(const std::string& path) const;

  // Throws IoError on missing/truncated files and ValidationError when magic
  // or version do not match (the refuse-to-resume path).
  static Blob load(const std::string& path, const std::string& expected_magic);
};

// ParamStore <-> blob helpers. Optimizer moments are stored alongside values
// under "adam.m:"/"adam.v:" prefixes together with the step counter.
void store_params(Blob& blob, const ParamStore& params);
void store_optimizer_state(Blob& blob, ParamStore& params);
void load_params(const Blob& blob, ParamStore& params, bool with_optimizer_state);

}  // namespace mi2m
