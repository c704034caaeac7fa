#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mi2m {

// Library code throws; the CLI maps exception types onto these.
enum class ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : ValidationError {
  using ValidationError::ValidationError;
};

// Dense 3-d tensor in storage precision (clip files hold float32).
// Layout is row-major: index (i, j, k) -> (i*d1 + j)*d2 + k.
struct Tensor3f {
  int d0 = 0, d1 = 0, d2 = 0;
  std::vector<float> data;

  Tensor3f() = default;
  Tensor3f(int a, int b, int c)
      : d0(a), d1(b), d2(c), data(static_cast<size_t>(a) * b * c, 0.0f) {}

  float& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * d1 + j) * d2 + k];
  }
  float at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * d1 + j) * d2 + k];
  }
  size_t size() const { return data.size(); }
  bool same_shape(int a, int b, int c) const { return d0 == a && d1 == b && d2 == c; }
};

// Declared per-dataset tensor shapes: CSI (A, S, P), image (C, H, W).
struct DatasetShapes {
  int antennas = 3;
  int subcarriers = 114;
  int packets = 10;
  int channels = 3;
  int height = 224;
  int width = 224;

  size_t csi_size() const {
    return static_cast<size_t>(antennas) * subcarriers * packets;
  }
  size_t image_size() const {
    return static_cast<size_t>(channels) * height * width;
  }
  bool operator==(const DatasetShapes&) const = default;
};

// Canonical shortest round-trip formatting; used everywhere a number is
// serialized so that write -> read -> write is byte-stable.
inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_int(long long v) { return std::to_string(v); }

inline double parse_double(std::string_view s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ValidationError("not a number: '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ValidationError("not an integer: '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    size_t next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.emplace_back(s.substr(pos));
      break;
    }
    out.emplace_back(s.substr(pos, next - pos));
    pos = next + 1;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace mi2m
