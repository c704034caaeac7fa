#include "mi2m/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mi2m {

namespace {

void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
  char b[4];
  if (!is.read(b, 4)) throw IoError("truncated checkpoint: " + path);
  uint32_t v;
  std::memcpy(&v, b, 4);
  return v;
}

void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is, const std::string& path) {
  uint32_t n = read_u32(is, path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("truncated checkpoint: " + path);
  return s;
}

}  // namespace

void Blob::set_meta(const std::string& key, const std::string& value) {
  for (auto& kv : meta)
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  meta.emplace_back(key, value);
}

bool Blob::has_meta(const std::string& key) const {
  for (auto& kv : meta)
    if (kv.first == key) return true;
  return false;
}

const std::string& Blob::meta_at(const std::string& key) const {
  for (auto& kv : meta)
    if (kv.first == key) return kv.second;
  throw ValidationError("checkpoint misses meta key '" + key + "'");
}

long long Blob::meta_int(const std::string& key) const { return parse_int(meta_at(key)); }
double Blob::meta_double(const std::string& key) const { return parse_double(meta_at(key)); }

void Blob::add_array(const std::string& name, ad::Mat m) {
  arrays.emplace_back(name, std::move(m));
}

bool Blob::has_array(const std::string& name) const {
  for (auto& a : arrays)
    if (a.first == name) return true;
  return false;
}

const ad::Mat& Blob::array_at(const std::string& name) const {
  for (auto& a : arrays)
    if (a.first == name) return a.second;
  throw ValidationError("checkpoint misses array '" + name + "'");
}

void Blob::save(const std::string& path) const {
  if (magic.size() != 8) throw ValidationError("checkpoint magic must be 8 bytes");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(magic.data(), 8);
  write_u32(os, version);
  write_u32(os, static_cast<uint32_t>(meta.size()));
  for (auto& [k, v] : meta) {
    write_str(os, k);
    write_str(os, v);
  }
  write_u32(os, static_cast<uint32_t>(arrays.size()));
  for (auto& [name, m] : arrays) {
    write_str(os, name);
    write_u32(os, static_cast<uint32_t>(m.rows()));
    write_u32(os, static_cast<uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!os) throw IoError("write failed: " + path);
}

Blob Blob::load(const std::string& path, const std::string& expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  Blob b;
  char magic[8];
  if (!is.read(magic, 8)) throw IoError("truncated checkpoint: " + path);
  b.magic.assign(magic, 8);
  if (b.magic != expected_magic)
    throw ValidationError("checkpoint magic mismatch in " + path + ": expected '" +
                          expected_magic + "', found '" + b.magic + "'");
  b.version = read_u32(is, path);
  if (b.version != 1)
    throw ValidationError("unsupported checkpoint version " + std::to_string(b.version) +
                          " in " + path);
  uint32_t nmeta = read_u32(is, path);
  for (uint32_t i = 0; i < nmeta; ++i) {
    std::string k = read_str(is, path);
    std::string v = read_str(is, path);
    b.meta.emplace_back(std::move(k), std::move(v));
  }
  uint32_t narr = read_u32(is, path);
  for (uint32_t i = 0; i < narr; ++i) {
    std::string name = read_str(is, path);
    uint32_t rows = read_u32(is, path);
    uint32_t cols = read_u32(is, path);
    ad::Mat m(rows, cols);
    if (m.size() &&
        !is.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(sizeof(double) * m.size())))
      throw IoError("truncated checkpoint: " + path);
    b.arrays.emplace_back(std::move(name), std::move(m));
  }
  return b;
}

void store_params(Blob& blob, const ParamStore& params) {
  for (size_t i = 0; i < params.count(); ++i) {
    const std::string& name = params.name_at(i);
    blob.add_array(name, params.at(name));
  }
}

void store_optimizer_state(Blob& blob, ParamStore& params) {
  blob.set_meta("adam.steps", fmt_int(params.adam_steps()));
  for (size_t i = 0; i < params.count(); ++i) {
    const std::string& name = params.name_at(i);
    blob.add_array("adam.m:" + name, params.moment1(name));
    blob.add_array("adam.v:" + name, params.moment2(name));
  }
}

void load_params(const Blob& blob, ParamStore& params, bool with_optimizer_state) {
  for (size_t i = 0; i < params.count(); ++i) {
    const std::string& name = params.name_at(i);
    const ad::Mat& src = blob.array_at(name);
    ad::Mat& dst = params.at(name);
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw ValidationError("checkpoint array '" + name + "' has shape " +
                            std::to_string(src.rows()) + "x" + std::to_string(src.cols()) +
                            ", expected " + std::to_string(dst.rows()) + "x" +
                            std::to_string(dst.cols()));
    dst = src;
    if (with_optimizer_state) {
      params.moment1(name) = blob.array_at("adam.m:" + name);
      params.moment2(name) = blob.array_at("adam.v:" + name);
    }
  }
  if (with_optimizer_state) params.set_adam_steps(blob.meta_int("adam.steps"));
}

}  // namespace mi2m
