#pragma once

#include <map>
#include <string>
#include <vector>

#include "mi2m/rng.hpp"
#include "mi2m/tape.hpp"

namespace mi2m {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Named parameter matrices plus Adam first/second moments. Creation order is
// preserved so checkpoints serialize deterministically.
class ParamStore {
 public:
  ad::Mat& create(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw ValidationError("parameter already exists: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, ad::Mat::Zero(rows, cols), ad::Mat::Zero(rows, cols),
                             ad::Mat::Zero(rows, cols)});
    return entries_.back().value;
  }

  ad::Mat& create_normal(const std::string& name, int rows, int cols, double stddev, Rng& rng) {
    ad::Mat& m = create(name, rows, cols);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = stddev * rng.normal();
    return m;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  ad::Mat& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].value;
  }
  const ad::Mat& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].value;
  }

  size_t count() const { return entries_.size(); }
  const std::string& name_at(size_t i) const { return entries_[i].name; }

  // Applies one bias-corrected Adam update from accumulated gradients.
  void adam_step(const std::map<std::string, ad::Mat>& grads, const AdamConfig& cfg) {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    double scale = cfg.lr / bc1;
    double vs = 1.0 / std::sqrt(bc2);
    for (auto& e : entries_) {
      auto it = grads.find(e.name);
      if (it == grads.end()) continue;
      const auto g = it->second.array();
      e.m.array() = cfg.beta1 * e.m.array() + (1.0 - cfg.beta1) * g;
      e.v.array() = cfg.beta2 * e.v.array() + (1.0 - cfg.beta2) * g * g;
      e.value.array() -= scale * e.m.array() / (e.v.array().sqrt() * vs + cfg.eps);
    }
  }

  long long adam_steps() const { return step_; }
  void set_adam_steps(long long s) { step_ = s; }

  ad::Mat& moment1(const std::string& name) { return entries_[index_.at(name)].m; }
  ad::Mat& moment2(const std::string& name) { return entries_[index_.at(name)].v; }

  bool equal_values(const ParamStore& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != o.entries_[i].name) return false;
      if (entries_[i].value != o.entries_[i].value) return false;
    }
    return true;
  }

 private:
  struct Entry {
    std::string name;
    ad::Mat value, m, v;
  };
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
  long long step_ = 0;
};

// Per-step bridge between parameter stores and a tape: parameters enter the
// graph as requires-grad leaves, and gradients are pulled back out by name.
// Multiple stores may be bound (their parameter names must not collide);
// stores registered as frozen contribute constants instead.
class TapeBinding {
 public:
  explicit TapeBinding(ParamStore& store) { stores_.push_back({&store, false}); }
  TapeBinding(std::initializer_list<ParamStore*> stores) {
    for (ParamStore* s : stores) stores_.push_back({s, false});
  }

  void add_store(ParamStore& store, bool frozen) { stores_.push_back({&store, frozen}); }

  ad::Tape& tape() { return tape_; }

  ad::Var use(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return ad::Var{&tape_, it->second};
    for (auto& [store, frozen] : stores_) {
      if (!store->has(name)) continue;
      ad::Var v = tape_.leaf(store->at(name), !frozen);
      bound_[name] = v.id;
      return v;
    }
    throw ValidationError("unknown parameter: " + name);
  }

  ad::Var constant(ad::Mat m) { return tape_.leaf(std::move(m), false); }

  // Moves gradient buffers out of the tape (the binding is done after this).
  std::map<std::string, ad::Mat> collect_grads() {
    std::map<std::string, ad::Mat> out;
    for (auto& [name, id] : bound_) {
      if (!tape_.node(id).requires_grad) continue;
      out[name] = take_grad(id);
    }
    return out;
  }

  // Gradients restricted to entries a store owns.
  std::map<std::string, ad::Mat> collect_grads_for(const ParamStore& store) {
    std::map<std::string, ad::Mat> out;
    for (auto& [name, id] : bound_) {
      if (!tape_.node(id).requires_grad || !store.has(name)) continue;
      out[name] = take_grad(id);
    }
    return out;
  }

 private:
  ad::Mat take_grad(int id) {
    auto& node = tape_.node(id);
    if (node.grad.size() == 0) return ad::Mat::Zero(node.value.rows(), node.value.cols());
    return std::move(node.grad);
  }

  std::vector<std::pair<ParamStore*, bool>> stores_;
  ad::Tape tape_;
  std::map<std::string, int> bound_;
};

}  // namespace mi2m
