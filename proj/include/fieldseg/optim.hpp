#pragma once

// Named parameter collections and the Adam optimizer.
//
// A ParamStore maps names to autodiff leaves. Iteration order is the sorted
// name order, which keeps optimizer sweeps and serialization deterministic.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fieldseg/autodiff.hpp"
#include "fieldseg/rng.hpp"
#include "fieldseg/tensor.hpp"

namespace fieldseg {

struct ParamError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ParamStore {
 public:
  struct Entry {
    ad::Var var;
    bool trainable = true;
  };

  ad::Var& add(const std::string& name, Tensor value, bool trainable = true) {
    auto [it, fresh] = entries_.try_emplace(name);
    if (!fresh) throw ParamError("parameter already exists: " + name);
    it->second.var = ad::Var::leaf(std::move(value), trainable);
    it->second.trainable = trainable;
    return it->second.var;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  const ad::Var& var(const std::string& name) const { return find(name).var; }
  Tensor& tensor(const std::string& name) { return find(name).var.value(); }
  const Tensor& tensor(const std::string& name) const { return find(name).var.value(); }
  bool trainable(const std::string& name) const { return find(name).trainable; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  std::int64_t scalar_count(bool trainable_only = false) const {
    std::int64_t n = 0;
    for (const auto& [k, e] : entries_)
      if (!trainable_only || e.trainable) n += e.var.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& [k, e] : entries_) e.var.zero_grad();
  }

  // Gradients for every trainable parameter after a backward() pass.
  // Parameters the graph never touched report zeros.
  std::map<std::string, Tensor> gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, e] : entries_)
      if (e.trainable) out.emplace(k, e.var.grad());
    return out;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [k, e] : entries_) fn(k, e);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [k, e] : entries_) fn(k, e);
  }

  // Deep copy; the clone owns fresh leaves with the same values and flags.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [k, e] : entries_) out.add(k, e.var.value(), e.trainable);
    return out;
  }

 private:
  Entry& find(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ParamError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& find(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ParamError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

// He-style fan-in initialization for a [in, out] weight matrix.
inline Tensor init_linear_weight(int fan_in, int fan_out, Rng& rng) {
  Tensor w({fan_in, fan_out});
  double s = std::sqrt(2.0 / fan_in);
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, s);
  return w;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment state per trainable parameter plus the shared step
// counter used for bias correction.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const ParamStore& store, AdamConfig cfg) : cfg_(cfg) {
    store.for_each([&](const std::string& name, const ParamStore::Entry& e) {
      if (!e.trainable) return;
      slots_.emplace(name, Slot{Tensor::zeros(e.var.shape()), Tensor::zeros(e.var.shape())});
    });
  }

  const AdamConfig& config() const { return cfg_; }
  AdamConfig& config() { return cfg_; }
  std::int64_t step_count() const { return t_; }

  const Tensor& m(const std::string& name) const { return slots_.at(name).m; }
  const Tensor& v(const std::string& name) const { return slots_.at(name).v; }

  // One Adam step over all trainable parameters, with bias correction.
  // Parameters are updated in place; gradients come from var.grad().
  void step(ParamStore& store) { step(store, cfg_.lr); }

  void step(ParamStore& store, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    store.for_each([&](const std::string& name, ParamStore::Entry& e) {
      if (!e.trainable) return;
      auto it = slots_.find(name);
      if (it == slots_.end()) throw ParamError("adam state missing parameter: " + name);
      Slot& s = it->second;
      Tensor g = e.var.grad();
      Tensor& x = e.var.value();
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        x[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    });
  }

 private:
  struct Slot {
    Tensor m, v;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
  std::int64_t t_ = 0;
};

// Central finite differences over every trainable scalar, sharing no code
// with the reverse-mode pass. fn must rebuild and evaluate the loss from the
// store's current values.
template <typename Fn>
std::map<std::string, Tensor> finite_difference_gradient(ParamStore& store, Fn&& fn,
                                                         double h = 1e-5) {
  std::map<std::string, Tensor> out;
  store.for_each([&](const std::string& name, ParamStore::Entry& e) {
    if (!e.trainable) return;
    Tensor g(e.var.shape());
    Tensor& x = e.var.value();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      double keep = x[i];
      x[i] = keep + h;
      double fp = fn();
      x[i] = keep - h;
      double fm = fn();
      x[i] = keep;
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  });
  return out;
}

}  // namespace fieldseg
