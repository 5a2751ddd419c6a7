#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "perp/autograd.hpp"
#include "perp/errors.hpp"

namespace perp {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Runs after every optimizer step; used for mask enforcement.
class StepHook {
 public:
  virtual ~StepHook() = default;
  virtual void after_step() = 0;
};

/// AdamW with decoupled weight decay. Moment buffers exist only for the
/// parameters handed to the constructor, and only those with requires_grad set.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Var<T>> params, AdamWConfig cfg = {}) : cfg_(cfg) {
    for (auto& p : params) {
      if (!p.requires_grad()) continue;
      slots_.push_back(Slot{p, std::vector<T>(p.numel(), T{0}), std::vector<T>(p.numel(), T{0})});
    }
  }

  void add_hook(StepHook* hook) { hooks_.push_back(hook); }

  /// One update with learning rate lr. Every trainable parameter must carry a gradient.
  void step(double lr) {
    for (auto& s : slots_) {
      if (!s.param.has_grad()) throw ContractError("adamw step: trainable parameter has no gradient");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.eps), wd = static_cast<T>(cfg_.weight_decay), lrt = static_cast<T>(lr);
    // beta == 1 leaves the correction undefined; fall back to no correction.
    const T c1 = static_cast<T>(bc1 == 0.0 ? 1.0 : 1.0 / bc1);
    const T c2 = static_cast<T>(bc2 == 0.0 ? 1.0 : 1.0 / bc2);
    for (auto& s : slots_) {
      T* p = s.param.mutable_value().data();
      const T* g = s.param.grad().data();
      for (std::size_t i = 0; i < s.m.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = s.m[i] * c1;
        const T vhat = s.v[i] * c2;
        const T denom = std::sqrt(vhat) + eps;
        const T update = denom == T(0) ? T(0) : mhat / denom;
        p[i] -= lrt * (update + wd * p[i]);
      }
    }
    for (auto* h : hooks_) h->after_step();
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.clear_grad();
  }

  std::int64_t steps() const noexcept { return t_; }

  /// Floats held in moment buffers: exactly twice the trainable entries.
  std::size_t state_floats() const noexcept {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.m.size() + s.v.size();
    return n;
  }

  std::size_t trainable_entries() const noexcept {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.param.numel();
    return n;
  }

  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  struct Slot {
    Var<T> param;
    std::vector<T> m;
    std::vector<T> v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::vector<StepHook*> hooks_;
  std::int64_t t_ = 0;
};

/// Linear warmup from 0 to peak over [0, warmup], then linear decay to 0 at total.
class LrSchedule {
 public:
  LrSchedule(double peak, std::int64_t total, std::int64_t warmup);
  /// Warmup defaults to ceil(0.1 * total).
  static LrSchedule with_default_warmup(double peak, std::int64_t total);

  double at(std::int64_t iter) const;

  double peak() const noexcept { return peak_; }
  std::int64_t total() const noexcept { return total_; }
  std::int64_t warmup() const noexcept { return warmup_; }

 private:
  double peak_;
  std::int64_t total_;
  std::int64_t warmup_;
};

inline double lr_at(const LrSchedule& s, std::int64_t iter) { return s.at(iter); }

}  // namespace perp
