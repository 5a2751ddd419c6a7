#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "perp/autograd.hpp"
#include "perp/model.hpp"
#include "perp/sparsity.hpp"
#include "perp/tensor.hpp"

namespace perp {

enum class AdapterKind : std::uint8_t { lora = 0, lora_prune = 1, mult_lora = 2, masked_lora = 3 };

std::string to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(const std::string& name);
/// Only plain LoRA cannot be folded into a sparse weight.
inline bool is_mergeable(AdapterKind kind) { return kind != AdapterKind::lora; }
inline bool needs_mask(AdapterKind kind) { return kind == AdapterKind::lora_prune || kind == AdapterKind::masked_lora; }

struct AdapterOptions {
  std::size_t rank = 16;
  double alpha = 32.0;
  double a_init_std = 0.02;
  /// MultLoRA only: use (1 + BA) * W with B = 0 instead of (BA) * W.
  bool mult_one_plus = false;
};

/// Low-rank factors B [n x r] and A [r x m] bound to one weight W [n x m].
template <class T>
struct AdapterPair {
  AdapterKind kind = AdapterKind::lora;
  Var<T> B;
  Var<T> A;
  std::size_t rank = 0;
  double alpha = 0.0;
  bool one_plus = false;
  std::string weight;
  std::optional<Tensor<T>> mask;

  /// alpha / r for additive kinds, 1 for MultLoRA.
  T scale() const {
    return kind == AdapterKind::mult_lora ? T(1) : static_cast<T>(alpha / static_cast<double>(rank));
  }
};

template <class T>
AdapterPair<T> attach(const Var<T>& w, AdapterKind kind, const AdapterOptions& opts, std::uint64_t seed,
                      const Tensor<T>* mask = nullptr, std::string weight_name = {}) {
  if (w.value().rank() != 2) throw DimensionError("attach: weight must be 2-D, got " + shape_str(w.shape()));
  if (w.requires_grad()) throw ContractError("attach: base weight must be frozen before attaching an adapter");
  if (opts.rank == 0) throw ConfigError("adapter rank must be at least 1");
  if (needs_mask(kind) && !mask) throw ConfigError(to_string(kind) + " requires a mask");
  if (kind == AdapterKind::lora && mask) throw ConfigError("plain LoRA does not take a mask");
  if (mask) require_same_shape(w.value(), *mask, "attach");

  const std::size_t n = w.value().rows(), m = w.value().cols(), r = opts.rank;
  AdapterPair<T> p;
  p.kind = kind;
  p.rank = r;
  p.alpha = opts.alpha;
  p.one_plus = kind == AdapterKind::mult_lora && opts.mult_one_plus;
  p.weight = std::move(weight_name);
  if (mask) p.mask = *mask;

  Tensor<T> b(Shape{n, r}), a(Shape{r, m});
  if (kind == AdapterKind::mult_lora && !p.one_plus) {
    // BA = 1 (all ones) so (BA) * W = W at init.
    const T v = static_cast<T>(1.0 / std::sqrt(static_cast<double>(r)));
    b.fill(v);
    a.fill(v);
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, opts.a_init_std);
    for (auto& x : a.vec()) x = static_cast<T>(dist(rng));
  }
  p.B = Var<T>(std::move(b), true);
  p.A = Var<T>(std::move(a), true);
  return p;
}

/// Dense effective weight of the reparametrization, as a graph node.
/// Plain LoRA and LoRA-Prune train as W + s*BA; that product is only formed
/// here for merging and verification, never in adapter_forward.
template <class T>
Var<T> effective_weight(const AdapterPair<T>& p, const Var<T>& w) {
  require_same_shape(w.value(), Tensor<T>(Shape{p.B.value().rows(), p.A.value().cols()}), "effective_weight");
  Var<T> ba = matmul(p.B, p.A);
  switch (p.kind) {
    case AdapterKind::mult_lora: {
      if (p.one_plus) {
        ba = add(ba, constant(Tensor<T>(ba.shape(), T(1))));
      }
      return mul(ba, w);
    }
    case AdapterKind::masked_lora: {
      if (!p.mask) throw ContractError("MaskedLoRA forward without a mask");
      return add(w, scale(mul(constant(*p.mask), ba), p.scale()));
    }
    case AdapterKind::lora:
    case AdapterKind::lora_prune:
      return add(w, scale(ba, p.scale()));
  }
  throw ContractError("unknown adapter kind");
}

/// x [N x m] -> x * W_eff^T [N x n].
template <class T>
Var<T> adapter_forward(const AdapterPair<T>& p, const Var<T>& w, const Var<T>& x) {
  switch (p.kind) {
    case AdapterKind::lora:
    case AdapterKind::lora_prune:
      // Factor-wise: x W^T + s * (x A^T) B^T.
      return add(linear(x, w), scale(linear(linear(x, p.A), p.B), p.scale()));
    case AdapterKind::mult_lora:
    case AdapterKind::masked_lora:
      return linear(x, effective_weight(p, w));
  }
  throw ContractError("unknown adapter kind");
}

struct MergeReport {
  AdapterKind kind = AdapterKind::lora;
  bool mergeable = false;
  std::string weight;
  std::vector<std::uint8_t> pre_support;   // support of the weight before merging
  std::vector<std::uint8_t> post_support;  // support of the merged weight
  std::size_t probes = 0;
  /// max over probes of max|y_adapter - y_merged| / max|y_adapter|.
  double max_deviation = 0.0;

  std::size_t pre_nonzeros() const;
  std::size_t post_nonzeros() const;
  /// post support is contained in pre support (or in the mask for masked kinds).
  bool support_contained = false;
};

namespace detail {

template <class T>
std::vector<std::uint8_t> support_bytes(const Tensor<T>& w) {
  std::vector<std::uint8_t> s(w.numel());
  for (std::size_t i = 0; i < w.numel(); ++i) s[i] = w[i] != T(0);
  return s;
}

template <class T>
double relative_deviation(const Tensor<T>& ref, const Tensor<T>& got) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    num = std::max(num, std::fabs(static_cast<double>(ref[i]) - static_cast<double>(got[i])));
    den = std::max(den, std::fabs(static_cast<double>(ref[i])));
  }
  return den > 0.0 ? num / den : num;
}

}  // namespace detail

/// Folds the adapter into W. LoRA and LoRA-Prune use W + s*BA (masked for
/// LoRA-Prune); MaskedLoRA uses W + s*(M * BA); MultLoRA uses (BA) * W.
template <class T>
Tensor<T> merged_weight(const AdapterPair<T>& p, const Tensor<T>& w) {
  NoGradGuard guard;
  const Var<T> wv = constant(w);
  if (p.kind == AdapterKind::lora_prune) {
    const Tensor<T> ba = matmul(p.B, p.A).value();
    Tensor<T> out = w;
    const T s = p.scale();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s * ((*p.mask)[i] * ba[i]);
    return out;
  }
  return effective_weight(p, wv).value();
}

/// Merges and measures the forward deviation of the merged plain linear map
/// against the adapter forward on `probes` random inputs. For LoRA-Prune the
/// reference is the unmasked LoRA forward, so the deviation exposes the
/// damage done by masking BA after training.
template <class T>
std::pair<Tensor<T>, MergeReport> merge(const AdapterPair<T>& p, const Tensor<T>& w, std::size_t probes = 10,
                                        std::uint64_t seed = 0) {
  Tensor<T> merged = merged_weight(p, w);
  MergeReport rep;
  rep.kind = p.kind;
  rep.mergeable = is_mergeable(p.kind);
  rep.weight = p.weight;
  rep.pre_support = detail::support_bytes(w);
  rep.post_support = detail::support_bytes(merged);
  const std::vector<std::uint8_t> bound = p.mask ? detail::support_bytes(*p.mask) : rep.pre_support;
  rep.support_contained = true;
  for (std::size_t i = 0; i < bound.size(); ++i) {
    if (rep.post_support[i] && !bound[i]) rep.support_contained = false;
  }

  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const Var<T> wv = constant(w), mv = constant(merged);
  rep.probes = probes;
  for (std::size_t k = 0; k < probes; ++k) {
    Tensor<T> x(Shape{1, w.cols()});
    for (auto& v : x.vec()) v = static_cast<T>(dist(rng));
    const Var<T> xv = constant(std::move(x));
    const Tensor<T> ref = adapter_forward(p, wv, xv).value();
    const Tensor<T> got = linear(xv, mv).value();
    rep.max_deviation = std::max(rep.max_deviation, detail::relative_deviation(ref, got));
  }
  return {std::move(merged), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Model-level helpers.

/// Adapters keyed by the bound weight name.
using AdapterSet = std::map<std::string, AdapterPair<float>>;

/// Freezes every linear weight and attaches one adapter per prunable site.
/// Masks are required for kinds that need them and passed to MultLoRA if present.
AdapterSet attach_adapters(TaggedModel& model, AdapterKind kind, const AdapterOptions& opts, std::uint64_t seed,
                           const MaskSet* masks = nullptr);

/// Forward hooks routing every adapted site through adapter_forward.
ForwardHooks adapter_hooks(const TaggedModel& model, const AdapterSet& adapters);

/// Trainable adapter leaves (B then A per site, in site order).
std::vector<Var<float>> adapter_parameters(const TaggedModel& model, const AdapterSet& adapters);
std::size_t adapter_entry_count(const AdapterSet& adapters);

/// Writes merged weights into the model for every mergeable adapter and returns per-layer reports.
/// Plain LoRA adapters are left unmerged (and reported with mergeable=false).
std::vector<MergeReport> merge_adapters(TaggedModel& model, const AdapterSet& adapters, std::size_t probes = 10);

}  // namespace perp
