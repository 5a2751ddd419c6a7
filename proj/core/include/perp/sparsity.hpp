#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "perp/autograd.hpp"
#include "perp/model.hpp"
#include "perp/optim.hpp"
#include "perp/tensor.hpp"

namespace perp {

struct Unstructured {
  double sparsity = 0.0;  // fraction of zeros, in [0, 1)
  bool operator==(const Unstructured&) const = default;
};

/// Keep exactly n of every m consecutive entries along each row (the input dimension).
struct SemiStructured {
  std::size_t n = 2;
  std::size_t m = 4;
  bool operator==(const SemiStructured&) const = default;
};

using MaskPattern = std::variant<Unstructured, SemiStructured>;

void validate_pattern(const MaskPattern& pattern);
std::string pattern_name(const MaskPattern& pattern);
/// Parses "unstructured:0.5", "0.5", "2:4", "4:8".
MaskPattern parse_pattern(const std::string& text);
/// Nominal sparsity of the pattern: s, or 1 - n/m.
double pattern_sparsity(const MaskPattern& pattern);

/// Which entries compete for the kept slots under an unstructured pattern.
enum class MaskGrouping {
  per_tensor,        // uniform per-layer sparsity
  per_row,           // every output row keeps the same fraction
};

struct SparsityMask {
  Tensor<float> bits;  // entries in {0, 1}, same shape as the owning weight
  MaskPattern pattern;
  std::string owner;
};

/// |W| entrywise.
Tensor<float> magnitude_scores(const Tensor<float>& w);

/// Keeps the highest scores under the pattern; ties keep the lower flat index.
SparsityMask build_mask(const Tensor<float>& scores, const MaskPattern& pattern,
                        MaskGrouping grouping = MaskGrouping::per_tensor, std::string owner = {});

template <class T>
Tensor<T> apply_mask(const Tensor<T>& w, const Tensor<T>& mask) {
  require_same_shape(w, mask, "apply_mask");
  Tensor<T> out = w;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  return out;
}

inline Tensor<float> apply_mask(const Tensor<float>& w, const SparsityMask& mask) { return apply_mask(w, mask.bits); }

/// Fraction of zeros; the tensor must be binary.
double sparsity_of(const Tensor<float>& mask);

/// Binary support indicator of a tensor (1 where nonzero).
Tensor<float> support_of(const Tensor<float>& w);

/// True when every group of m consecutive row entries has exactly n ones.
bool satisfies_n_m(const Tensor<float>& mask, std::size_t n, std::size_t m);

/// Re-applies registered masks after every optimizer step.
class MaskEnforcer : public StepHook {
 public:
  void register_mask(Var<float> param, const SparsityMask& mask);
  bool is_registered(const Var<float>& param) const;
  std::size_t size() const noexcept { return entries_.size(); }

  /// param <- param * M for every registration.
  void enforce();
  void after_step() override { enforce(); }

 private:
  struct Entry {
    Var<float> param;
    Tensor<float> bits;
  };
  std::vector<Entry> entries_;
};

/// Masks keyed by weight name.
using MaskSet = std::map<std::string, SparsityMask>;

/// Magnitude masks for every prunable linear weight (uniform per-layer).
MaskSet magnitude_masks(const TaggedModel& model, const MaskPattern& pattern);

/// Writes W <- W * M for every mask into the model.
void apply_masks(TaggedModel& model, const MaskSet& masks);

}  // namespace perp
