#include "perp/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace perp {

void validate_pattern(const MaskPattern& pattern) {
  if (const auto* u = std::get_if<Unstructured>(&pattern)) {
    if (!(u->sparsity >= 0.0 && u->sparsity < 1.0)) {
      throw PatternError("unstructured sparsity must lie in [0, 1), got " + std::to_string(u->sparsity));
    }
    return;
  }
  const auto& s = std::get<SemiStructured>(pattern);
  if (!(s.n > 0 && s.n < s.m)) {
    throw PatternError("N:M pattern needs 0 < n < m, got " + std::to_string(s.n) + ":" + std::to_string(s.m));
  }
}

std::string pattern_name(const MaskPattern& pattern) {
  if (const auto* u = std::get_if<Unstructured>(&pattern)) {
    std::ostringstream os;
    os << "unstructured:" << u->sparsity;
    return os.str();
  }
  const auto& s = std::get<SemiStructured>(pattern);
  return std::to_string(s.n) + ":" + std::to_string(s.m);
}

MaskPattern parse_pattern(const std::string& text) {
  MaskPattern out;
  try {
    if (text.rfind("unstructured:", 0) == 0) {
      out = Unstructured{std::stod(text.substr(13))};
    } else if (auto colon = text.find(':'); colon != std::string::npos) {
      out = SemiStructured{std::stoul(text.substr(0, colon)), std::stoul(text.substr(colon + 1))};
    } else {
      out = Unstructured{std::stod(text)};
    }
  } catch (const std::logic_error&) {
    throw PatternError("cannot parse sparsity pattern '" + text + "'");
  }
  validate_pattern(out);
  return out;
}

double pattern_sparsity(const MaskPattern& pattern) {
  if (const auto* u = std::get_if<Unstructured>(&pattern)) return u->sparsity;
  const auto& s = std::get<SemiStructured>(pattern);
  return 1.0 - static_cast<double>(s.n) / static_cast<double>(s.m);
}

Tensor<float> magnitude_scores(const Tensor<float>& w) {
  if (w.rank() != 2) throw DimensionError("magnitude_scores expects a 2-D weight, got " + shape_str(w.shape()));
  Tensor<float> out = w;
  for (auto& v : out.vec()) v = std::fabs(v);
  return out;
}

namespace {

// Marks the `keep` best entries among idx (by score desc, then index asc).
void keep_top(const Tensor<float>& scores, std::vector<std::size_t>& idx, std::size_t keep, Tensor<float>& bits) {
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (keep < idx.size()) {
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), better);
  }
  for (std::size_t i = 0; i < std::min(keep, idx.size()); ++i) bits[idx[i]] = 1.0f;
}

}  // namespace

SparsityMask build_mask(const Tensor<float>& scores, const MaskPattern& pattern, MaskGrouping grouping,
                        std::string owner) {
  validate_pattern(pattern);
  if (scores.rank() != 2) throw DimensionError("build_mask expects 2-D scores, got " + shape_str(scores.shape()));
  for (float v : scores.vec()) {
    if (!std::isfinite(v)) throw ContractError("build_mask: scores must be finite");
  }
  const std::size_t rows = scores.rows(), cols = scores.cols();
  SparsityMask mask{Tensor<float>(scores.shape(), 0.0f), pattern, std::move(owner)};

  if (const auto* u = std::get_if<Unstructured>(&pattern)) {
    if (grouping == MaskGrouping::per_tensor) {
      const auto zeros = static_cast<std::size_t>(std::llround(u->sparsity * static_cast<double>(scores.numel())));
      std::vector<std::size_t> idx(scores.numel());
      std::iota(idx.begin(), idx.end(), 0);
      keep_top(scores, idx, scores.numel() - zeros, mask.bits);
    } else {
      const auto zeros = static_cast<std::size_t>(std::llround(u->sparsity * static_cast<double>(cols)));
      std::vector<std::size_t> idx(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        std::iota(idx.begin(), idx.end(), r * cols);
        keep_top(scores, idx, cols - zeros, mask.bits);
      }
    }
    return mask;
  }

  const auto& nm = std::get<SemiStructured>(pattern);
  if (cols % nm.m != 0) {
    throw PatternError("N:M pattern " + pattern_name(pattern) + " needs the input dimension (" +
                       std::to_string(cols) + ") divisible by " + std::to_string(nm.m));
  }
  std::vector<std::size_t> idx(nm.m);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < cols; g += nm.m) {
      std::iota(idx.begin(), idx.end(), r * cols + g);
      keep_top(scores, idx, nm.n, mask.bits);
    }
  }
  return mask;
}

double sparsity_of(const Tensor<float>& mask) {
  if (mask.empty()) throw ContractError("sparsity_of: empty mask");
  std::size_t zeros = 0;
  for (float v : mask.vec()) {
    if (v == 0.0f) {
      ++zeros;
    } else if (v != 1.0f) {
      throw ContractError("sparsity_of: mask entries must be 0 or 1");
    }
  }
  return static_cast<double>(zeros) / static_cast<double>(mask.numel());
}

Tensor<float> support_of(const Tensor<float>& w) {
  Tensor<float> out(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) out[i] = w[i] != 0.0f ? 1.0f : 0.0f;
  return out;
}

bool satisfies_n_m(const Tensor<float>& mask, std::size_t n, std::size_t m) {
  if (mask.rank() != 2 || mask.cols() % m != 0) return false;
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    for (std::size_t g = 0; g < mask.cols(); g += m) {
      std::size_t ones = 0;
      for (std::size_t j = 0; j < m; ++j) {
        const float v = mask(r, g + j);
        if (v != 0.0f && v != 1.0f) return false;
        ones += v == 1.0f;
      }
      if (ones != n) return false;
    }
  }
  return true;
}

void MaskEnforcer::register_mask(Var<float> param, const SparsityMask& mask) {
  if (is_registered(param)) throw ContractError("mask already registered for this parameter");
  require_same_shape(param.value(), mask.bits, "enforce_mask");
  entries_.push_back(Entry{std::move(param), mask.bits});
}

bool MaskEnforcer::is_registered(const Var<float>& param) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.param.same_node(param); });
}

void MaskEnforcer::enforce() {
  for (auto& e : entries_) {
    auto& w = e.param.mutable_value();
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] *= e.bits[i];
  }
}

MaskSet magnitude_masks(const TaggedModel& model, const MaskPattern& pattern) {
  MaskSet masks;
  for (const auto& site : model.linear_sites()) {
    const auto& w = model.param(site.weight).var.value();
    masks.emplace(site.weight, build_mask(magnitude_scores(w), pattern, MaskGrouping::per_tensor, site.weight));
  }
  return masks;
}

void apply_masks(TaggedModel& model, const MaskSet& masks) {
  for (const auto& [name, mask] : masks) {
    auto& w = model.param(name).var.mutable_value();
    w = apply_mask(w, mask.bits);
  }
}

}  // namespace perp
