#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "perp/model.hpp"
#include "perp/sparsity.hpp"
#include "perp/tensor.hpp"

namespace perp {

struct CalibrationSet {
  std::vector<std::vector<std::int32_t>> sequences;
  std::uint64_t seed = 0;

  /// `count` random windows of `length` tokens drawn from stream.
  static CalibrationSet sample(std::span<const std::int32_t> stream, std::size_t count, std::size_t length,
                               std::uint64_t seed);
  std::size_t positions() const;
};

/// Exact inputs of each linear site as [in_features x positions] matrices,
/// in declaration order. When `block` is set only that block's sites are
/// filled; the others are left empty.
std::vector<Tensor<float>> capture_activations(const TaggedModel& model, const CalibrationSet& calib,
                                               std::optional<std::size_t> block = std::nullopt);

/// Euclidean norm of each input feature (row of X) accumulated in 64-bit.
std::vector<double> feature_norms(const Tensor<float>& x);

/// |W_ij| * ||X_j||.
Tensor<float> wanda_scores(const Tensor<float>& w, const Tensor<float>& x);
Tensor<float> wanda_scores(const Tensor<float>& w, std::span<const double> norms);

/// Wanda mask: per-row grouping for unstructured patterns, per-group for N:M.
SparsityMask wanda_mask(const Tensor<float>& w, const Tensor<float>& x, const MaskPattern& pattern,
                        std::string owner = {});

struct SparseGptOptions {
  double damp = 0.01;        // fraction of mean(diag(X X^T)) added to the diagonal
  std::size_t block_size = 8;
};

struct SparseGptResult {
  SparsityMask mask;
  Tensor<float> weight;  // compensated weights, zero outside the mask
};

/// OBS pruning with column-blockwise error propagation through the inverse
/// Hessian's Cholesky factor.
SparseGptResult sparsegpt_prune(const Tensor<float>& w, const Tensor<float>& x, const MaskPattern& pattern,
                                SparseGptOptions opts = {}, std::string owner = {});

enum class Criterion { magnitude, wanda, sparsegpt };

std::string to_string(Criterion c);
Criterion parse_criterion(const std::string& name);

struct PrunedLayer {
  SparsityMask mask;
  Tensor<float> weight;
};

/// Prunes one layer with the chosen criterion. x may be empty for magnitude.
PrunedLayer prune_layer(Criterion criterion, const Tensor<float>& w, const Tensor<float>& x,
                        const MaskPattern& pattern, std::string owner = {});

/// Prunes every prunable layer of the model in one pass. Data-driven
/// criteria capture their inputs from the dense model.
MaskSet prune_model(TaggedModel& model, Criterion criterion, const MaskPattern& pattern,
                    const CalibrationSet* calib = nullptr);

}  // namespace perp
