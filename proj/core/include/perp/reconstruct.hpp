#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "perp/adapters.hpp"
#include "perp/autograd.hpp"
#include "perp/criteria.hpp"
#include "perp/model.hpp"
#include "perp/sparsity.hpp"
#include "perp/tensor.hpp"

namespace perp {

/// min over W_hat of || W X - (M * W_hat) X ||_F^2 for one layer.
class ReconstructionProblem {
 public:
  /// w: original dense weight [n x m]; mask: [n x m]; x: inputs [m x S].
  ReconstructionProblem(Tensor<float> w, Tensor<float> mask, Tensor<float> x);

  const Tensor<float>& weight() const noexcept { return w_; }
  const Tensor<float>& mask() const noexcept { return mask_; }
  const Tensor<float>& inputs() const noexcept { return x_; }
  /// X X^T [m x m], accumulated in 64-bit.
  const Tensor<double>& gram() const noexcept { return gram_; }
  /// Cached target Y = W X [n x S] from the original weight.
  const Tensor<double>& target() const noexcept { return y_; }
  std::size_t rows() const noexcept { return w_.rows(); }
  std::size_t cols() const noexcept { return w_.cols(); }

 private:
  Tensor<float> w_, mask_, x_;
  Tensor<double> gram_, y_;
};

/// Squared Frobenius error of (M * w_hat) X against the target, in 64-bit.
double objective(const ReconstructionProblem& p, const Tensor<float>& w_hat);
double objective(const ReconstructionProblem& p, const Tensor<double>& w_hat);
/// Per-output-row contributions of the objective.
std::vector<double> row_objectives(const ReconstructionProblem& p, const Tensor<double>& w_hat);

/// Differentiable form of the objective, for gradient checks and composition.
template <class T>
Var<T> objective_var(const Tensor<T>& w, const Tensor<T>& mask, const Tensor<T>& x, const Var<T>& w_hat) {
  const Var<T> xv = constant(x);
  const Var<T> target = matmul(constant(w), xv);
  const Var<T> d = sub(target, matmul(mul(constant(mask), w_hat), xv));
  return sum(mul(d, d));
}

struct OracleResult {
  Tensor<double> weight;            // optimal W_hat, zero off-mask
  double objective = 0.0;
  std::vector<double> row_objective;
  std::vector<std::size_t> flagged_rows;  // rank-deficient after damping; minimum-norm solution used
};

/// Exact minimizer: the objective separates by output row into small normal-equation solves.
OracleResult lstsq_oracle(const ReconstructionProblem& p, double damp = 1e-8);

enum class ReconstructMethod { direct, masked_lora };

std::string to_string(ReconstructMethod m);
ReconstructMethod parse_reconstruct_method(const std::string& name);

struct ReconstructOptions {
  ReconstructMethod method = ReconstructMethod::masked_lora;
  std::size_t steps = 500;
  double lr = 1e-3;
  std::size_t rank = 16;
  double alpha = 32.0;
  double a_init_std = 0.02;
  std::uint64_t seed = 0;
};

struct LayerReconstruction {
  Tensor<float> weight;  // merged sparse W_hat, support within the mask
  double obj_initial = 0.0;
  double obj_final = 0.0;
  std::size_t optimizer_floats = 0;
  std::size_t trainable_entries = 0;
};

/// Optimizes from `start` (the pruned weight; M * W when empty) with AdamW on
/// the objective under a linear warmup/decay schedule and returns the best
/// iterate, so obj_final <= obj_initial.
LayerReconstruction reconstruct_layer(const ReconstructionProblem& p, const ReconstructOptions& opts,
                                      const Tensor<float>& start = {});

/// Runs reconstruct_layer for each lr and keeps the lowest final objective (ties to the smaller lr).
LayerReconstruction reconstruct_layer_tuned(const ReconstructionProblem& p, ReconstructOptions opts,
                                            const std::vector<double>& lr_grid, const Tensor<float>& start = {});

struct LayerLog {
  std::string layer;
  std::string criterion;
  std::size_t steps = 0;
  double obj_initial = 0.0;
  double obj_final = 0.0;
  double obj_oracle = 0.0;  // NaN when the oracle was skipped
};

struct SequentialOptions {
  ReconstructOptions layer;
  std::vector<double> lr_grid;  // when non-empty, lr is tuned per layer over this grid
  bool compute_oracle = true;
};

struct SequentialResult {
  TaggedModel model;
  MaskSet masks;
  std::vector<LayerLog> layers;
  std::size_t peak_optimizer_floats = 0;
  std::size_t max_block_trainable = 0;  // largest single block's trainable entries under the method
};

/// Block by block: capture inputs from the current model, prune each linear
/// layer with the criterion, then reconstruct it against the original
/// weights applied to the same inputs. steps = 0 yields the plain pruned model.
SequentialResult sequential_reconstruct(const TaggedModel& dense, const CalibrationSet& calib, Criterion criterion,
                                        const MaskPattern& pattern, const SequentialOptions& opts);

void write_layer_log_csv(const std::filesystem::path& path, const std::vector<LayerLog>& layers);

}  // namespace perp
