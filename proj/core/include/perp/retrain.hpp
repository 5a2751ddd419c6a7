#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "perp/adapters.hpp"
#include "perp/model.hpp"
#include "perp/optim.hpp"
#include "perp/sparsity.hpp"

namespace perp {

struct RetrainRecipe {
  std::set<GroupTag> subset;
  std::optional<AdapterKind> adapter;
  AdapterOptions adapter_opts;
  std::size_t iters = 1000;
  std::vector<double> lr_grid = {5e-6, 1e-5, 5e-5, 1e-4, 5e-4};
  double lr = 1e-4;                    // peak lr for a single retrain() call
  std::optional<std::size_t> warmup;   // default ceil(0.1 * iters)
  std::size_t batch_size = 2;
  std::size_t grad_accum = 4;
  std::size_t seq_len = 0;             // 0 = model context length
  std::size_t val_sequences = 100;
  std::size_t eval_every = 0;          // 0 = max(1, iters / 20)
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t cadence() const { return eval_every ? eval_every : std::max<std::size_t>(1, iters / 20); }
  /// Human-readable method label, e.g. "bias+ln" or "masked-lora".
  std::string label() const;
};

/// Convenience recipes for the standard methods.
RetrainRecipe subset_recipe(std::set<GroupTag> subset);
/// Adapter recipes also train biases and LayerNorm parameters.
RetrainRecipe adapter_recipe(AdapterKind kind, AdapterOptions opts = {});
/// Parses "bias+ln", "masked-lora", "full", "bias+ln+head+masked-lora", ...
RetrainRecipe parse_method(const std::string& method);

struct TrajectoryPoint {
  std::size_t iter = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_ppl = 0.0;
};

struct RetrainResult {
  TaggedModel model;
  AdapterSet adapters;  // non-empty only for plain LoRA, which stays unmerged
  std::vector<TrajectoryPoint> trajectory;
  std::vector<MergeReport> merges;
  double final_val_ppl = 0.0;
  std::size_t steps = 0;
  std::size_t optimizer_floats = 0;
  std::size_t trainable_entries = 0;
  std::size_t tokens_seen = 0;
  double train_seconds = 0.0;
};

/// Fixed validation windows drawn from the stream with a recipe-independent seed.
std::vector<std::vector<std::int32_t>> validation_windows(std::span<const std::int32_t> stream, std::size_t count,
                                                          std::size_t length, std::uint64_t seed = 0x5EED);

/// Perplexity of a retrained result (through adapter hooks when unmerged).
double evaluate(const RetrainResult& r, const std::vector<std::vector<std::int32_t>>& windows);

/// Owns one training run: the model copy, attached adapters, optimizer and
/// mask enforcement. retrain() drives it; benchmarks step it directly.
class TrainingSession {
 public:
  TrainingSession(const TaggedModel& pruned, const MaskSet& masks, const RetrainRecipe& recipe,
                  std::span<const std::int32_t> train);
  TrainingSession(const TrainingSession&) = delete;
  TrainingSession& operator=(const TrainingSession&) = delete;

  /// One optimizer step (grad_accum micro-batches) at the given lr; returns the mean micro-batch loss.
  double step(double lr);
  /// Validation perplexity of the current, unmerged state.
  double validate(const std::vector<std::vector<std::int32_t>>& windows) const;
  /// Merges adapters (except plain LoRA) and hands over the model.
  RetrainResult finish();

  std::size_t seq_len() const noexcept { return seq_; }
  std::size_t tokens_per_step() const noexcept { return recipe_.batch_size * recipe_.grad_accum * seq_; }
  std::size_t optimizer_floats() const noexcept { return opt_->state_floats(); }
  std::size_t trainable_entries() const noexcept { return opt_->trainable_entries(); }

 private:
  RetrainRecipe recipe_;
  std::span<const std::int32_t> train_;
  std::size_t seq_ = 0;
  TaggedModel model_;
  AdapterSet adapters_;
  ForwardHooks hooks_;
  std::unique_ptr<AdamW<float>> opt_;
  std::unique_ptr<MaskEnforcer> enforcer_;
  std::mt19937_64 rng_;
  std::size_t steps_ = 0;
};

/// Retrains a pruned model under the recipe. `masks` may be empty for a dense control run;
/// otherwise every prunable layer needs a mask already applied to its weight.
RetrainResult retrain(const TaggedModel& pruned, const MaskSet& masks, const RetrainRecipe& recipe,
                      std::span<const std::int32_t> train, std::span<const std::int32_t> val);

struct LrTrial {
  double lr = 0.0;
  bool ok = false;
  double final_val_ppl = 0.0;
  std::string error;
};

struct TuneResult {
  double best_lr = 0.0;
  RetrainResult best;
  std::vector<LrTrial> trials;  // one per grid value, in grid order
};

/// One retrain per grid value from the same pruned model and seed, run on up
/// to `workers` threads. Picks the lowest final validation perplexity, ties
/// going to the smaller lr.
TuneResult tune_lr(const TaggedModel& pruned, const MaskSet& masks, const RetrainRecipe& recipe,
                   std::span<const std::int32_t> train, std::span<const std::int32_t> val, std::size_t workers = 1);

struct MemoryAudit {
  std::size_t trainable = 0;
  std::size_t total = 0;         // base model parameters (adapters excluded)
  double fraction = 0.0;         // trainable / total
  std::size_t optimizer_floats = 0;
};

MemoryAudit memory_audit(const TaggedModel& model, const RetrainRecipe& recipe);

void write_trajectory_csv(const std::filesystem::path& path, const std::vector<TrajectoryPoint>& trajectory);

}  // namespace perp
