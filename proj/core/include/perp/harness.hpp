#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "perp/criteria.hpp"
#include "perp/model.hpp"
#include "perp/reconstruct.hpp"
#include "perp/retrain.hpp"

namespace perp {

// ---------------------------------------------------------------------------
// Corpus

struct CorpusSplits {
  std::vector<std::int32_t> train, val, test;
};

inline constexpr std::size_t kMinCorpusBytes = 64 * 1024;

/// Bytes as tokens, split 90/5/5 into contiguous train/val/test segments.
CorpusSplits split_corpus(std::span<const std::uint8_t> bytes, std::size_t min_bytes = kMinCorpusBytes);
CorpusSplits ingest_corpus(const std::filesystem::path& path, std::size_t min_bytes = kMinCorpusBytes);

/// Deterministic English-like text: a seeded lexicon, Zipf-weighted word
/// bigrams, punctuation and paragraphs. Stands in for a real corpus in CI.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dense pretraining

struct PretrainOptions {
  std::size_t steps = 20000;
  std::size_t batch_size = 4;
  std::size_t grad_accum = 1;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  std::size_t val_sequences = 100;
};

/// Full training of a freshly initialized model (linear warmup/decay, AdamW).
RetrainResult pretrain(const MiniGPTConfig& config, const PretrainOptions& opts, std::span<const std::int32_t> train,
                       std::span<const std::int32_t> val);

// ---------------------------------------------------------------------------
// Experiment configuration

enum class LrTuning { per_cell, per_method };

struct ExperimentConfig {
  MiniGPTConfig model;
  std::string corpus;                   // path to a byte corpus; empty = synthetic
  std::size_t synthetic_bytes = 1 << 20;
  std::uint64_t synthetic_seed = 0;
  PretrainOptions pretrain;
  std::string dense_checkpoint;         // reused when present, written after pretraining otherwise

  std::vector<double> sparsities = {0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<std::string> patterns = {"unstructured", "2:4", "4:8"};
  Criterion criterion = Criterion::magnitude;
  /// "none", a retrain method ("bias+ln", "bias+ln+masked-lora", "full", ...),
  /// or "recon:direct" / "recon:masked-lora" for sequential reconstruction.
  std::vector<std::string> methods = {"none", "bias+ln", "bias+ln+masked-lora"};
  bool ablation = false;                // adds the 31 non-empty subsets of {bias, ln, head, embedding, masked-lora}

  std::size_t iters = 1000;
  std::vector<double> lr_grid = {5e-6, 1e-5, 5e-5, 1e-4, 5e-4};
  LrTuning lr_tuning = LrTuning::per_cell;
  std::size_t batch_size = 2;
  std::size_t grad_accum = 4;
  std::size_t rank = 16;
  double alpha = 32.0;
  std::size_t val_sequences = 100;

  std::size_t calib_sequences = 128;
  std::size_t recon_steps = 500;
  std::vector<double> recon_lr_grid = {1e-4, 5e-4};
  std::size_t recon_rank = 16;
  double recon_alpha = 32.0;

  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string output_dir = "perp-out";
  std::size_t eval_tokens = 16384;      // test tokens evaluated per cell (0 = whole split)
  std::size_t workers = 1;
  bool save_checkpoints = true;

  void validate() const;
  /// Parses JSON; unknown keys are rejected.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_json() const;
  /// Methods actually run (configured list plus the ablation power set).
  std::vector<std::string> effective_methods() const;
};

/// PERP_WORKERS from the environment, else `fallback`.
std::size_t worker_limit(std::size_t fallback = 1);

// ---------------------------------------------------------------------------
// Grid and report

struct CellKey {
  std::string pattern;
  double sparsity = 0.0;
  std::string method;
  std::uint64_t seed = 0;
  bool operator==(const CellKey&) const = default;
};

struct CellResult {
  CellKey key;
  bool ok = false;
  std::string error;
  double test_ppl = 0.0;
  double trainable_fraction = 0.0;
  std::size_t optimizer_floats = 0;
  double tokens_per_sec = 0.0;
  double lr = 0.0;
  std::string trajectory;  // path of the trajectory CSV, if any
  bool operator==(const CellResult&) const = default;
};

struct AggregateRow {
  std::string pattern;
  double sparsity = 0.0;
  std::string method;
  double mean_test_ppl = 0.0;  // over successful seeds
  std::size_t seeds = 0;
  std::size_t failed = 0;
  double trainable_fraction = 0.0;
};

struct ExperimentReport {
  double dense_test_ppl = 0.0;
  std::vector<CellResult> cells;

  std::vector<AggregateRow> aggregates() const;
  bool operator==(const ExperimentReport&) const = default;
};

/// Every (pattern, sparsity, method, seed) the config asks for, in run order.
std::vector<CellKey> expected_cells(const ExperimentConfig& config);

/// Label used in tables for a pattern name and sparsity ("unstructured", "2:4").
MaskPattern cell_pattern(const std::string& pattern, double sparsity);

/// Runs every cell. Failures are recorded per cell and the grid continues.
ExperimentReport run_grid(const ExperimentConfig& config, const TaggedModel& dense, const CorpusSplits& corpus);
/// Loads the corpus and dense checkpoint (pretraining and saving it when missing), then runs the grid.
ExperimentReport run_grid(const ExperimentConfig& config);

std::string report_to_csv(const ExperimentReport& report);
ExperimentReport report_from_csv(const std::string& text);

enum class TableFormat { csv, markdown };

/// One table per pattern (rows = methods with a % trainable column, columns =
/// sparsities) plus the per-cell report and aggregate CSVs. Throws listing
/// missing cells when the report does not cover `expected`.
std::vector<std::filesystem::path> emit_tables(const ExperimentReport& report, const std::vector<CellKey>& expected,
                                               TableFormat format, const std::filesystem::path& dir);

/// Renders the table for one pattern without touching the filesystem.
std::string render_table(const ExperimentReport& report, const std::string& pattern, TableFormat format);

// ---------------------------------------------------------------------------
// Throughput

struct ThroughputResult {
  double tokens_per_sec = 0.0;
  std::size_t steps = 0;
  double seconds = 0.0;
  MemoryAudit audit;
};

/// Trains for at least `seconds` after `warmup_steps` and reports tokens/s.
/// Durations under 5 s are rejected as too noisy.
ThroughputResult bench_throughput(const TaggedModel& model, const MaskSet& masks, const RetrainRecipe& recipe,
                                  std::span<const std::int32_t> train, double seconds, std::size_t warmup_steps = 3);

}  // namespace perp
