// perp: command-line front end for pruning, retraining, reconstruction and experiment grids.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

#include "perp/checkpoint.hpp"
#include "perp/criteria.hpp"
#include "perp/harness.hpp"
#include "perp/reconstruct.hpp"
#include "perp/retrain.hpp"

namespace {

using namespace perp;

struct CorpusArgs {
  std::string path;
  std::size_t synthetic_bytes = 1 << 20;
  std::uint64_t synthetic_seed = 0;

  void add(CLI::App* app) {
    app->add_option("--corpus", path, "Byte corpus file (default: synthetic text)")->check(CLI::ExistingFile);
    app->add_option("--synthetic-bytes", synthetic_bytes, "Size of the generated corpus");
    app->add_option("--synthetic-seed", synthetic_seed, "Seed of the generated corpus");
  }
  CorpusSplits load() const {
    if (!path.empty()) return ingest_corpus(path);
    const std::string text = synthetic_corpus(synthetic_bytes, synthetic_seed);
    return split_corpus(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RetrainRecipe recipe_from(const std::string& method, std::size_t iters, std::size_t batch, std::size_t accum,
                          std::size_t rank, double alpha, std::uint64_t seed) {
  RetrainRecipe r = parse_method(method);
  r.iters = iters;
  r.batch_size = batch;
  r.grad_accum = accum;
  r.adapter_opts.rank = rank;
  r.adapter_opts.alpha = alpha;
  r.seed = seed;
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prune, retrain and reconstruct miniature GPT models"};
  app.require_subcommand(1);

  // pretrain ---------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Train a dense model from scratch");
  CorpusArgs pre_corpus;
  pre_corpus.add(pre);
  MiniGPTConfig model_cfg;
  PretrainOptions pre_opts;
  std::string pre_out = "dense.perp", pre_traj;
  pre->add_option("--d-model", model_cfg.d_model);
  pre->add_option("--n-heads", model_cfg.n_heads);
  pre->add_option("--n-layers", model_cfg.n_layers);
  pre->add_option("--d-ff", model_cfg.d_ff);
  pre->add_option("--context", model_cfg.context_length);
  pre->add_option("--model-seed", model_cfg.seed);
  pre->add_option("--steps", pre_opts.steps);
  pre->add_option("--batch-size", pre_opts.batch_size);
  pre->add_option("--grad-accum", pre_opts.grad_accum);
  pre->add_option("--lr", pre_opts.lr);
  pre->add_option("--seed", pre_opts.seed);
  pre->add_option("-o,--out", pre_out, "Checkpoint to write");
  pre->add_option("--trajectory", pre_traj, "Trajectory CSV to write");

  // prune ------------------------------------------------------------------
  auto* prune = app.add_subcommand("prune", "One-shot prune a dense checkpoint");
  CorpusArgs prune_corpus;
  prune_corpus.add(prune);
  std::string prune_in, prune_out = "pruned.perp", prune_criterion = "magnitude", prune_pattern = "0.5";
  std::size_t calib_n = 128;
  std::uint64_t prune_seed = 0;
  prune->add_option("checkpoint", prune_in)->required()->check(CLI::ExistingFile);
  prune->add_option("--criterion", prune_criterion, "magnitude | wanda | sparsegpt");
  prune->add_option("--pattern", prune_pattern, "Sparsity (0.5), unstructured:0.5, 2:4 or 4:8");
  prune->add_option("--calib", calib_n, "Calibration sequences");
  prune->add_option("--seed", prune_seed);
  prune->add_option("-o,--out", prune_out);

  // retrain ----------------------------------------------------------------
  auto* ret = app.add_subcommand("retrain", "Retrain a pruned checkpoint");
  CorpusArgs ret_corpus;
  ret_corpus.add(ret);
  std::string ret_in, ret_out = "retrained.perp", ret_method = "bias+ln", ret_traj;
  std::size_t ret_iters = 1000, ret_batch = 2, ret_accum = 4, ret_rank = 16;
  double ret_alpha = 32.0;
  std::optional<double> ret_lr;
  std::vector<double> ret_grid = {5e-6, 1e-5, 5e-5, 1e-4, 5e-4};
  std::uint64_t ret_seed = 0;
  ret->add_option("checkpoint", ret_in)->required()->check(CLI::ExistingFile);
  ret->add_option("--method", ret_method, "e.g. bias+ln, full, bias+ln+masked-lora, mult-lora");
  ret->add_option("--iters", ret_iters);
  ret->add_option("--batch-size", ret_batch);
  ret->add_option("--grad-accum", ret_accum);
  ret->add_option("--rank", ret_rank);
  ret->add_option("--alpha", ret_alpha);
  ret->add_option("--lr", ret_lr, "Fixed peak lr (otherwise the grid is tuned)");
  ret->add_option("--lr-grid", ret_grid);
  ret->add_option("--seed", ret_seed);
  ret->add_option("-o,--out", ret_out);
  ret->add_option("--trajectory", ret_traj);

  // reconstruct ------------------------------------------------------------
  auto* rec = app.add_subcommand("reconstruct", "Prune and reconstruct a dense checkpoint layer by layer");
  CorpusArgs rec_corpus;
  rec_corpus.add(rec);
  std::string rec_in, rec_out = "reconstructed.perp", rec_criterion = "magnitude", rec_pattern = "0.5",
                      rec_method = "masked-lora", rec_log;
  SequentialOptions rec_opts;
  std::size_t rec_calib = 128;
  std::uint64_t rec_seed = 0;
  rec->add_option("checkpoint", rec_in)->required()->check(CLI::ExistingFile);
  rec->add_option("--criterion", rec_criterion);
  rec->add_option("--pattern", rec_pattern);
  rec->add_option("--method", rec_method, "direct | masked-lora");
  rec->add_option("--steps", rec_opts.layer.steps);
  rec->add_option("--lr", rec_opts.layer.lr);
  rec->add_option("--lr-grid", rec_opts.lr_grid, "Tune the lr per layer over these values");
  rec->add_option("--rank", rec_opts.layer.rank);
  rec->add_option("--alpha", rec_opts.layer.alpha);
  rec->add_option("--calib", rec_calib);
  rec->add_option("--seed", rec_seed);
  rec->add_flag("--oracle,!--no-oracle", rec_opts.compute_oracle, "Log the least-squares optimum per layer");
  rec->add_option("-o,--out", rec_out);
  rec->add_option("--log", rec_log, "Per-layer objective CSV");

  // eval -------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Perplexity of a checkpoint on the validation and test splits");
  CorpusArgs ev_corpus;
  ev_corpus.add(ev);
  std::string ev_in;
  ev->add_option("checkpoint", ev_in)->required()->check(CLI::ExistingFile);

  // grid -------------------------------------------------------------------
  auto* grid = app.add_subcommand("grid", "Run an experiment grid from a JSON config");
  std::string grid_cfg, grid_out;
  std::optional<std::size_t> grid_workers;
  grid->add_option("config", grid_cfg)->required()->check(CLI::ExistingFile);
  grid->add_option("--output-dir", grid_out);
  grid->add_option("--workers", grid_workers, "Concurrent cells (default: PERP_WORKERS or config)");

  // bench ------------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "Measure retraining throughput in tokens per second");
  CorpusArgs bench_corpus;
  bench_corpus.add(bench);
  std::string bench_in, bench_method = "bias+ln";
  double bench_seconds = 10.0, bench_lr = 1e-4;
  std::size_t bench_batch = 2, bench_accum = 4, bench_rank = 16;
  bench->add_option("checkpoint", bench_in)->required()->check(CLI::ExistingFile);
  bench->add_option("--method", bench_method);
  bench->add_option("--seconds", bench_seconds);
  bench->add_option("--lr", bench_lr);
  bench->add_option("--batch-size", bench_batch);
  bench->add_option("--grad-accum", bench_accum);
  bench->add_option("--rank", bench_rank);

  CLI11_PARSE(app, argc, argv);

  try {
    const auto t0 = std::chrono::steady_clock::now();
    if (*pre) {
      const CorpusSplits c = pre_corpus.load();
      RetrainResult r = pretrain(model_cfg, pre_opts, c.train, c.val);
      save_checkpoint(pre_out, Checkpoint{r.model, {}, {}});
      if (!pre_traj.empty()) write_trajectory_csv(pre_traj, r.trajectory);
      std::printf("params %zu  val_ppl %.4f  test_ppl %.4f  (%.1f s)\n", r.model.parameter_count(), r.final_val_ppl,
                  perplexity(r.model, c.test), elapsed(t0));
    } else if (*prune) {
      Checkpoint ck = load_checkpoint(prune_in);
      const Criterion crit = parse_criterion(prune_criterion);
      const MaskPattern pattern = parse_pattern(prune_pattern);
      std::optional<CalibrationSet> calib;
      if (crit != Criterion::magnitude) {
        const CorpusSplits c = prune_corpus.load();
        calib = CalibrationSet::sample(c.train, calib_n, ck.model.config().context_length, prune_seed);
      }
      ck.masks = prune_model(ck.model, crit, pattern, calib ? &*calib : nullptr);
      save_checkpoint(prune_out, ck);
      std::printf("pruned %zu layers to %s with %s -> %s\n", ck.masks.size(), pattern_name(pattern).c_str(),
                  prune_criterion.c_str(), prune_out.c_str());
    } else if (*ret) {
      const CorpusSplits c = ret_corpus.load();
      Checkpoint ck = load_checkpoint(ret_in);
      RetrainRecipe r = recipe_from(ret_method, ret_iters, ret_batch, ret_accum, ret_rank, ret_alpha, ret_seed);
      r.lr_grid = ret_grid;
      RetrainResult res;
      if (ret_lr) {
        r.lr = *ret_lr;
        res = retrain(ck.model, ck.masks, r, c.train, c.val);
      } else {
        TuneResult t = tune_lr(ck.model, ck.masks, r, c.train, c.val, worker_limit());
        for (const auto& trial : t.trials) {
          std::printf("lr %-8g %s\n", trial.lr,
                      trial.ok ? ("val_ppl " + std::to_string(trial.final_val_ppl)).c_str() : trial.error.c_str());
        }
        r.lr = t.best_lr;
        res = std::move(t.best);
      }
      const MemoryAudit audit = memory_audit(ck.model, r);
      save_checkpoint(ret_out, Checkpoint{res.model, ck.masks, res.adapters});
      if (!ret_traj.empty()) write_trajectory_csv(ret_traj, res.trajectory);
      std::printf("%s lr %g  val_ppl %.4f  trainable %.4f%%  optimizer floats %zu  (%.1f s)\n", r.label().c_str(), r.lr,
                  res.final_val_ppl, audit.fraction * 100.0, res.optimizer_floats, elapsed(t0));
    } else if (*rec) {
      const CorpusSplits c = rec_corpus.load();
      const Checkpoint ck = load_checkpoint(rec_in);
      rec_opts.layer.method = parse_reconstruct_method(rec_method);
      rec_opts.layer.seed = rec_seed;
      const CalibrationSet calib = CalibrationSet::sample(c.train, rec_calib, ck.model.config().context_length, rec_seed);
      SequentialResult sr = sequential_reconstruct(ck.model, calib, parse_criterion(rec_criterion),
                                                   parse_pattern(rec_pattern), rec_opts);
      for (const auto& l : sr.layers) {
        std::printf("%-28s initial %.6g  final %.6g  oracle %.6g\n", l.layer.c_str(), l.obj_initial, l.obj_final,
                    l.obj_oracle);
      }
      if (!rec_log.empty()) write_layer_log_csv(rec_log, sr.layers);
      save_checkpoint(rec_out, Checkpoint{sr.model, sr.masks, {}});
      std::printf("val_ppl %.4f  peak optimizer floats %zu  (%.1f s)\n",
                  perplexity(sr.model, validation_windows(c.val, 100, sr.model.config().context_length)),
                  sr.peak_optimizer_floats, elapsed(t0));
    } else if (*ev) {
      const CorpusSplits c = ev_corpus.load();
      const Checkpoint ck = load_checkpoint(ev_in);
      RetrainResult wrapped;
      wrapped.model = ck.model;
      wrapped.adapters = ck.adapters;
      std::printf("val_ppl %.4f  test_ppl %.4f\n",
                  evaluate(wrapped, validation_windows(c.val, 100, ck.model.config().context_length)),
                  [&] {
                    if (ck.adapters.empty()) return perplexity(ck.model, c.test);
                    const ForwardHooks h = adapter_hooks(ck.model, ck.adapters);
                    return perplexity(ck.model, c.test, &h);
                  }());
    } else if (*grid) {
      ExperimentConfig cfg = ExperimentConfig::load(grid_cfg);
      if (!grid_out.empty()) cfg.output_dir = grid_out;
      cfg.workers = grid_workers ? *grid_workers : worker_limit(cfg.workers);
      const ExperimentReport report = run_grid(cfg);
      std::cout << render_table(report, cfg.patterns.front(), TableFormat::markdown);
      std::size_t failed = 0;
      for (const auto& cell : report.cells) failed += !cell.ok;
      std::printf("dense test ppl %.4f; %zu cells, %zu failed; tables in %s (%.1f s)\n", report.dense_test_ppl,
                  report.cells.size(), failed, cfg.output_dir.c_str(), elapsed(t0));
      return failed ? 2 : 0;
    } else if (*bench) {
      const CorpusSplits c = bench_corpus.load();
      const Checkpoint ck = load_checkpoint(bench_in);
      RetrainRecipe r = recipe_from(bench_method, 1, bench_batch, bench_accum, bench_rank, 32.0, 0);
      r.lr = bench_lr;
      const ThroughputResult t = bench_throughput(ck.model, ck.masks, r, c.train, bench_seconds);
      std::printf("%s: %.1f tokens/s over %zu steps (%.1f s); trainable %zu (%.4f%%), optimizer floats %zu\n",
                  r.label().c_str(), t.tokens_per_sec, t.steps, t.seconds, t.audit.trainable, t.audit.fraction * 100.0,
                  t.audit.optimizer_floats);
    }
  } catch (const perp::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
