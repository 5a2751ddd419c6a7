// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   perp_acceptance [--only 1,2,...] [--workdir DIR]
//
// Criteria 8 and 9 need a pretrained dense model; it is cached in the workdir
// (default: current directory) and trained on first use.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "perp/adapters.hpp"
#include "perp/checkpoint.hpp"
#include "perp/criteria.hpp"
#include "perp/harness.hpp"
#include "perp/model.hpp"
#include "perp/optim.hpp"
#include "perp/reconstruct.hpp"
#include "perp/retrain.hpp"
#include "perp/sparsity.hpp"
#include "support.hpp"

using namespace perp;
namespace fs = std::filesystem;
using perp::test::fd_relative_error;
using perp::test::random_projection;
using perp::test::random_tensor;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and sizes.

constexpr double kMergeDeviation = 1e-5;          // 1
constexpr double kLoraPruneDeviation = 1e-3;      // 3
constexpr double kFdTolerance = 1e-4;             // 4
constexpr double kFdStep = 1e-4;                  // 4
constexpr int kFdInstances = 20;                  // 4
constexpr double kDirectSlack = 1.05;             // 6
constexpr double kMaskedLoraR8Slack = 1.05;       // 6
constexpr double kMaskedLoraR2Slack = 1.25;       // 6
constexpr double kKeptWeightTolerance = 1e-8;     // 7b
constexpr double kTinyLayerSlack = 1.10;          // 7c
constexpr double kDamageFactor = 2.0;             // 8
constexpr double kBiasLnBudget = 0.005;           // 10

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared fixtures.

MiniGPTConfig small_config() {
  MiniGPTConfig c;
  c.context_length = 16;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 64;
  return c;
}

const CorpusSplits& small_corpus() {
  static const CorpusSplits splits = [] {
    const std::string text = synthetic_corpus(200000, 7);
    return split_corpus(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }();
  return splits;
}

TaggedModel small_trained(std::uint64_t seed = 0) {
  PretrainOptions o;
  o.steps = 300;
  o.batch_size = 8;
  o.lr = 3e-3;
  o.seed = seed;
  o.val_sequences = 20;
  return pretrain(small_config(), o, small_corpus().train, small_corpus().val).model;
}

TokenBatch sample_batch(std::span<const std::int32_t> stream, std::size_t rows, std::size_t len, std::mt19937_64& rng) {
  TokenBatch b{rows, len, {}};
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t s = rng() % (stream.size() - len);
    b.tokens.insert(b.tokens.end(), stream.begin() + static_cast<std::ptrdiff_t>(s),
                    stream.begin() + static_cast<std::ptrdiff_t>(s + len));
  }
  return b;
}

// Exactly orthonormal rows in float: signed rows of a 16x16 Hadamard matrix scaled by 1/4,
// with a random row choice and column permutation.
Tensor<float> hadamard_inputs(std::size_t m, std::mt19937_64& rng) {
  constexpr std::size_t S = 16;
  std::vector<std::size_t> rows(S), cols(S);
  for (std::size_t i = 0; i < S; ++i) rows[i] = cols[i] = i;
  std::shuffle(rows.begin(), rows.end(), rng);
  std::shuffle(cols.begin(), cols.end(), rng);
  Tensor<float> x(Shape{m, S});
  for (std::size_t j = 0; j < m; ++j) {
    const float sign = (rng() & 1) ? 1.0f : -1.0f;
    for (std::size_t s = 0; s < S; ++s) {
      const int parity = __builtin_popcount(static_cast<unsigned>(rows[j] & cols[s])) & 1;
      x(j, s) = sign * (parity ? -0.25f : 0.25f);
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// 1. Merge exactness after retraining.

Outcome merge_exactness() {
  const TaggedModel dense = small_trained();
  const auto& corpus = small_corpus();
  double worst = 0.0;
  bool contained = true;
  std::ostringstream os;
  for (AdapterKind kind : {AdapterKind::masked_lora, AdapterKind::mult_lora}) {
    TaggedModel model = dense.clone();
    MaskSet masks = magnitude_masks(model, Unstructured{0.5});
    apply_masks(model, masks);
    AdapterOptions ao;
    ao.rank = 4;
    ao.alpha = 8.0;
    AdapterSet adapters = attach_adapters(model, kind, ao, 1, &masks);
    const ForwardHooks hooks = adapter_hooks(model, adapters);
    AdamW<float> opt(adapter_parameters(model, adapters));
    std::mt19937_64 rng(3);
    const std::size_t len = model.config().context_length + 1;
    for (int step = 0; step < 120; ++step) {
      opt.zero_grad();
      backward(forward_loss(model, sample_batch(corpus.train, 4, len, rng), &hooks));
      opt.step(3e-3);
    }

    std::vector<TokenBatch> probes;
    std::vector<Tensor<float>> before;
    {
      NoGradGuard g;
      for (int p = 0; p < 100; ++p) {
        probes.push_back(sample_batch(corpus.test, 1, model.config().context_length, rng));
        before.push_back(forward_logits(model, probes.back(), &hooks).value());
      }
    }
    merge_adapters(model, adapters);
    double dev = 0.0;
    {
      NoGradGuard g;
      for (std::size_t p = 0; p < probes.size(); ++p) {
        const Tensor<float> after = forward_logits(model, probes[p]).value();
        dev = std::max(dev, detail::relative_deviation(before[p], after));
      }
    }
    for (const auto& [name, mask] : masks) {
      const auto& w = model.param(name).var.value();
      for (std::size_t i = 0; i < w.numel(); ++i) {
        if (mask.bits[i] == 0.0f && w[i] != 0.0f) contained = false;
      }
    }
    worst = std::max(worst, dev);
    os << to_string(kind) << " dev " << fmt("%.2e", dev) << "; ";
  }
  os << "support contained: " << (contained ? "yes" : "no");
  return {worst < kMergeDeviation && contained, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Init identity for every adapter kind.

Outcome init_identity() {
  std::mt19937_64 rng(2);
  const auto w0 = random_tensor<float>({32, 48}, rng);
  const auto mask = build_mask(magnitude_scores(w0), Unstructured{0.5}).bits;
  const Var<float> w(apply_mask(w0, mask));
  bool ok = true;
  double mult_dev = 0.0;
  for (AdapterKind kind : {AdapterKind::lora, AdapterKind::lora_prune, AdapterKind::mult_lora, AdapterKind::masked_lora}) {
    AdapterOptions o;
    o.rank = 16;
    const auto p = attach(w, kind, o, 5, needs_mask(kind) ? &mask : nullptr);
    NoGradGuard g;
    for (int probe = 0; probe < 10; ++probe) {
      const auto x = constant(random_tensor<float>({1, 48}, rng));
      const auto ref = linear(x, w).value();
      const auto got = adapter_forward(p, w, x).value();
      if (kind == AdapterKind::mult_lora) {
        mult_dev = std::max(mult_dev, perp::test::max_rel_diff(ref, got));
      } else if (!(ref == got)) {
        ok = false;
      }
    }
  }
  return {ok && mult_dev <= 1e-6,
          std::string("additive kinds exact: ") + (ok ? "yes" : "no") + "; mult-lora rel dev " + fmt("%.2e", mult_dev)};
}

// ---------------------------------------------------------------------------
// 3. LoRA-Prune merge damage vs MaskedLoRA.

Outcome lora_prune_damage() {
  std::mt19937_64 rng(5);
  const auto w0 = random_tensor<float>({16, 24}, rng);
  const auto mask = build_mask(magnitude_scores(w0), Unstructured{0.5}).bits;
  const auto wt = apply_mask(w0, mask);
  const Var<float> w(wt);
  AdapterOptions o;
  o.rank = 4;
  auto lp = attach(w, AdapterKind::lora_prune, o, 1, &mask);
  auto ml = attach(w, AdapterKind::masked_lora, o, 1, &mask);
  const auto b = random_tensor<float>({16, 4}, rng, 0.3), a = random_tensor<float>({4, 24}, rng, 0.3);
  lp.B.mutable_value() = ml.B.mutable_value() = b;
  lp.A.mutable_value() = ml.A.mutable_value() = a;
  const double lp_dev = merge(lp, wt, 100, 11).second.max_deviation;
  const double ml_dev = merge(ml, wt, 100, 11).second.max_deviation;
  return {lp_dev > kLoraPruneDeviation && ml_dev < kMergeDeviation,
          "lora-prune dev " + fmt("%.3e", lp_dev) + ", masked-lora dev " + fmt("%.3e", ml_dev)};
}

// ---------------------------------------------------------------------------
// 4. Finite-difference gradients for adapters and the reconstruction objective.

Outcome gradient_oracle() {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  int checks = 0;
  for (int t = 0; t < kFdInstances; ++t) {
    const auto w0 = random_tensor<double>({6, 8}, rng);
    const auto mask = build_mask(magnitude_scores(w0.cast<float>()), Unstructured{0.5}).bits.cast<double>();
    const Var<double> w(apply_mask(w0, mask));
    const auto x = constant(random_tensor<double>({3, 8}, rng));
    for (AdapterKind kind : {AdapterKind::lora, AdapterKind::lora_prune, AdapterKind::mult_lora, AdapterKind::masked_lora}) {
      AdapterOptions o;
      o.rank = 3;
      auto p = attach(w, kind, o, static_cast<std::uint64_t>(t), needs_mask(kind) ? &mask : nullptr);
      p.B.mutable_value() = random_tensor<double>({6, 3}, rng);
      p.A.mutable_value() = random_tensor<double>({3, 8}, rng);
      auto loss = [&] { return random_projection(adapter_forward(p, w, x), 100 + static_cast<std::uint64_t>(t)); };
      worst = std::max({worst, fd_relative_error(p.B, loss, kFdStep), fd_relative_error(p.A, loss, kFdStep)});
      checks += 2;
    }
    const auto wo = random_tensor<double>({5, 7}, rng);
    const auto mo = build_mask(magnitude_scores(wo.cast<float>()), Unstructured{0.5}).bits.cast<double>();
    const auto xo = random_tensor<double>({7, 12}, rng);
    Var<double> what(random_tensor<double>({5, 7}, rng), true);
    worst = std::max(worst, fd_relative_error(what, [&] { return objective_var(wo, mo, xo, what); }, kFdStep));
    ++checks;
  }
  return {worst < kFdTolerance, std::to_string(checks) + " checks, worst rel err " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 5. N:M structure.

Outcome n_m_structure() {
  std::mt19937_64 rng(6);
  bool ok = true;
  std::size_t groups = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t rows = 1 + rng() % 16, cols = 8 * (1 + rng() % 8);
    const auto scores = random_tensor<float>({rows, cols}, rng);
    for (auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 4}, {4, 8}}) {
      const auto bits = build_mask(scores, SemiStructured{n, m}).bits;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t g = 0; g < cols; g += m) {
          std::size_t ones = 0;
          for (std::size_t j = g; j < g + m; ++j) ones += bits(r, j) != 0.0f;
          ok = ok && ones == n;
          ++groups;
        }
      }
      ok = ok && sparsity_of(bits) == 0.5;
    }
  }
  return {ok, std::to_string(groups) + " groups checked"};
}

// ---------------------------------------------------------------------------
// 6. Reconstruction reaches the least-squares oracle.

Outcome reconstruction_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(8);
  const std::vector<double> grid = {1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
  double worst_direct = 0.0, worst_r8 = 0.0, worst_r2 = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto w = random_tensor<float>({8, 8}, rng);
    const auto x = random_tensor<float>({8, 32}, rng);
    const auto mask = build_mask(magnitude_scores(w), Unstructured{0.5}).bits;
    const ReconstructionProblem p(w, mask, x);
    const double opt = lstsq_oracle(p).objective;
    ReconstructOptions o;
    o.steps = 500;
    o.method = ReconstructMethod::direct;
    worst_direct = std::max(worst_direct, reconstruct_layer_tuned(p, o, grid).obj_final / opt);
    o.method = ReconstructMethod::masked_lora;
    o.rank = 8;
    o.alpha = 8.0;
    worst_r8 = std::max(worst_r8, reconstruct_layer_tuned(p, o, grid).obj_final / opt);
    o.rank = 2;
    o.alpha = 2.0;
    worst_r2 = std::max(worst_r2, reconstruct_layer_tuned(p, o, grid).obj_final / opt);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst_direct <= kDirectSlack && worst_r8 <= kMaskedLoraR8Slack && worst_r2 <= kMaskedLoraR2Slack &&
              secs < 60.0,
          "worst obj/oracle: direct " + fmt("%.4f", worst_direct) + ", masked-lora r8 " + fmt("%.4f", worst_r8) +
              ", r2 " + fmt("%.4f", worst_r2) + " (" + fmt("%.1f", secs) + " s)"};
}

// ---------------------------------------------------------------------------
// 7. Criterion sanity.

Outcome criterion_sanity() {
  std::mt19937_64 rng(9);
  bool wanda_ok = true, sgpt_mask_ok = true;
  double kept_dev = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto w = random_tensor<float>({8, 8}, rng);
    const auto x = hadamard_inputs(8, rng);
    for (const MaskPattern& pat : {MaskPattern{Unstructured{0.5}}, MaskPattern{SemiStructured{2, 4}}}) {
      const auto row_mag = build_mask(magnitude_scores(w), pat, MaskGrouping::per_row).bits;
      wanda_ok = wanda_ok && wanda_mask(w, x, pat).bits == row_mag;
      const auto res = sparsegpt_prune(w, x, pat);
      const auto ref = build_mask(magnitude_scores(w), pat).bits;
      sgpt_mask_ok = sgpt_mask_ok && res.mask.bits == ref;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        if (ref[i] != 0.0f) kept_dev = std::max(kept_dev, std::fabs(double(res.weight[i]) - double(w[i])));
      }
    }
  }

  std::mt19937_64 rng2(11);
  double worst = 0.0, total = 0.0;
  int within = 0;
  constexpr int kTiny = 20;
  for (int t = 0; t < kTiny; ++t) {
    const auto w = random_tensor<float>({2, 4}, rng2);
    const auto x = random_tensor<float>({4, 4}, rng2);
    const auto res = sparsegpt_prune(w, x, Unstructured{0.5});
    const double ratio = perp::test::recon_error(w, res.weight, x) / perp::test::brute_force_unstructured(w, x, 4);
    worst = std::max(worst, ratio);
    total += ratio;
    within += ratio <= kTinyLayerSlack;
  }
  const bool a = wanda_ok, b = sgpt_mask_ok && kept_dev <= kKeptWeightTolerance, c = worst <= kTinyLayerSlack;
  std::ostringstream os;
  os << "(a) " << (a ? "ok" : "mismatch") << "; (b) " << (sgpt_mask_ok ? "masks equal" : "masks differ")
     << ", kept dev " << fmt("%.1e", kept_dev) << "; (c) 2x4 obj/optimum worst " << fmt("%.2f", worst) << ", mean "
     << fmt("%.2f", total / kTiny) << ", " << within << "/" << kTiny << " within 10%";
  return {a && b && c, os.str()};
}

// ---------------------------------------------------------------------------
// 10. Memory accounting.

Outcome memory_accounting() {
  const TaggedModel toy = init_model(MiniGPTConfig{}, 0);
  const double frac = param_groups(toy, {GroupTag::bias, GroupTag::ln}).fraction;
  // Independent count: biases of q,k,v,o,fc1,fc2 plus four LN vectors per block, plus the final LN.
  const MiniGPTConfig c;
  const std::size_t expect = c.n_layers * (4 * c.d_model + c.d_ff + c.d_model + 4 * c.d_model) + 2 * c.d_model;
  const bool frac_ok = frac < kBiasLnBudget &&
                       param_groups(toy, {GroupTag::bias, GroupTag::ln}).count == expect;

  // Optimizer state is exactly twice the trainable entries for every recipe.
  const TaggedModel dense = small_trained();
  TaggedModel pruned = dense.clone();
  const MaskSet masks = magnitude_masks(pruned, Unstructured{0.5});
  apply_masks(pruned, masks);
  bool state_ok = true;
  for (const std::string method : {"bias+ln", "full", "bias+ln+masked-lora", "ln+mult-lora", "lora"}) {
    RetrainRecipe r = parse_method(method);
    r.iters = 2;
    r.val_sequences = 4;
    const auto res = retrain(pruned, masks, r, small_corpus().train, small_corpus().val);
    state_ok = state_ok && res.optimizer_floats == 2 * res.trainable_entries &&
               memory_audit(pruned, r).optimizer_floats == res.optimizer_floats;
  }

  // Sequential reconstruction holds one layer's optimizer at a time.
  const auto calib = CalibrationSet::sample(small_corpus().train, 16, small_config().context_length, 0);
  bool peak_ok = true;
  std::size_t peak = 0, bound = 0;
  for (ReconstructMethod m : {ReconstructMethod::direct, ReconstructMethod::masked_lora}) {
    SequentialOptions so;
    so.layer.method = m;
    so.layer.steps = 20;
    so.layer.rank = 4;
    so.compute_oracle = false;
    const auto seq = sequential_reconstruct(dense, calib, Criterion::magnitude, Unstructured{0.5}, so);
    // Largest block under this method, counted from the model's own sites.
    std::map<std::size_t, std::size_t> per_block;
    for (const auto& s : dense.linear_sites()) {
      const auto& w = dense.param(s.weight).var.value();
      per_block[s.block] += m == ReconstructMethod::direct ? w.numel() : so.layer.rank * (w.rows() + w.cols());
    }
    std::size_t largest = 0;
    for (const auto& [b, n] : per_block) largest = std::max(largest, n);
    peak_ok = peak_ok && seq.peak_optimizer_floats <= 2 * largest && largest == seq.max_block_trainable;
    peak = std::max(peak, seq.peak_optimizer_floats);
    bound = std::max(bound, 2 * largest);
  }
  return {frac_ok && state_ok && peak_ok,
          "bias+ln fraction " + fmt("%.4f%%", 100 * frac) + "; state = 2x trainable: " + (state_ok ? "yes" : "no") +
              "; peak recon state " + std::to_string(peak) + " <= " + std::to_string(bound)};
}

// ---------------------------------------------------------------------------
// 11. Determinism and checkpoint round-trip.

Outcome determinism() {
  auto run = [] {
    TaggedModel dense = small_trained(4);
    TaggedModel pruned = dense.clone();
    const MaskSet masks = magnitude_masks(pruned, Unstructured{0.6});
    apply_masks(pruned, masks);
    RetrainRecipe r = parse_method("bias+ln+masked-lora");
    r.iters = 20;
    r.lr = 1e-3;
    r.seed = 4;
    r.val_sequences = 8;
    auto res = retrain(pruned, masks, r, small_corpus().train, small_corpus().val);
    return checkpoint_bytes(Checkpoint{std::move(res.model), masks, {}});
  };
  const auto a = run(), b = run();

  const fs::path path = fs::temp_directory_path() / "perp_acceptance_roundtrip.perp";
  const auto reloaded = [&] {
    TaggedModel m = small_trained(5);
    const MaskSet masks = magnitude_masks(m, SemiStructured{2, 4});
    apply_masks(m, masks);
    Checkpoint ck{m.clone(), masks, {}};
    save_checkpoint(path, ck);
    const auto bytes = read_file(path);
    return std::pair{bytes, checkpoint_bytes(load_checkpoint(path))};
  }();
  fs::remove(path);
  const bool same = a == b, round = reloaded.first == reloaded.second;
  return {same && round, std::string("repeat run bitwise equal: ") + (same ? "yes" : "no") + " (" +
                             std::to_string(a.size()) + " bytes); save/load round-trip: " + (round ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Desk-scale fixture for criteria 8 and 9: the default toy model pretrained
// on the synthetic corpus, cached in the work directory.

constexpr std::size_t kPretrainSteps = 20000;
constexpr std::size_t kRetrainIters = 1000;
constexpr std::size_t kEvalWindows = 200;
const std::vector<double> kRetrainLrGrid = {1e-3, 3e-3, 1e-2};
const std::vector<double> kReconLrGrid = {1e-4, 1e-3};
const std::vector<std::uint64_t> kSeeds = {0, 1, 2};

struct DeskFixture {
  CorpusSplits corpus;
  TaggedModel dense;
  std::vector<std::vector<std::int32_t>> val_windows, test_windows;
};

const DeskFixture& desk(const fs::path& workdir) {
  static const DeskFixture fx = [&] {
    DeskFixture f;
    const std::string text = synthetic_corpus(1 << 20, 0);
    f.corpus = split_corpus(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    const MiniGPTConfig config;
    const fs::path cache = workdir / "acceptance_dense.perp";
    bool loaded = false;
    if (fs::exists(cache)) {
      try {
        Checkpoint ck = load_checkpoint(cache);
        if (ck.model.config() == config) {
          f.dense = std::move(ck.model);
          loaded = true;
        }
      } catch (const std::exception&) {
      }
    }
    if (!loaded) {
      std::printf("  pretraining the dense toy model (%zu steps), cached at %s\n", kPretrainSteps, cache.c_str());
      std::fflush(stdout);
      PretrainOptions o;
      o.steps = kPretrainSteps;
      o.batch_size = 2;
      o.lr = 2e-3;
      f.dense = pretrain(config, o, f.corpus.train, f.corpus.val).model;
      save_checkpoint(cache, Checkpoint{f.dense.clone(), {}, {}});
    }
    const std::size_t len = config.context_length + 1;
    f.val_windows = validation_windows(f.corpus.val, kEvalWindows, len);
    f.test_windows = validation_windows(f.corpus.test, kEvalWindows, len);
    return f;
  }();
  return fx;
}

// ---------------------------------------------------------------------------
// 8. End-to-end trend on the toy model.

Outcome end_to_end_trend(const fs::path& workdir) {
  const DeskFixture& fx = desk(workdir);
  const double dense_ppl = perplexity(fx.dense, fx.test_windows);
  const std::vector<double> sparsities = {0.5, 0.6, 0.7};
  const std::vector<std::string> methods = {"bias+ln", "masked-lora"};

  struct Cell {
    double none = 0.0;
    std::map<std::string, std::vector<double>> ppl;  // per seed
  };
  std::map<double, Cell> cells;
  std::ostringstream os;
  os << "dense " << fmt("%.3f", dense_ppl);
  for (double s : sparsities) {
    TaggedModel pruned = fx.dense.clone();
    const MaskSet masks = magnitude_masks(pruned, Unstructured{s});
    apply_masks(pruned, masks);
    Cell& cell = cells[s];
    cell.none = perplexity(pruned, fx.test_windows);
    for (const auto& method : methods) {
      RetrainRecipe r = method == "masked-lora" ? adapter_recipe(AdapterKind::masked_lora) : parse_method(method);
      r.iters = kRetrainIters;
      r.lr_grid = kRetrainLrGrid;
      // The lr is tuned once per (method, sparsity) on the first seed and reused for the others.
      r.seed = kSeeds.front();
      const TuneResult tuned = tune_lr(pruned, masks, r, fx.corpus.train, fx.corpus.val, worker_limit());
      cell.ppl[method].push_back(evaluate(tuned.best, fx.test_windows));
      r.lr = tuned.best_lr;
      for (std::size_t k = 1; k < kSeeds.size(); ++k) {
        r.seed = kSeeds[k];
        cell.ppl[method].push_back(evaluate(retrain(pruned, masks, r, fx.corpus.train, fx.corpus.val), fx.test_windows));
      }
      os << "; " << static_cast<int>(s * 100) << "% " << method << " lr " << fmt("%.0e", tuned.best_lr);
    }
  }

  const double damage = cells[0.7].none / dense_ppl;
  int seeds_passed = 0, orderings_held = 0;
  for (std::size_t k = 0; k < kSeeds.size(); ++k) {
    bool ok = true;
    for (double s : sparsities) {
      const Cell& c = cells[s];
      ok = ok && c.ppl.at("bias+ln")[k] < c.none && c.ppl.at("masked-lora")[k] < c.none;
    }
    ok = ok && cells[0.7].ppl.at("masked-lora")[k] <= cells[0.7].ppl.at("bias+ln")[k];
    orderings_held += ok;
    seeds_passed += ok && damage >= kDamageFactor;
  }
  for (double s : sparsities) {
    const Cell& c = cells[s];
    os << "; " << static_cast<int>(s * 100) << "%: none " << fmt("%.3f", c.none);
    for (const auto& m : methods) {
      os << " " << m;
      for (double v : c.ppl.at(m)) os << " " << fmt("%.3f", v);
    }
  }
  os << "; 70% damage " << fmt("%.2f", damage) << "x (needs " << fmt("%.1f", kDamageFactor) << "x)"
     << "; orderings hold on " << orderings_held << "/" << kSeeds.size() << " seeds; seeds passing " << seeds_passed
     << "/" << kSeeds.size();
  return {2 * seeds_passed > static_cast<int>(kSeeds.size()), os.str()};
}

// ---------------------------------------------------------------------------
// 9. Reconstruction improves every criterion.

Outcome reconstruction_helps(const fs::path& workdir) {
  const DeskFixture& fx = desk(workdir);
  std::ostringstream os;
  bool all = true;
  for (const auto& [pname, pattern] :
       std::vector<std::pair<std::string, MaskPattern>>{{"50%", Unstructured{0.5}}, {"2:4", SemiStructured{2, 4}}}) {
    for (Criterion crit : {Criterion::magnitude, Criterion::wanda, Criterion::sparsegpt}) {
      int wins = 0;
      double before_sum = 0.0, after_sum = 0.0;
      for (std::uint64_t seed : kSeeds) {
        const auto calib = CalibrationSet::sample(fx.corpus.train, 128, fx.dense.config().context_length, seed);
        SequentialOptions plain;
        plain.layer.steps = 0;
        plain.compute_oracle = false;
        const double before = perplexity(sequential_reconstruct(fx.dense, calib, crit, pattern, plain).model,
                                         fx.val_windows);
        SequentialOptions rec;
        rec.layer.method = ReconstructMethod::masked_lora;
        rec.layer.steps = 500;
        rec.layer.seed = seed;
        rec.lr_grid = kReconLrGrid;
        rec.compute_oracle = false;
        const double after = perplexity(sequential_reconstruct(fx.dense, calib, crit, pattern, rec).model,
                                        fx.val_windows);
        wins += after < before;
        before_sum += before;
        after_sum += after;
      }
      const double n = static_cast<double>(kSeeds.size());
      os << pname << " " << to_string(crit) << " " << fmt("%.3f", before_sum / n) << "->" << fmt("%.3f", after_sum / n)
         << " (" << wins << "/" << kSeeds.size() << "); ";
      all = all && wins >= 2;
    }
  }
  return {all, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string workdir = ".";
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  app.add_option("--workdir", workdir, "Directory for the cached dense model");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 merge exactness", merge_exactness},
      {"2 init identity", init_identity},
      {"3 lora-prune merge damage", lora_prune_damage},
      {"4 gradient oracle", gradient_oracle},
      {"5 n:m structure", n_m_structure},
      {"6 reconstruction oracle", reconstruction_oracle},
      {"7 criterion sanity", criterion_sanity},
      {"8 end-to-end trend", [&] { return end_to_end_trend(workdir); }},
      {"9 reconstruction helps every criterion", [&] { return reconstruction_helps(workdir); }},
      {"10 memory accounting", memory_accounting},
      {"11 determinism and round-trip", determinism},
  };

  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    const int id = std::stoi(name);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
