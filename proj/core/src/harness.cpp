#include "perp/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "perp/checkpoint.hpp"

namespace perp {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Corpus

CorpusSplits split_corpus(std::span<const std::uint8_t> bytes, std::size_t min_bytes) {
  if (bytes.size() < min_bytes) {
    throw DataError("corpus has " + std::to_string(bytes.size()) + " bytes; at least " + std::to_string(min_bytes) +
                    " are required");
  }
  const std::size_t n = bytes.size();
  const std::size_t train_end = n * 90 / 100;
  const std::size_t val_end = train_end + n * 5 / 100;
  CorpusSplits out;
  out.train.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(train_end));
  out.val.assign(bytes.begin() + static_cast<std::ptrdiff_t>(train_end),
                 bytes.begin() + static_cast<std::ptrdiff_t>(val_end));
  out.test.assign(bytes.begin() + static_cast<std::ptrdiff_t>(val_end), bytes.end());
  return out;
}

CorpusSplits ingest_corpus(const std::filesystem::path& path, std::size_t min_bytes) {
  const auto bytes = read_file(path);
  if (bytes.size() < min_bytes) {
    throw DataError("corpus '" + path.string() + "' has " + std::to_string(bytes.size()) + " bytes; at least " +
                    std::to_string(min_bytes) + " are required");
  }
  return split_corpus(bytes, min_bytes);
}

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::vector<std::string> onsets = {"b", "c", "d", "f", "g", "h", "j", "k", "l",  "m",  "n",  "p",  "r",
                                           "s", "t", "v", "w", "y", "z", "ch", "sh", "th", "st", "tr", "pl", "br"};
  const std::vector<std::string> vowels = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "ie", "oo"};
  const std::vector<std::string> codas = {"", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ng", "ck"};
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };

  std::vector<std::string> lexicon = {"the", "of", "and", "a",  "to", "in",   "is",   "was", "that", "it",
                                      "he",  "she", "they", "with", "for", "on", "as", "at",  "by",   "from"};
  std::set<std::string> seen(lexicon.begin(), lexicon.end());
  constexpr std::size_t kWords = 600;
  while (lexicon.size() < kWords) {
    const int syllables = std::discrete_distribution<int>({0, 4, 4, 2})(rng);
    std::string w;
    for (int s = 0; s < syllables; ++s) w += pick(onsets) + pick(vowels) + (s + 1 == syllables ? pick(codas) : "");
    if (seen.insert(w).second) lexicon.push_back(w);
  }
  std::vector<double> zipf(kWords);
  for (std::size_t k = 0; k < kWords; ++k) zipf[k] = 1.0 / std::pow(static_cast<double>(k + 1), 1.1);
  std::discrete_distribution<std::size_t> global(zipf.begin(), zipf.end());

  constexpr std::size_t kSucc = 12;
  std::vector<std::vector<std::size_t>> succ(kWords);
  for (auto& s : succ) {
    for (std::size_t j = 0; j < kSucc; ++j) s.push_back(global(rng));
  }
  std::vector<double> succ_w(kSucc);
  for (std::size_t j = 0; j < kSucc; ++j) succ_w[j] = 1.0 / static_cast<double>(j + 1);
  std::discrete_distribution<std::size_t> succ_pick(succ_w.begin(), succ_w.end());
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::string out;
  out.reserve(bytes + 64);
  std::size_t in_paragraph = 0, paragraph_len = 4;
  while (out.size() < bytes) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(5, 14)(rng);
    std::size_t w = global(rng);
    for (std::size_t i = 0; i < len; ++i) {
      std::string word = lexicon[w];
      if (i == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
      out += word;
      if (i + 1 < len) out += u01(rng) < 0.08 ? ", " : " ";
      w = u01(rng) < 0.15 ? global(rng) : succ[w][succ_pick(rng)];
    }
    const double end = u01(rng);
    out += end < 0.8 ? "." : end < 0.9 ? "?" : "!";
    if (++in_paragraph == paragraph_len) {
      out += "\n\n";
      in_paragraph = 0;
      paragraph_len = std::uniform_int_distribution<std::size_t>(3, 7)(rng);
    } else {
      out += " ";
    }
  }
  out.resize(bytes);
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

RetrainResult pretrain(const MiniGPTConfig& config, const PretrainOptions& opts, std::span<const std::int32_t> train,
                       std::span<const std::int32_t> val) {
  RetrainRecipe r;
  r.subset = {GroupTag::bias, GroupTag::ln, GroupTag::head, GroupTag::embedding, GroupTag::linear_weight};
  r.iters = opts.steps;
  r.lr = opts.lr;
  r.lr_grid = {opts.lr};
  r.batch_size = opts.batch_size;
  r.grad_accum = opts.grad_accum;
  r.val_sequences = opts.val_sequences;
  r.seed = opts.seed;
  return retrain(init_model(config, config.seed), {}, r, train, val);
}

// ---------------------------------------------------------------------------
// Config

namespace {

void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + (where.empty() ? "" : where + ".") + key + "': " + e.what());
  }
}

std::string lr_tuning_name(LrTuning t) { return t == LrTuning::per_cell ? "per-cell" : "per-method"; }

bool is_recon(const std::string& method) { return method.rfind("recon:", 0) == 0; }

}  // namespace

std::size_t worker_limit(std::size_t fallback) {
  if (const char* env = std::getenv("PERP_WORKERS"); env && *env) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(env, env + std::strlen(env), v);
    if (ec != std::errc{} || *p != '\0' || v == 0) {
      throw ConfigError(std::string("PERP_WORKERS must be a positive integer, got '") + env + "'");
    }
    return v;
  }
  return std::max<std::size_t>(1, fallback);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, "",
                 {"model", "corpus", "synthetic_bytes", "synthetic_seed", "pretrain", "dense_checkpoint", "sparsities",
                  "patterns", "criterion", "methods", "ablation", "retrain", "reconstruct", "seeds", "output_dir",
                  "eval_tokens", "workers", "save_checkpoints"});
  ExperimentConfig c;
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, "model",
                   {"vocab_size", "context_length", "d_model", "n_heads", "n_layers", "d_ff", "bias", "head_bias", "seed"});
    read(m, "vocab_size", c.model.vocab_size, "model");
    read(m, "context_length", c.model.context_length, "model");
    read(m, "d_model", c.model.d_model, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "n_layers", c.model.n_layers, "model");
    read(m, "d_ff", c.model.d_ff, "model");
    read(m, "bias", c.model.bias, "model");
    read(m, "head_bias", c.model.head_bias, "model");
    read(m, "seed", c.model.seed, "model");
  }
  read(j, "corpus", c.corpus, "");
  read(j, "synthetic_bytes", c.synthetic_bytes, "");
  read(j, "synthetic_seed", c.synthetic_seed, "");
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    reject_unknown(p, "pretrain", {"steps", "batch_size", "grad_accum", "lr", "seed", "val_sequences"});
    read(p, "steps", c.pretrain.steps, "pretrain");
    read(p, "batch_size", c.pretrain.batch_size, "pretrain");
    read(p, "grad_accum", c.pretrain.grad_accum, "pretrain");
    read(p, "lr", c.pretrain.lr, "pretrain");
    read(p, "seed", c.pretrain.seed, "pretrain");
    read(p, "val_sequences", c.pretrain.val_sequences, "pretrain");
  }
  read(j, "dense_checkpoint", c.dense_checkpoint, "");
  read(j, "sparsities", c.sparsities, "");
  read(j, "patterns", c.patterns, "");
  if (j.contains("criterion")) {
    std::string name;
    read(j, "criterion", name, "");
    c.criterion = parse_criterion(name);
  }
  read(j, "methods", c.methods, "");
  read(j, "ablation", c.ablation, "");
  if (j.contains("retrain")) {
    const auto& r = j["retrain"];
    reject_unknown(r, "retrain",
                   {"iters", "lr_grid", "lr_tuning", "batch_size", "grad_accum", "rank", "alpha", "val_sequences"});
    read(r, "iters", c.iters, "retrain");
    read(r, "lr_grid", c.lr_grid, "retrain");
    if (r.contains("lr_tuning")) {
      std::string t;
      read(r, "lr_tuning", t, "retrain");
      if (t == "per-cell") {
        c.lr_tuning = LrTuning::per_cell;
      } else if (t == "per-method") {
        c.lr_tuning = LrTuning::per_method;
      } else {
        throw ConfigError("retrain.lr_tuning must be 'per-cell' or 'per-method', got '" + t + "'");
      }
    }
    read(r, "batch_size", c.batch_size, "retrain");
    read(r, "grad_accum", c.grad_accum, "retrain");
    read(r, "rank", c.rank, "retrain");
    read(r, "alpha", c.alpha, "retrain");
    read(r, "val_sequences", c.val_sequences, "retrain");
  }
  if (j.contains("reconstruct")) {
    const auto& r = j["reconstruct"];
    reject_unknown(r, "reconstruct", {"calib_sequences", "steps", "lr_grid", "rank", "alpha"});
    read(r, "calib_sequences", c.calib_sequences, "reconstruct");
    read(r, "steps", c.recon_steps, "reconstruct");
    read(r, "lr_grid", c.recon_lr_grid, "reconstruct");
    read(r, "rank", c.recon_rank, "reconstruct");
    read(r, "alpha", c.recon_alpha, "reconstruct");
  }
  read(j, "seeds", c.seeds, "");
  read(j, "output_dir", c.output_dir, "");
  read(j, "eval_tokens", c.eval_tokens, "");
  read(j, "workers", c.workers, "");
  read(j, "save_checkpoints", c.save_checkpoints, "");
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["model"] = {{"vocab_size", model.vocab_size}, {"context_length", model.context_length},
                {"d_model", model.d_model},       {"n_heads", model.n_heads},
                {"n_layers", model.n_layers},     {"d_ff", model.d_ff},
                {"bias", model.bias},             {"head_bias", model.head_bias},
                {"seed", model.seed}};
  j["corpus"] = corpus;
  j["synthetic_bytes"] = synthetic_bytes;
  j["synthetic_seed"] = synthetic_seed;
  j["pretrain"] = {{"steps", pretrain.steps}, {"batch_size", pretrain.batch_size}, {"grad_accum", pretrain.grad_accum},
                   {"lr", pretrain.lr},       {"seed", pretrain.seed},             {"val_sequences", pretrain.val_sequences}};
  j["dense_checkpoint"] = dense_checkpoint;
  j["sparsities"] = sparsities;
  j["patterns"] = patterns;
  j["criterion"] = to_string(criterion);
  j["methods"] = methods;
  j["ablation"] = ablation;
  j["retrain"] = {{"iters", iters},           {"lr_grid", lr_grid}, {"lr_tuning", lr_tuning_name(lr_tuning)},
                  {"batch_size", batch_size}, {"grad_accum", grad_accum}, {"rank", rank},
                  {"alpha", alpha},           {"val_sequences", val_sequences}};
  j["reconstruct"] = {{"calib_sequences", calib_sequences}, {"steps", recon_steps}, {"lr_grid", recon_lr_grid},
                      {"rank", recon_rank}, {"alpha", recon_alpha}};
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  j["eval_tokens"] = eval_tokens;
  j["workers"] = workers;
  j["save_checkpoints"] = save_checkpoints;
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  model.validate();
  if (!corpus.empty() && !std::filesystem::exists(corpus)) throw ConfigError("corpus file '" + corpus + "' not found");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (patterns.empty()) throw ConfigError("at least one pattern is required");
  for (const auto& p : patterns) {
    if (p == "unstructured") {
      if (sparsities.empty()) throw ConfigError("unstructured pattern needs at least one sparsity");
      for (double s : sparsities) validate_pattern(Unstructured{s});
    } else {
      const MaskPattern mp = parse_pattern(p);
      if (!std::holds_alternative<SemiStructured>(mp)) throw ConfigError("pattern '" + p + "' is not N:M");
    }
  }
  if (effective_methods().empty()) throw ConfigError("no methods configured");
  for (const auto& m : methods) {
    if (m == "none") continue;
    if (is_recon(m)) {
      parse_reconstruct_method(m.substr(6));
    } else {
      parse_method(m);
    }
  }
  if (iters == 0) throw ConfigError("retrain.iters must be positive");
  if (lr_grid.empty()) throw ConfigError("retrain.lr_grid must not be empty");
  if (calib_sequences == 0) throw ConfigError("reconstruct.calib_sequences must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
}

std::vector<std::string> ExperimentConfig::effective_methods() const {
  std::vector<std::string> out;
  auto add = [&](const std::string& m) {
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  };
  for (const auto& m : methods) add(m == "none" || is_recon(m) ? m : parse_method(m).label());
  if (ablation) {
    const char* names[] = {"bias", "ln", "head", "embedding", "masked-lora"};
    for (unsigned mask = 1; mask < 32; ++mask) {
      std::string label;
      for (unsigned b = 0; b < 5; ++b) {
        if (mask & (1u << b)) label += (label.empty() ? "" : "+") + std::string(names[b]);
      }
      add(parse_method(label).label());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid

MaskPattern cell_pattern(const std::string& pattern, double sparsity) {
  if (pattern == "unstructured") return Unstructured{sparsity};
  return parse_pattern(pattern);
}

std::vector<CellKey> expected_cells(const ExperimentConfig& config) {
  std::vector<CellKey> out;
  const auto methods = config.effective_methods();
  for (const auto& pattern : config.patterns) {
    const std::vector<double> sparsities =
        pattern == "unstructured" ? config.sparsities : std::vector<double>{pattern_sparsity(parse_pattern(pattern))};
    for (double s : sparsities) {
      for (const auto& m : methods) {
        for (auto seed : config.seeds) out.push_back({pattern, s, m, seed});
      }
    }
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::string slug(const CellKey& k) {
  std::string p = k.pattern;
  std::replace(p.begin(), p.end(), ':', '-');
  char s[16];
  std::snprintf(s, sizeof(s), "%.2f", k.sparsity);
  return p + "_" + s + "_" + k.method + "_seed" + std::to_string(k.seed);
}

std::span<const std::int32_t> eval_stream(const ExperimentConfig& c, const CorpusSplits& corpus) {
  std::span<const std::int32_t> t(corpus.test);
  return c.eval_tokens && c.eval_tokens < t.size() ? t.first(c.eval_tokens) : t;
}

struct Pruned {
  TaggedModel model;
  MaskSet masks;
};

class GridRunner {
 public:
  GridRunner(const ExperimentConfig& c, const TaggedModel& dense, const CorpusSplits& corpus)
      : c_(c), dense_(dense), corpus_(corpus), test_(eval_stream(c, corpus)), out_(c.output_dir) {}

  CalibrationSet calib(std::uint64_t seed) const {
    return CalibrationSet::sample(corpus_.train, c_.calib_sequences, dense_.config().context_length, seed);
  }

  Pruned prune(const CellKey& k) const {
    Pruned p{dense_.clone(), {}};
    const MaskPattern pattern = cell_pattern(k.pattern, k.sparsity);
    if (c_.criterion == Criterion::magnitude) {
      p.masks = prune_model(p.model, c_.criterion, pattern);
    } else {
      const CalibrationSet cs = calib(k.seed);
      p.masks = prune_model(p.model, c_.criterion, pattern, &cs);
    }
    return p;
  }

  RetrainRecipe recipe(const CellKey& k) const {
    RetrainRecipe r = parse_method(k.method);
    r.iters = c_.iters;
    r.lr_grid = c_.lr_grid;
    r.batch_size = c_.batch_size;
    r.grad_accum = c_.grad_accum;
    r.adapter_opts.rank = c_.rank;
    r.adapter_opts.alpha = c_.alpha;
    r.val_sequences = c_.val_sequences;
    r.seed = k.seed;
    return r;
  }

  /// Runs one cell; `lr` fixes the learning rate, otherwise the grid is tuned.
  CellResult run(const CellKey& k, std::optional<double> lr) const {
    CellResult res;
    res.key = k;
    try {
      if (is_recon(k.method)) {
        run_recon(k, res);
      } else if (k.method == "none") {
        Pruned p = prune(k);
        res.test_ppl = perplexity(p.model, test_);
        save(k, Checkpoint{std::move(p.model), std::move(p.masks), {}});
      } else {
        Pruned p = prune(k);
        RetrainRecipe r = recipe(k);
        RetrainResult rr;
        if (lr) {
          r.lr = *lr;
          rr = retrain(p.model, p.masks, r, corpus_.train, corpus_.val);
          res.lr = *lr;
        } else {
          TuneResult t = tune_lr(p.model, p.masks, r, corpus_.train, corpus_.val, 1);
          res.lr = t.best_lr;
          rr = std::move(t.best);
        }
        res.test_ppl = evaluate_test(rr);
        const MemoryAudit audit = memory_audit(dense_, r);
        res.trainable_fraction = audit.fraction;
        res.optimizer_floats = rr.optimizer_floats;
        res.tokens_per_sec = rr.train_seconds > 0 ? static_cast<double>(rr.tokens_seen) / rr.train_seconds : 0.0;
        const auto traj = out_ / "trajectories" / (slug(k) + ".csv");
        write_trajectory_csv(traj, rr.trajectory);
        res.trajectory = traj.string();
        save(k, Checkpoint{std::move(rr.model), std::move(p.masks), std::move(rr.adapters)});
      }
      if (!std::isfinite(res.test_ppl)) throw NumericalError("test perplexity is not finite");
      res.ok = true;
    } catch (const Error& e) {
      res.ok = false;
      res.error = e.what();
    }
    return res;
  }

 private:
  double evaluate_test(const RetrainResult& rr) const {
    if (rr.adapters.empty()) return perplexity(rr.model, test_);
    const ForwardHooks hooks = adapter_hooks(rr.model, rr.adapters);
    return perplexity(rr.model, test_, &hooks);
  }

  void run_recon(const CellKey& k, CellResult& res) const {
    SequentialOptions so;
    so.layer.method = parse_reconstruct_method(k.method.substr(6));
    so.layer.steps = c_.recon_steps;
    so.layer.lr = c_.recon_lr_grid.empty() ? 1e-3 : c_.recon_lr_grid.front();
    so.layer.rank = c_.recon_rank;
    so.layer.alpha = c_.recon_alpha;
    so.layer.seed = k.seed;
    so.lr_grid = c_.recon_lr_grid.size() > 1 ? c_.recon_lr_grid : std::vector<double>{};
    so.compute_oracle = false;
    const CalibrationSet cs = calib(k.seed);
    SequentialResult sr = sequential_reconstruct(dense_, cs, c_.criterion, cell_pattern(k.pattern, k.sparsity), so);
    res.test_ppl = perplexity(sr.model, test_);
    res.optimizer_floats = sr.peak_optimizer_floats;
    res.trainable_fraction =
        static_cast<double>(sr.max_block_trainable) / static_cast<double>(dense_.parameter_count());
    write_layer_log_csv(out_ / "layers" / (slug(k) + ".csv"), sr.layers);
    save(k, Checkpoint{std::move(sr.model), std::move(sr.masks), {}});
  }

  void save(const CellKey& k, const Checkpoint& ck) const {
    if (c_.save_checkpoints) save_checkpoint(out_ / "checkpoints" / (slug(k) + ".perp"), ck);
  }

  const ExperimentConfig& c_;
  const TaggedModel& dense_;
  const CorpusSplits& corpus_;
  std::span<const std::int32_t> test_;
  std::filesystem::path out_;
};

template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next == n) return;
        i = next++;
      }
      fn(i);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(workers, n));
  if (threads == 1) {
    worker();
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
}

}  // namespace

ExperimentReport run_grid(const ExperimentConfig& config, const TaggedModel& dense, const CorpusSplits& corpus) {
  config.validate();
  const GridRunner runner(config, dense, corpus);
  const auto cells = expected_cells(config);
  ExperimentReport report;
  report.dense_test_ppl = perplexity(dense, eval_stream(config, corpus));
  std::vector<std::optional<CellResult>> results(cells.size());
  std::map<std::string, double> tuned_lr;

  if (config.lr_tuning == LrTuning::per_method) {
    // Tune each retrain method once on its reference cell: first pattern,
    // highest sparsity, first seed. That run also fills the cell.
    std::vector<std::size_t> refs;
    std::set<std::string> done;
    double top = -1.0;
    for (const auto& k : cells) {
      if (k.pattern == cells.front().pattern) top = std::max(top, k.sparsity);
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto& k = cells[i];
      if (k.method == "none" || is_recon(k.method) || done.count(k.method)) continue;
      if (k.pattern == cells.front().pattern && k.sparsity == top && k.seed == config.seeds.front()) {
        refs.push_back(i);
        done.insert(k.method);
      }
    }
    parallel_for(refs.size(), config.workers, [&](std::size_t j) { results[refs[j]] = runner.run(cells[refs[j]], {}); });
    for (auto i : refs) {
      if (results[i]->ok) tuned_lr[cells[i].method] = results[i]->lr;
    }
  }

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!results[i]) todo.push_back(i);
  }
  parallel_for(todo.size(), config.workers, [&](std::size_t j) {
    const auto& k = cells[todo[j]];
    std::optional<double> lr;
    if (auto it = tuned_lr.find(k.method); it != tuned_lr.end()) lr = it->second;
    results[todo[j]] = runner.run(k, lr);
  });
  for (auto& r : results) report.cells.push_back(std::move(*r));
  return report;
}

ExperimentReport run_grid(const ExperimentConfig& config) {
  config.validate();
  const CorpusSplits corpus = [&] {
    if (!config.corpus.empty()) return ingest_corpus(config.corpus);
    const std::string text = synthetic_corpus(config.synthetic_bytes, config.synthetic_seed);
    return split_corpus(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }();
  const std::filesystem::path out(config.output_dir);
  const std::filesystem::path ckpt =
      config.dense_checkpoint.empty() ? out / "dense.perp" : std::filesystem::path(config.dense_checkpoint);
  TaggedModel dense;
  if (std::filesystem::exists(ckpt)) {
    dense = load_checkpoint(ckpt).model;
    if (dense.config() != config.model) throw ConfigError("checkpoint '" + ckpt.string() + "' has a different model config");
  } else {
    RetrainResult pre = pretrain(config.model, config.pretrain, corpus.train, corpus.val);
    write_trajectory_csv(out / "trajectories" / "pretrain.csv", pre.trajectory);
    save_checkpoint(ckpt, Checkpoint{pre.model, {}, {}});
    dense = std::move(pre.model);
  }
  ExperimentReport report = run_grid(config, dense, corpus);
  emit_tables(report, expected_cells(config), TableFormat::csv, out);
  emit_tables(report, expected_cells(config), TableFormat::markdown, out);
  return report;
}

// ---------------------------------------------------------------------------
// Report serialization

std::vector<AggregateRow> ExperimentReport::aggregates() const {
  std::vector<AggregateRow> rows;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& r) {
      return r.pattern == c.key.pattern && r.sparsity == c.key.sparsity && r.method == c.key.method;
    });
    if (it == rows.end()) {
      rows.push_back({c.key.pattern, c.key.sparsity, c.key.method, 0.0, 0, 0, 0.0});
      it = rows.end() - 1;
    }
    if (c.ok) {
      if (it->seeds == 0) it->trainable_fraction = c.trainable_fraction;
      it->mean_test_ppl += c.test_ppl;
      ++it->seeds;
    } else {
      ++it->failed;
    }
  }
  for (auto& r : rows) r.mean_test_ppl = r.seeds ? r.mean_test_ppl / static_cast<double>(r.seeds) : 0.0;
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

/// Splits CSV text into records, honouring quoted fields.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      any = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (ch == '\n') {
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else if (ch != '\r') {
      field += ch;
      any = true;
    }
  }
  if (quoted) throw IoError("unterminated quoted CSV field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

template <class T>
T parse_num(const std::string& s, const char* what) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw IoError(std::string("bad ") + what + " '" + s + "' in report CSV");
  return v;
}

const char* kReportHeader =
    "pattern,sparsity,method,seed,ok,test_ppl,trainable_fraction,optimizer_floats,tokens_per_sec,lr,trajectory,error";

}  // namespace

std::string report_to_csv(const ExperimentReport& report) {
  std::string out = "# dense_test_ppl=" + fmt(report.dense_test_ppl) + "\n" + kReportHeader + "\n";
  for (const auto& c : report.cells) {
    out += csv_field(c.key.pattern) + ',' + fmt(c.key.sparsity) + ',' + csv_field(c.key.method) + ',' +
           std::to_string(c.key.seed) + ',' + (c.ok ? "1" : "0") + ',' + fmt(c.test_ppl) + ',' +
           fmt(c.trainable_fraction) + ',' + std::to_string(c.optimizer_floats) + ',' + fmt(c.tokens_per_sec) + ',' +
           fmt(c.lr) + ',' + csv_field(c.trajectory) + ',' + csv_field(c.error) + '\n';
  }
  return out;
}

ExperimentReport report_from_csv(const std::string& text) {
  const auto rows = parse_csv(text);
  const std::string prefix = "# dense_test_ppl=";
  if (rows.size() < 2 || rows[0].size() != 1 || rows[0][0].rfind(prefix, 0) != 0) {
    throw IoError("report CSV lacks the dense perplexity line");
  }
  ExperimentReport r;
  r.dense_test_ppl = parse_num<double>(rows[0][0].substr(prefix.size()), "dense_test_ppl");
  for (std::size_t i = 2; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != 12) throw IoError("report CSV row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    CellResult c;
    c.key = {f[0], parse_num<double>(f[1], "sparsity"), f[2], parse_num<std::uint64_t>(f[3], "seed")};
    c.ok = f[4] == "1";
    c.test_ppl = parse_num<double>(f[5], "test_ppl");
    c.trainable_fraction = parse_num<double>(f[6], "trainable_fraction");
    c.optimizer_floats = parse_num<std::size_t>(f[7], "optimizer_floats");
    c.tokens_per_sec = parse_num<double>(f[8], "tokens_per_sec");
    c.lr = parse_num<double>(f[9], "lr");
    c.trajectory = f[10];
    c.error = f[11];
    r.cells.push_back(std::move(c));
  }
  return r;
}

std::string render_table(const ExperimentReport& report, const std::string& pattern, TableFormat format) {
  const auto agg = report.aggregates();
  std::vector<std::string> methods;
  std::vector<double> sparsities;
  for (const auto& a : agg) {
    if (a.pattern != pattern) continue;
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) methods.push_back(a.method);
    if (std::find(sparsities.begin(), sparsities.end(), a.sparsity) == sparsities.end()) sparsities.push_back(a.sparsity);
  }
  auto cell = [&](const std::string& m, double s) -> const AggregateRow* {
    for (const auto& a : agg) {
      if (a.pattern == pattern && a.method == m && a.sparsity == s) return &a;
    }
    return nullptr;
  };
  auto pct = [](double s) {
    char b[32];
    std::snprintf(b, sizeof(b), "%g%%", s * 100.0);
    return std::string(b);
  };

  std::ostringstream os;
  const bool md = format == TableFormat::markdown;
  if (md) {
    os << "| method | % trainable |";
    for (double s : sparsities) os << ' ' << pct(s) << " |";
    os << "\n|---|---|";
    for (std::size_t i = 0; i < sparsities.size(); ++i) os << "---|";
    os << '\n';
  } else {
    os << "method,pct_trainable";
    for (double s : sparsities) os << ",s" << fmt(s);
    os << '\n';
  }
  for (const auto& m : methods) {
    double frac = 0.0;
    for (double s : sparsities) {
      if (const auto* a = cell(m, s); a && a->seeds) {
        frac = a->trainable_fraction;
        break;
      }
    }
    if (md) {
      char b[32];
      std::snprintf(b, sizeof(b), "%.4f", frac * 100.0);
      os << "| " << m << " | " << b << " |";
    } else {
      os << csv_field(m) << ',' << fmt(frac * 100.0);
    }
    for (double s : sparsities) {
      const auto* a = cell(m, s);
      std::string v;
      if (!a) {
        v = "missing";
      } else if (a->seeds == 0) {
        v = "fail";
      } else if (md) {
        char b[48];
        std::snprintf(b, sizeof(b), "%.3f%s", a->mean_test_ppl, a->failed ? " (partial)" : "");
        v = b;
      } else {
        v = fmt(a->mean_test_ppl);
      }
      os << (md ? " " : ",") << v << (md ? " |" : "");
    }
    os << '\n';
  }
  return os.str();
}

std::vector<std::filesystem::path> emit_tables(const ExperimentReport& report, const std::vector<CellKey>& expected,
                                               TableFormat format, const std::filesystem::path& dir) {
  std::vector<std::string> missing;
  for (const auto& k : expected) {
    const bool found = std::any_of(report.cells.begin(), report.cells.end(), [&](const CellResult& c) { return c.key == k; });
    if (!found) {
      missing.push_back(k.pattern + " s=" + fmt(k.sparsity) + " " + k.method + " seed " + std::to_string(k.seed));
    }
  }
  if (!missing.empty()) {
    std::string msg = "report is missing " + std::to_string(missing.size()) + " cell(s):";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ContractError(msg);
  }

  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files;
  auto write = [&](const std::filesystem::path& p, const std::string& body) {
    std::ofstream f(p);
    if (!f) throw IoError("cannot write '" + p.string() + "'");
    f << body;
    files.push_back(p);
  };
  if (format == TableFormat::csv) {
    write(dir / "report.csv", report_to_csv(report));
    std::string agg = "pattern,sparsity,method,mean_test_ppl,seeds,failed,trainable_fraction\n";
    for (const auto& a : report.aggregates()) {
      agg += csv_field(a.pattern) + ',' + fmt(a.sparsity) + ',' + csv_field(a.method) + ',' + fmt(a.mean_test_ppl) +
             ',' + std::to_string(a.seeds) + ',' + std::to_string(a.failed) + ',' + fmt(a.trainable_fraction) + '\n';
    }
    write(dir / "aggregates.csv", agg);
  }
  std::vector<std::string> patterns;
  for (const auto& c : report.cells) {
    if (std::find(patterns.begin(), patterns.end(), c.key.pattern) == patterns.end()) patterns.push_back(c.key.pattern);
  }
  for (const auto& p : patterns) {
    std::string name = p;
    std::replace(name.begin(), name.end(), ':', '-');
    write(dir / ("table_" + name + (format == TableFormat::csv ? ".csv" : ".md")), render_table(report, p, format));
  }
  return files;
}

// ---------------------------------------------------------------------------
// Throughput

ThroughputResult bench_throughput(const TaggedModel& model, const MaskSet& masks, const RetrainRecipe& recipe,
                                  std::span<const std::int32_t> train, double seconds, std::size_t warmup_steps) {
  if (!(seconds >= 5.0)) {
    throw MeasurementError("throughput duration " + std::to_string(seconds) + " s is too short; use at least 5 s");
  }
  TrainingSession session(model, masks, recipe, train);
  for (std::size_t i = 0; i < warmup_steps; ++i) session.step(recipe.lr);
  ThroughputResult out;
  const auto t0 = std::chrono::steady_clock::now();
  double elapsed = 0.0;
  while (elapsed < seconds) {
    session.step(recipe.lr);
    ++out.steps;
    elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  out.seconds = elapsed;
  out.tokens_per_sec = static_cast<double>(out.steps * session.tokens_per_step()) / elapsed;
  out.audit = memory_audit(model, recipe);
  return out;
}

}  // namespace perp
