#include "perp/retrain.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "perp/optim.hpp"

namespace perp {

namespace {

const std::vector<GroupTag> kLabelOrder = {GroupTag::bias, GroupTag::ln, GroupTag::head, GroupTag::embedding,
                                           GroupTag::linear_weight};

std::set<GroupTag> full_subset() { return {kLabelOrder.begin(), kLabelOrder.end()}; }

void check_masks_applied(const TaggedModel& model, const MaskSet& masks) {
  if (masks.empty()) return;  // dense control
  for (const auto& site : model.linear_sites()) {
    auto it = masks.find(site.weight);
    if (it == masks.end()) throw ContractError("retrain: prunable layer '" + site.weight + "' has no mask");
    const auto& w = model.param(site.weight).var.value();
    require_same_shape(w, it->second.bits, "retrain mask " + site.weight);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      if (w[i] != 0.0f && it->second.bits[i] == 0.0f) {
        throw ContractError("retrain: mask for '" + site.weight + "' has not been applied to the weight");
      }
    }
  }
}

}  // namespace

void RetrainRecipe::validate() const {
  if (subset.empty() && !adapter) throw ConfigError("recipe needs a parameter subset or an adapter");
  if (subset.count(GroupTag::adapter)) throw ConfigError("select adapters through the adapter kind, not the subset");
  if (iters == 0) throw ConfigError("recipe iters must be positive");
  if (batch_size == 0 || grad_accum == 0) throw ConfigError("batch_size and grad_accum must be positive");
  if (val_sequences == 0) throw ConfigError("val_sequences must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("recipe lr must be a finite non-negative number");
  for (double v : lr_grid) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("lr grid values must be finite and non-negative");
  }
}

std::string RetrainRecipe::label() const {
  if (!adapter && subset == full_subset()) return "full";
  std::string out;
  for (auto tag : kLabelOrder) {
    if (!subset.count(tag)) continue;
    if (!out.empty()) out += "+";
    out += to_string(tag);
  }
  if (adapter) out += (out.empty() ? "" : "+") + to_string(*adapter);
  return out;
}

RetrainRecipe subset_recipe(std::set<GroupTag> subset) {
  RetrainRecipe r;
  r.subset = std::move(subset);
  return r;
}

RetrainRecipe adapter_recipe(AdapterKind kind, AdapterOptions opts) {
  RetrainRecipe r;
  r.subset = {GroupTag::bias, GroupTag::ln};
  r.adapter = kind;
  r.adapter_opts = opts;
  return r;
}

RetrainRecipe parse_method(const std::string& method) {
  if (method == "full") return subset_recipe(full_subset());
  RetrainRecipe r;
  std::stringstream ss(method);
  std::string tok;
  while (std::getline(ss, tok, '+')) {
    if (tok == "lora" || tok == "lora-prune" || tok == "mult-lora" || tok == "masked-lora") {
      if (r.adapter) throw ConfigError("method '" + method + "' names more than one adapter kind");
      r.adapter = parse_adapter_kind(tok);
    } else {
      const GroupTag tag = parse_group_tag(tok);
      if (tag == GroupTag::adapter) throw ConfigError("name an adapter kind instead of 'adapter' in '" + method + "'");
      r.subset.insert(tag);
    }
  }
  r.validate();
  return r;
}

std::vector<std::vector<std::int32_t>> validation_windows(std::span<const std::int32_t> stream, std::size_t count,
                                                          std::size_t length, std::uint64_t seed) {
  if (length < 2 || stream.size() < length) {
    throw DataError("validation stream of " + std::to_string(stream.size()) + " tokens too short for windows of " +
                    std::to_string(length));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, stream.size() - length);
  std::vector<std::vector<std::int32_t>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = start(rng);
    out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(s),
                     stream.begin() + static_cast<std::ptrdiff_t>(s + length));
  }
  return out;
}

double evaluate(const RetrainResult& r, const std::vector<std::vector<std::int32_t>>& windows) {
  if (r.adapters.empty()) return perplexity(r.model, windows);
  const ForwardHooks hooks = adapter_hooks(r.model, r.adapters);
  return perplexity(r.model, windows, &hooks);
}

TrainingSession::TrainingSession(const TaggedModel& pruned, const MaskSet& masks, const RetrainRecipe& recipe,
                                 std::span<const std::int32_t> train)
    : recipe_(recipe), train_(train), rng_(recipe.seed) {
  recipe_.validate();
  check_masks_applied(pruned, masks);
  seq_ = recipe_.seq_len ? recipe_.seq_len : pruned.config().context_length;
  if (seq_ < 2 || seq_ > pruned.config().context_length) {
    throw ConfigError("sequence length " + std::to_string(seq_) + " outside [2, context_length]");
  }
  if (train_.size() < seq_) throw DataError("training stream shorter than one sequence");

  model_ = pruned.clone();
  model_.set_trainable(recipe_.subset);
  if (recipe_.adapter) adapters_ = attach_adapters(model_, *recipe_.adapter, recipe_.adapter_opts, recipe_.seed, &masks);
  hooks_ = adapter_hooks(model_, adapters_);

  std::vector<Var<float>> params;
  for (auto& p : model_.parameters()) params.push_back(p.var);
  for (auto& v : adapter_parameters(model_, adapters_)) params.push_back(v);
  opt_ = std::make_unique<AdamW<float>>(params);
  enforcer_ = std::make_unique<MaskEnforcer>();
  for (const auto& [name, mask] : masks) enforcer_->register_mask(model_.param(name).var, mask);
  opt_->add_hook(enforcer_.get());
}

double TrainingSession::step(double lr) {
  std::uniform_int_distribution<std::size_t> start(0, train_.size() - seq_);
  const ForwardHooks* hooks = adapters_.empty() ? nullptr : &hooks_;
  double loss_sum = 0.0;
  for (std::size_t a = 0; a < recipe_.grad_accum; ++a) {
    TokenBatch batch{recipe_.batch_size, seq_, {}};
    batch.tokens.reserve(recipe_.batch_size * seq_);
    for (std::size_t b = 0; b < recipe_.batch_size; ++b) {
      const std::size_t s = start(rng_);
      batch.tokens.insert(batch.tokens.end(), train_.begin() + static_cast<std::ptrdiff_t>(s),
                          train_.begin() + static_cast<std::ptrdiff_t>(s + seq_));
    }
    Var<float> loss = forward_loss(model_, batch, hooks);
    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      opt_->zero_grad();
      throw NumericalError("retrain '" + recipe_.label() + "': non-finite loss at step " +
                           std::to_string(steps_ + 1) + " (lr " + std::to_string(lr) + "); lower the learning rate");
    }
    loss_sum += lv;
    backward(scale(loss, 1.0f / static_cast<float>(recipe_.grad_accum)));
  }
  opt_->step(lr);
  opt_->zero_grad();
  ++steps_;
  return loss_sum / static_cast<double>(recipe_.grad_accum);
}

double TrainingSession::validate(const std::vector<std::vector<std::int32_t>>& windows) const {
  return perplexity(model_, windows, adapters_.empty() ? nullptr : &hooks_);
}

RetrainResult TrainingSession::finish() {
  RetrainResult res;
  if (!adapters_.empty()) {
    res.merges = merge_adapters(model_, adapters_);
    if (*recipe_.adapter == AdapterKind::lora) res.adapters = std::move(adapters_);
  }
  for (auto& p : model_.parameters()) p.var.clear_grad();
  res.steps = steps_;
  res.optimizer_floats = opt_->state_floats();
  res.trainable_entries = opt_->trainable_entries();
  res.tokens_seen = steps_ * tokens_per_step();
  res.model = std::move(model_);
  adapters_.clear();
  return res;
}

RetrainResult retrain(const TaggedModel& pruned, const MaskSet& masks, const RetrainRecipe& recipe,
                      std::span<const std::int32_t> train, std::span<const std::int32_t> val) {
  TrainingSession session(pruned, masks, recipe, train);
  const auto val_windows = validation_windows(val, recipe.val_sequences, session.seq_len());
  const LrSchedule schedule = recipe.warmup ? LrSchedule(recipe.lr, recipe.iters, *recipe.warmup)
                                            : LrSchedule::with_default_warmup(recipe.lr, recipe.iters);
  const std::size_t cadence = recipe.cadence();

  std::vector<TrajectoryPoint> trajectory;
  double seconds = 0.0;
  for (std::size_t step = 1; step <= recipe.iters; ++step) {
    const double lr = schedule.at(step);
    const auto t0 = std::chrono::steady_clock::now();
    const double train_loss = session.step(lr);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (step < recipe.iters && step % cadence == 0) {
      trajectory.push_back({step, lr, train_loss, session.validate(val_windows)});
    } else if (step == recipe.iters) {
      trajectory.push_back({step, lr, train_loss, 0.0});
    }
  }

  RetrainResult res = session.finish();
  res.train_seconds = seconds;
  res.trajectory = std::move(trajectory);
  res.final_val_ppl = evaluate(res, val_windows);
  if (!std::isfinite(res.final_val_ppl)) {
    throw NumericalError("retrain '" + recipe.label() + "': final validation perplexity is not finite");
  }
  res.trajectory.back().val_ppl = res.final_val_ppl;
  return res;
}

TuneResult tune_lr(const TaggedModel& pruned, const MaskSet& masks, const RetrainRecipe& recipe,
                   std::span<const std::int32_t> train, std::span<const std::int32_t> val, std::size_t workers) {
  if (recipe.lr_grid.empty()) throw ConfigError("tune_lr: empty lr grid");
  const std::size_t n = recipe.lr_grid.size();
  std::vector<LrTrial> trials(n);
  std::vector<std::optional<RetrainResult>> results(n);
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
      RetrainRecipe r = recipe;
      r.lr = recipe.lr_grid[i];
      trials[i].lr = r.lr;
      try {
        results[i] = retrain(pruned, masks, r, train, val);
        trials[i].ok = true;
        trials[i].final_val_ppl = results[i]->final_val_ppl;
      } catch (const NumericalError& e) {
        trials[i].error = e.what();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(workers, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < n; ++i) {
    if (!trials[i].ok) continue;
    if (!best || trials[i].final_val_ppl < trials[*best].final_val_ppl ||
        (trials[i].final_val_ppl == trials[*best].final_val_ppl && trials[i].lr < trials[*best].lr)) {
      best = i;
    }
  }
  if (!best) {
    std::string msg = "tune_lr: every learning rate diverged:";
    for (const auto& t : trials) msg += "\n  lr " + std::to_string(t.lr) + ": " + t.error;
    throw NumericalError(msg);
  }
  TuneResult out;
  out.best_lr = trials[*best].lr;
  out.best = std::move(*results[*best]);
  out.trials = std::move(trials);
  return out;
}

MemoryAudit memory_audit(const TaggedModel& model, const RetrainRecipe& recipe) {
  MemoryAudit a;
  a.total = model.parameter_count();
  if (!recipe.subset.empty()) a.trainable = param_groups(model, recipe.subset).count;
  if (recipe.adapter) {
    const std::size_t r = recipe.adapter_opts.rank;
    for (const auto& site : model.linear_sites()) {
      const auto& w = model.param(site.weight).var.value();
      a.trainable += w.rows() * r + r * w.cols();
    }
  }
  a.fraction = static_cast<double>(a.trainable) / static_cast<double>(a.total);
  a.optimizer_floats = 2 * a.trainable;
  return a;
}

void write_trajectory_csv(const std::filesystem::path& path, const std::vector<TrajectoryPoint>& trajectory) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write trajectory '" + path.string() + "'");
  f << "iter,lr,train_loss,val_ppl\n" << std::setprecision(17);
  for (const auto& p : trajectory) f << p.iter << ',' << p.lr << ',' << p.train_loss << ',' << p.val_ppl << '\n';
}

}  // namespace perp
