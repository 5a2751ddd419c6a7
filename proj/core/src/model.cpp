#include "perp/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <unordered_map>

namespace perp {

void MiniGPTConfig::validate() const {
  if (vocab_size == 0 || context_length == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

std::size_t MiniGPTConfig::parameter_count() const {
  const std::size_t d = d_model, f = d_ff, v = vocab_size;
  std::size_t per_block = 4 * d * d + 2 * d * f + 4 * d;
  if (bias) per_block += 4 * d + f + d;
  return v * d + n_layers * per_block + 2 * d + v * d + (head_bias ? v : 0);
}

std::string_view to_string(GroupTag tag) {
  switch (tag) {
    case GroupTag::bias: return "bias";
    case GroupTag::ln: return "ln";
    case GroupTag::head: return "head";
    case GroupTag::embedding: return "embedding";
    case GroupTag::linear_weight: return "linear-weight";
    case GroupTag::adapter: return "adapter";
  }
  return "?";
}

GroupTag parse_group_tag(std::string_view name) {
  for (auto tag : all_group_tags()) {
    if (to_string(tag) == name) return tag;
  }
  throw ConfigError("unknown parameter group '" + std::string(name) + "'");
}

std::set<GroupTag> all_group_tags() {
  return {GroupTag::bias, GroupTag::ln, GroupTag::head, GroupTag::embedding, GroupTag::linear_weight, GroupTag::adapter};
}

namespace {

std::vector<LinearSite> build_sites(const MiniGPTConfig& cfg) {
  std::vector<LinearSite> sites;
  struct Spec {
    const char* name;
    CapturePoint input;
  };
  const Spec specs[] = {{"attn.q", CapturePoint::attn_input},  {"attn.k", CapturePoint::attn_input},
                        {"attn.v", CapturePoint::attn_input},  {"attn.o", CapturePoint::attn_output},
                        {"mlp.fc1", CapturePoint::mlp_input}, {"mlp.fc2", CapturePoint::mlp_hidden}};
  for (std::size_t b = 0; b < cfg.n_layers; ++b) {
    for (const auto& s : specs) {
      const std::string base = "blocks." + std::to_string(b) + "." + s.name;
      sites.push_back(LinearSite{base, base + ".weight", cfg.bias ? base + ".bias" : "", b, s.input});
    }
  }
  return sites;
}

}  // namespace

TaggedModel::TaggedModel(MiniGPTConfig config, std::vector<Parameter> params)
    : config_(config), params_(std::move(params)), sites_(build_sites(config_)) {
  config_.validate();
  std::size_t heads = 0, embeddings = 0;
  for (const auto& p : params_) {
    heads += p.tag == GroupTag::head && p.name == "head.weight";
    embeddings += p.tag == GroupTag::embedding;
  }
  if (heads != 1 || embeddings != 1) throw ContractError("model must have exactly one head and one embedding table");
  for (const auto& s : sites_) {
    if (!has_param(s.weight)) throw ContractError("missing linear weight " + s.weight);
  }
}

Parameter& TaggedModel::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

const Parameter& TaggedModel::param(std::string_view name) const {
  return const_cast<TaggedModel*>(this)->param(name);
}

bool TaggedModel::has_param(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

std::size_t TaggedModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.numel();
  return n;
}

TaggedModel TaggedModel::clone() const {
  std::vector<Parameter> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) copy.push_back(Parameter{p.name, Var<float>(p.var.value(), p.var.requires_grad()), p.tag});
  return TaggedModel(config_, std::move(copy));
}

void TaggedModel::freeze_all() {
  for (auto& p : params_) p.var.set_requires_grad(false);
}

void TaggedModel::set_trainable(const std::set<GroupTag>& selector) {
  for (auto& p : params_) p.var.set_requires_grad(selector.count(p.tag) > 0);
}

TaggedModel init_model(MiniGPTConfig config, std::uint64_t seed) {
  config.validate();
  config.seed = seed;
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
  const float std_w = 0.02f;
  const float std_resid = std_w / std::sqrt(2.0f * static_cast<float>(config.n_layers));

  auto gaussian = [&](Shape shape, float stddev) {
    std::normal_distribution<float> nd(0.0f, stddev);
    Tensor<float> t(std::move(shape));
    for (auto& x : t.vec()) x = nd(rng);
    return t;
  };

  std::vector<Parameter> params;
  auto add = [&](std::string name, Tensor<float> t, GroupTag tag) {
    params.push_back(Parameter{std::move(name), Var<float>(std::move(t), false), tag});
  };

  add("tok_emb", gaussian({v, d}, std_w), GroupTag::embedding);
  for (std::size_t b = 0; b < config.n_layers; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    add(p + "ln1.weight", Tensor<float>::ones({d}), GroupTag::ln);
    add(p + "ln1.bias", Tensor<float>::zeros({d}), GroupTag::ln);
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      const bool resid = std::string(name) == "attn.o";
      add(p + name + ".weight", gaussian({d, d}, resid ? std_resid : std_w), GroupTag::linear_weight);
      if (config.bias) add(p + name + ".bias", Tensor<float>::zeros({d}), GroupTag::bias);
    }
    add(p + "ln2.weight", Tensor<float>::ones({d}), GroupTag::ln);
    add(p + "ln2.bias", Tensor<float>::zeros({d}), GroupTag::ln);
    add(p + "mlp.fc1.weight", gaussian({f, d}, std_w), GroupTag::linear_weight);
    if (config.bias) add(p + "mlp.fc1.bias", Tensor<float>::zeros({f}), GroupTag::bias);
    add(p + "mlp.fc2.weight", gaussian({d, f}, std_resid), GroupTag::linear_weight);
    if (config.bias) add(p + "mlp.fc2.bias", Tensor<float>::zeros({d}), GroupTag::bias);
  }
  add("ln_f.weight", Tensor<float>::ones({d}), GroupTag::ln);
  add("ln_f.bias", Tensor<float>::zeros({d}), GroupTag::ln);
  add("head.weight", gaussian({v, d}, std_w), GroupTag::head);
  if (config.head_bias) add("head.bias", Tensor<float>::zeros({v}), GroupTag::head);
  return TaggedModel(config, std::move(params));
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<std::int32_t>>& rows) {
  if (rows.empty()) throw DataError("token batch needs at least one row");
  TokenBatch b;
  b.rows = rows.size();
  b.cols = rows.front().size();
  b.tokens.reserve(b.rows * b.cols);
  for (const auto& r : rows) {
    if (r.size() != b.cols) throw DataError("token batch rows must have equal length");
    b.tokens.insert(b.tokens.end(), r.begin(), r.end());
  }
  return b;
}

Tensor<float> positional_encoding(std::size_t context_length, std::size_t d_model) {
  Tensor<float> pe(Shape{context_length, d_model});
  for (std::size_t t = 0; t < context_length; ++t) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      pe(t, i) = static_cast<float>(std::sin(static_cast<double>(t) * freq));
      if (i + 1 < d_model) pe(t, i + 1) = static_cast<float>(std::cos(static_cast<double>(t) * freq));
    }
  }
  return pe;
}

namespace {

Var<float> apply_linear(const TaggedModel& model, std::size_t site_index, const Var<float>& x,
                        const ForwardHooks* hooks) {
  const LinearSite& site = model.linear_sites()[site_index];
  if (hooks && hooks->capture) hooks->capture(site_index, x.value());
  const Var<float>& w = model.param(site.weight).var;
  std::optional<Var<float>> y;
  if (hooks && hooks->linear) y = hooks->linear(site_index, x, w);
  Var<float> out = y ? *y : linear(x, w);
  if (!site.bias.empty()) out = add_bias(out, model.param(site.bias).var);
  return out;
}

Var<float> norm(const TaggedModel& model, const Var<float>& x, const std::string& prefix, ForwardOptions opts) {
  if (!opts.ln_affine) return layer_norm(x);
  return layer_norm(x, model.param(prefix + ".weight").var, model.param(prefix + ".bias").var);
}

}  // namespace

Var<float> forward_logits(const TaggedModel& model, const TokenBatch& batch, const ForwardHooks* hooks,
                          ForwardOptions opts) {
  const auto& cfg = model.config();
  if (batch.cols == 0 || batch.rows == 0) throw DataError("empty token batch");
  if (batch.cols > cfg.context_length) {
    throw DataError("sequence length " + std::to_string(batch.cols) + " exceeds context length " +
                    std::to_string(cfg.context_length));
  }
  if (batch.tokens.size() != batch.rows * batch.cols) throw DataError("token batch size mismatch");

  const std::size_t d = cfg.d_model;
  Var<float> h = embedding(model.param("tok_emb").var, std::span<const std::int32_t>(batch.tokens));
  {
    static thread_local Tensor<float> pe_cache;
    if (pe_cache.empty() || pe_cache.rows() < cfg.context_length || pe_cache.cols() != d) {
      pe_cache = positional_encoding(cfg.context_length, d);
    }
    Tensor<float> pos(Shape{batch.rows * batch.cols, d});
    for (std::size_t r = 0; r < batch.rows; ++r) {
      for (std::size_t t = 0; t < batch.cols; ++t) {
        std::copy_n(pe_cache.data() + t * d, d, pos.data() + (r * batch.cols + t) * d);
      }
    }
    h = add(h, constant(std::move(pos)));
  }

  const auto& sites = model.linear_sites();
  for (std::size_t b = 0; b < cfg.n_layers; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    const std::size_t s0 = b * 6;  // six linear sites per block, in declaration order
    Var<float> a = norm(model, h, p + "ln1", opts);
    Var<float> q = apply_linear(model, s0 + 0, a, hooks);
    Var<float> k = apply_linear(model, s0 + 1, a, hooks);
    Var<float> v = apply_linear(model, s0 + 2, a, hooks);
    Var<float> att = causal_attention(q, k, v, batch.rows, batch.cols, cfg.n_heads);
    h = add(h, apply_linear(model, s0 + 3, att, hooks));
    Var<float> f = norm(model, h, p + "ln2", opts);
    Var<float> u = gelu(apply_linear(model, s0 + 4, f, hooks));
    h = add(h, apply_linear(model, s0 + 5, u, hooks));
    (void)sites;
  }
  Var<float> hf = norm(model, h, "ln_f", opts);
  Var<float> logits = linear(hf, model.param("head.weight").var);
  if (cfg.head_bias) logits = add_bias(logits, model.param("head.bias").var);
  return logits;
}

Var<float> forward_loss(const TaggedModel& model, const TokenBatch& batch, const ForwardHooks* hooks,
                        ForwardOptions opts) {
  if (batch.cols < 2) throw DataError("forward_loss needs sequences of at least two tokens");
  const std::size_t vocab = model.config().vocab_size;
  for (auto t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  // Predict position t+1 from prefix [0, t]; the last position has no target.
  TokenBatch inputs{batch.rows, batch.cols - 1, {}};
  std::vector<std::int32_t> targets;
  inputs.tokens.reserve(batch.rows * (batch.cols - 1));
  targets.reserve(batch.rows * (batch.cols - 1));
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto* row = batch.tokens.data() + r * batch.cols;
    inputs.tokens.insert(inputs.tokens.end(), row, row + batch.cols - 1);
    targets.insert(targets.end(), row + 1, row + batch.cols);
  }
  Var<float> logits = forward_logits(model, inputs, hooks, opts);
  return cross_entropy(logits, std::span<const std::int32_t>(targets));
}

namespace {

// Sum of NLL and prediction count over windows, batched by equal length.
std::pair<double, std::size_t> total_nll(const TaggedModel& model,
                                         const std::vector<std::vector<std::int32_t>>& windows,
                                         const ForwardHooks* hooks) {
  NoGradGuard no_grad;
  constexpr std::size_t kBatch = 16;
  std::unordered_map<std::size_t, std::vector<const std::vector<std::int32_t>*>> by_len;
  std::vector<std::size_t> lengths;
  for (const auto& w : windows) {
    if (w.size() < 2) throw DataError("perplexity windows need at least two tokens");
    if (!by_len.count(w.size())) lengths.push_back(w.size());
    by_len[w.size()].push_back(&w);
  }
  double nll = 0.0;
  std::size_t count = 0;
  for (auto len : lengths) {
    const auto& group = by_len[len];
    for (std::size_t i = 0; i < group.size(); i += kBatch) {
      TokenBatch b{0, len, {}};
      for (std::size_t j = i; j < std::min(group.size(), i + kBatch); ++j) {
        b.tokens.insert(b.tokens.end(), group[j]->begin(), group[j]->end());
        ++b.rows;
      }
      const double preds = static_cast<double>(b.rows * (len - 1));
      nll += static_cast<double>(forward_loss(model, b, hooks).item()) * preds;
      count += b.rows * (len - 1);
    }
  }
  return {nll, count};
}

}  // namespace

double perplexity(const TaggedModel& model, const std::vector<std::vector<std::int32_t>>& windows,
                  const ForwardHooks* hooks) {
  if (windows.empty()) throw DataError("perplexity needs at least one window");
  auto [nll, count] = total_nll(model, windows, hooks);
  return std::exp(nll / static_cast<double>(count));
}

double perplexity(const TaggedModel& model, std::span<const std::int32_t> corpus, const ForwardHooks* hooks) {
  if (corpus.size() < 2) throw DataError("perplexity needs a corpus of at least two tokens");
  const std::size_t ctx = model.config().context_length;
  std::vector<std::vector<std::int32_t>> windows;
  for (std::size_t start = 0; start < corpus.size(); start += ctx) {
    const std::size_t len = std::min(ctx, corpus.size() - start);
    if (len < 2) break;
    windows.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                         corpus.begin() + static_cast<std::ptrdiff_t>(start + len));
  }
  return perplexity(model, windows, hooks);
}

GroupSelection param_groups(const TaggedModel& model, const std::set<GroupTag>& selector) {
  if (selector.empty()) throw ConfigError("parameter group selector must be nonempty");
  GroupSelection sel;
  for (const auto& p : model.parameters()) {
    sel.total += p.var.numel();
    if (selector.count(p.tag)) {
      sel.names.push_back(p.name);
      sel.count += p.var.numel();
    }
  }
  sel.fraction = static_cast<double>(sel.count) / static_cast<double>(sel.total);
  return sel;
}

}  // namespace perp
