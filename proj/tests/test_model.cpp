#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "perp/autograd.hpp"
#include "perp/model.hpp"
#include "perp/optim.hpp"

using namespace perp;

namespace {

MiniGPTConfig small_config() {
  MiniGPTConfig c;
  c.vocab_size = 256;
  c.context_length = 16;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 64;
  return c;
}

// Independent count built from the layer list, not from the library formula.
std::size_t topology_count(const MiniGPTConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  std::size_t block = 0;
  block += 2 * d;                        // ln1
  block += 4 * (d * d + (c.bias ? d : 0)); // q k v o
  block += 2 * d;                        // ln2
  block += f * d + (c.bias ? f : 0);     // fc1
  block += d * f + (c.bias ? d : 0);     // fc2
  return v * d + c.n_layers * block + 2 * d + v * d + (c.head_bias ? v : 0);
}

TokenBatch random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenBatch b{rows, cols, std::vector<std::int32_t>(rows * cols)};
  for (auto& t : b.tokens) t = static_cast<std::int32_t>(rng() % 256);
  return b;
}

}  // namespace

TEST_CASE("parameter count matches the topology") {
  MiniGPTConfig c;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 256;
  auto m = init_model(c, 0);
  const std::size_t enumerated = std::accumulate(m.parameters().begin(), m.parameters().end(), std::size_t{0},
                                                 [](std::size_t s, const Parameter& p) { return s + p.var.numel(); });
  CHECK(enumerated == topology_count(c));
  CHECK(m.parameter_count() == topology_count(c));
  CHECK(c.parameter_count() == topology_count(c));

  c.bias = false;
  c.head_bias = true;
  CHECK(init_model(c, 0).parameter_count() == topology_count(c));
  CHECK(c.parameter_count() == topology_count(c));
}

TEST_CASE("default toy config size") {
  MiniGPTConfig c;
  const auto n = c.parameter_count();
  CHECK(n == topology_count(c));
  CHECK(n >= 500000);
  CHECK(n <= 1000000);
}

TEST_CASE("invalid configs are rejected") {
  MiniGPTConfig c = small_config();
  c.n_heads = 5;
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
  c = small_config();
  c.d_ff = 0;
  CHECK_THROWS_AS(init_model(c, 0), ConfigError);
}

TEST_CASE("initialization is deterministic and LN affine is the identity") {
  auto a = init_model(small_config(), 3), b = init_model(small_config(), 3), c = init_model(small_config(), 4);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].var.value() == b.parameters()[i].var.value());
    differs = differs || a.parameters()[i].var.value() != c.parameters()[i].var.value();
  }
  CHECK(differs);

  for (const auto& p : a.parameters()) {
    if (p.tag == GroupTag::bias) {
      for (float v : p.var.value().vec()) CHECK(v == 0.0f);
    }
    if (p.tag == GroupTag::ln && p.name.ends_with(".weight")) {
      for (float v : p.var.value().vec()) CHECK(v == 1.0f);
    }
  }

  NoGradGuard g;
  auto batch = random_batch(2, 16, 1);
  auto with = forward_logits(a, batch, nullptr, ForwardOptions{true}).value();
  auto without = forward_logits(a, batch, nullptr, ForwardOptions{false}).value();
  CHECK(with == without);
}

TEST_CASE("uniform logits give ln(V) loss and perplexity V") {
  auto m = init_model(small_config(), 0);
  m.param("head.weight").var.mutable_value().fill(0.0f);
  NoGradGuard g;
  auto loss = forward_loss(m, random_batch(3, 16, 2)).item();
  CHECK(loss == doctest::Approx(std::log(256.0)).epsilon(1e-6));
  std::vector<std::int32_t> stream(100);
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i] = static_cast<std::int32_t>((i * 37) % 256);
  CHECK(std::fabs(perplexity(m, stream) - 256.0) < 1e-3);
}

TEST_CASE("loss is finite and positive; perplexity is exp(loss) on one window") {
  auto m = init_model(small_config(), 5);
  NoGradGuard g;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto b = random_batch(2, 16, s);
    const double loss = forward_loss(m, b).item();
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
  }
  auto b = random_batch(1, 16, 9);
  const double loss = forward_loss(m, b).item();
  const double ppl = perplexity(m, std::span<const std::int32_t>(b.tokens));
  CHECK(std::fabs(ppl - std::exp(loss)) / ppl < 1e-6);
}

TEST_CASE("forward rejects bad input") {
  auto m = init_model(small_config(), 0);
  auto b = random_batch(1, 16, 0);
  b.tokens[3] = 256;
  CHECK_THROWS_AS(forward_loss(m, b), DataError);
  // A loss window carries one extra target token, so context + 1 is the longest valid one.
  CHECK_NOTHROW(forward_loss(m, random_batch(1, 17, 0)));
  CHECK_THROWS_AS(forward_loss(m, random_batch(1, 18, 0)), DataError);
  CHECK_THROWS_AS(forward_logits(m, random_batch(1, 17, 0)), DataError);
  CHECK_THROWS_AS(perplexity(m, std::span<const std::int32_t>()), DataError);
}

TEST_CASE("parameter groups") {
  MiniGPTConfig c = small_config();
  auto m = init_model(c, 0);
  auto bl = param_groups(m, {GroupTag::bias, GroupTag::ln});
  const std::size_t d = c.d_model, f = c.d_ff;
  CHECK(bl.count == c.n_layers * (4 * d + 4 * d + f + d) + 2 * d);
  CHECK(param_groups(m, all_group_tags()).fraction == 1.0);
  CHECK(param_groups(m, {GroupTag::head}).count == c.d_model * c.vocab_size);
  CHECK_THROWS_AS(param_groups(m, {}), ConfigError);
  CHECK_THROWS_AS(parse_group_tag("gamma"), ConfigError);

  // At d_model 64 biases and LayerNorm exceed 0.5% of a 2-layer model.
  MiniGPTConfig c64 = c;
  c64.d_model = 64;
  c64.d_ff = 256;
  const double frac64 = param_groups(init_model(c64, 0), {GroupTag::bias, GroupTag::ln}).fraction;
  CHECK(frac64 > 0.005);
  CHECK(param_groups(init_model(MiniGPTConfig{}, 0), {GroupTag::bias, GroupTag::ln}).fraction < 0.005);

  // Tags partition the parameters.
  std::size_t sum = 0;
  for (auto t : {GroupTag::bias, GroupTag::ln, GroupTag::head, GroupTag::embedding, GroupTag::linear_weight}) {
    sum += param_groups(m, {t}).count;
  }
  CHECK(sum == m.parameter_count());
}

TEST_CASE("frozen parameters are bitwise unchanged by training") {
  auto m = init_model(small_config(), 1);
  auto before = m.clone();
  m.set_trainable({GroupTag::bias, GroupTag::ln});
  std::vector<Var<float>> params;
  for (auto& p : m.parameters()) params.push_back(p.var);
  AdamW<float> opt(params);
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    backward(forward_loss(m, random_batch(2, 16, 100 + i)));
    opt.step(1e-2);
  }
  bool moved = false;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& p = m.parameters()[i];
    if (p.tag == GroupTag::bias || p.tag == GroupTag::ln) {
      moved = moved || p.var.value() != before.parameters()[i].var.value();
    } else {
      CHECK(p.var.value() == before.parameters()[i].var.value());
      CHECK_FALSE(p.var.has_grad());
    }
  }
  CHECK(moved);
}

TEST_CASE("smoke training reduces loss on a repetitive corpus") {
  const std::string text = "the quick brown fox jumps over the lazy dog. ";
  std::vector<std::int32_t> corpus;
  while (corpus.size() < 10 * 1024) {
    for (char ch : text) corpus.push_back(static_cast<unsigned char>(ch));
  }
  auto m = init_model(small_config(), 0);
  m.set_trainable(all_group_tags());
  std::vector<Var<float>> params;
  for (auto& p : m.parameters()) params.push_back(p.var);
  AdamW<float> opt(params);
  std::mt19937_64 rng(0);
  auto batch = [&] {
    TokenBatch b{4, 16, {}};
    for (int r = 0; r < 4; ++r) {
      const std::size_t s = rng() % (corpus.size() - 16);
      b.tokens.insert(b.tokens.end(), corpus.begin() + s, corpus.begin() + s + 16);
    }
    return b;
  };
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto loss = forward_loss(m, batch());
    if (i < 10) first += loss.item();
    if (i >= 190) last += loss.item();
    backward(loss);
    opt.step(3e-3);
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("clone is deep") {
  auto m = init_model(small_config(), 0);
  auto c = m.clone();
  c.param("head.weight").var.mutable_value()[0] += 1.0f;
  CHECK(c.param("head.weight").var.value() != m.param("head.weight").var.value());
}

TEST_CASE("linear sites cover exactly the prunable weights") {
  auto m = init_model(small_config(), 0);
  std::size_t weights = 0;
  for (const auto& p : m.parameters()) weights += p.tag == GroupTag::linear_weight;
  CHECK(m.linear_sites().size() == weights);
  for (const auto& s : m.linear_sites()) CHECK(m.param(s.weight).tag == GroupTag::linear_weight);
}
