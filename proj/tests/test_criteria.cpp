#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "perp/criteria.hpp"
#include "support.hpp"

using namespace perp;
using perp::test::random_tensor;
using perp::test::recon_error;

namespace {

MiniGPTConfig tiny_config() {
  MiniGPTConfig c;
  c.context_length = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  return c;
}

std::vector<std::int32_t> byte_stream(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> s(n);
  for (auto& t : s) t = static_cast<std::int32_t>(rng() % 256);
  return s;
}

// m x S with orthonormal rows.
Tensor<float> orthonormal_inputs(std::size_t m, std::size_t S, std::mt19937_64& rng) {
  auto g = random_tensor<double>({S, m}, rng);
  Eigen::MatrixXd a(S, m);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < m; ++j) a(Eigen::Index(i), Eigen::Index(j)) = g(i, j);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(Eigen::Index(S), Eigen::Index(m));
  Tensor<float> x(Shape{m, S});
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t s = 0; s < S; ++s) x(j, s) = static_cast<float>(q(Eigen::Index(s), Eigen::Index(j)));
  return x;
}

}  // namespace

TEST_CASE("calibration sampling and capture shapes") {
  auto model = init_model(tiny_config(), 0);
  auto stream = byte_stream(500, 1);
  auto one = CalibrationSet::sample(stream, 1, 8, 3);
  auto xs = capture_activations(model, one);
  REQUIRE(xs.size() == model.linear_sites().size());
  for (std::size_t s = 0; s < xs.size(); ++s) {
    CHECK(xs[s].cols() == 8);
    CHECK(xs[s].rows() == model.param(model.linear_sites()[s].weight).var.value().cols());
  }
  auto calib = CalibrationSet::sample(stream, 20, 8, 3);
  CHECK(calib.positions() == 160);
  auto a = capture_activations(model, calib), b = capture_activations(model, CalibrationSet::sample(stream, 20, 8, 3));
  for (std::size_t s = 0; s < a.size(); ++s) CHECK(a[s] == b[s]);

  auto only1 = capture_activations(model, calib, 1);
  for (std::size_t s = 0; s < only1.size(); ++s) {
    if (model.linear_sites()[s].block == 1) CHECK(only1[s] == a[s]);
    else CHECK(only1[s].empty());
  }

  CHECK_THROWS_AS(capture_activations(model, CalibrationSet{}), DataError);
  CHECK_THROWS_AS(CalibrationSet::sample(stream, 0, 8, 0), DataError);
}

TEST_CASE("first-layer capture equals an independent recomputation") {
  auto model = init_model(tiny_config(), 2);
  // Non-trivial LN affine so the check covers it.
  std::mt19937_64 rng(4);
  model.param("blocks.0.ln1.weight").var.mutable_value() = random_tensor<float>({16}, rng);
  model.param("blocks.0.ln1.bias").var.mutable_value() = random_tensor<float>({16}, rng);
  auto calib = CalibrationSet::sample(byte_stream(300, 5), 3, 8, 6);
  auto x = capture_activations(model, calib)[0];

  const auto& emb = model.param("tok_emb").var.value();
  const auto& g = model.param("blocks.0.ln1.weight").var.value();
  const auto& b = model.param("blocks.0.ln1.bias").var.value();
  const std::size_t d = 16;
  std::size_t col = 0;
  double worst = 0.0;
  for (const auto& seq : calib.sequences) {
    for (std::size_t t = 0; t < seq.size(); ++t, ++col) {
      std::vector<double> h(d);
      for (std::size_t i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -double(i - i % 2) / double(d));
        const double pe = i % 2 == 0 ? std::sin(double(t) * freq) : std::cos(double(t) * freq);
        h[i] = emb(std::size_t(seq[t]), i) + pe;
      }
      double mu = 0, var = 0;
      for (double v : h) mu += v;
      mu /= d;
      for (double v : h) var += (v - mu) * (v - mu);
      var /= d;
      for (std::size_t i = 0; i < d; ++i) {
        const double ref = (h[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
        worst = std::max(worst, std::fabs(ref - x(i, col)));
      }
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("wanda scores and masks") {
  auto w = Tensor<float>::matrix({{1, -4}, {3, 2}});
  const std::vector<double> norms = {2, 1};
  CHECK(wanda_scores(w, norms) == Tensor<float>::matrix({{2, 4}, {6, 2}}));
  CHECK(build_mask(wanda_scores(w, norms), Unstructured{0.5}, MaskGrouping::per_row).bits ==
        Tensor<float>::matrix({{0, 1}, {1, 0}}));

  // Inputs whose features have norms 2 and 1.
  auto x = Tensor<float>::matrix({{2, 0}, {0, 1}});
  CHECK(wanda_mask(w, x, Unstructured{0.5}).bits == Tensor<float>::matrix({{0, 1}, {1, 0}}));
  auto fn = feature_norms(x);
  CHECK(fn[0] == 2.0);
  CHECK(fn[1] == 1.0);

  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    auto wr = random_tensor<float>({6, 8}, rng);
    auto xe = orthonormal_inputs(8, 16, rng);  // all feature norms equal 1
    auto ref = build_mask(magnitude_scores(wr), Unstructured{0.5}, MaskGrouping::per_row).bits;
    CHECK(wanda_mask(wr, xe, Unstructured{0.5}).bits == ref);
    CHECK(wanda_mask(wr, xe, SemiStructured{2, 4}).bits == build_mask(magnitude_scores(wr), SemiStructured{2, 4}).bits);
  }

  // A dead feature scores zero and goes first.
  auto wz = random_tensor<float>({3, 4}, rng);
  auto xz = random_tensor<float>({4, 10}, rng);
  for (std::size_t s = 0; s < 10; ++s) xz(2, s) = 0.0f;
  auto sc = wanda_scores(wz, xz);
  for (std::size_t i = 0; i < 3; ++i) CHECK(sc(i, 2) == 0.0f);
  auto mz = wanda_mask(wz, xz, Unstructured{0.25});
  for (std::size_t i = 0; i < 3; ++i) CHECK(mz.bits(i, 2) == 0.0f);

  CHECK_THROWS_AS(wanda_scores(wz, Tensor<float>::ones({3, 5})), DimensionError);
}

TEST_CASE("sparsegpt with orthonormal inputs reduces to magnitude pruning") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    auto w = random_tensor<float>({8, 8}, rng);
    auto x = orthonormal_inputs(8, 32, rng);
    for (const MaskPattern& pat : {MaskPattern{Unstructured{0.5}}, MaskPattern{SemiStructured{2, 4}}}) {
      auto res = sparsegpt_prune(w, x, pat);
      auto ref = build_mask(magnitude_scores(w), pat);
      CHECK(res.mask.bits == ref.bits);
      double dev = 0.0;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        if (ref.bits[i] != 0.0f) dev = std::max(dev, std::fabs(double(res.weight[i]) - double(w[i])));
      }
      CHECK(dev <= 1e-6);  // float storage; the double computation is exact to 1e-15
    }
  }
}

TEST_CASE("sparsegpt beats plain magnitude pruning on the reconstruction error") {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 20; ++t) {
    auto w = random_tensor<float>({8, 8}, rng);
    auto x = random_tensor<float>({8, 32}, rng);
    for (std::size_t j = 0; j < 8; ++j)  // correlated features make compensation matter
      for (std::size_t s = 0; s < 32; ++s) x(j, s) += 0.8f * x(0, s);
    auto res = sparsegpt_prune(w, x, Unstructured{0.5});
    auto mag = apply_mask(w, build_mask(magnitude_scores(w), Unstructured{0.5}));
    CHECK(recon_error(w, res.weight, x) <= recon_error(w, mag, x));
    CHECK(sparsity_of(res.mask.bits) == 0.5);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      if (res.mask.bits[i] == 0.0f) CHECK(res.weight[i] == 0.0f);
    }
    auto nm = sparsegpt_prune(w, x, SemiStructured{2, 4});
    CHECK(satisfies_n_m(nm.mask.bits, 2, 4));
  }
}

TEST_CASE("exhaustive optimum bounds sparsegpt on tiny layers") {
  // The 10% gap check lives in the acceptance suite; here only the orderings that always hold.
  std::mt19937_64 rng(11);
  auto refit = [](const Tensor<float>& w, const Tensor<float>& bits, const Tensor<float>& x) {
    double total = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      std::vector<std::size_t> kept;
      for (std::size_t j = 0; j < w.cols(); ++j)
        if (bits(r, j) != 0.0f) kept.push_back(j);
      total += perp::test::row_lstsq(w, r, kept, x);
    }
    return total;
  };
  for (int t = 0; t < 20; ++t) {
    auto w = random_tensor<float>({2, 4}, rng);
    auto x = random_tensor<float>({4, 4}, rng);
    auto res = sparsegpt_prune(w, x, Unstructured{0.5});
    const double best = perp::test::brute_force_unstructured(w, x, 4);
    const double own = recon_error(w, res.weight, x);
    const double fitted = refit(w, res.mask.bits, x);
    CHECK(best <= fitted * (1 + 1e-9));
    CHECK(fitted <= own * (1 + 1e-6) + 1e-9);
  }
}

TEST_CASE("sparsegpt errors and determinism") {
  std::mt19937_64 rng(12);
  auto w = random_tensor<float>({4, 6}, rng);
  auto x = random_tensor<float>({6, 10}, rng);
  CHECK_THROWS_AS(sparsegpt_prune(w, x, SemiStructured{2, 4}), PatternError);
  CHECK_THROWS_AS(sparsegpt_prune(w, Tensor<float>::ones({5, 10}), Unstructured{0.5}), DimensionError);
  // Zero damping with rank-deficient inputs cannot be factored.
  auto low = Tensor<float>::ones({6, 10});
  CHECK_THROWS_AS(sparsegpt_prune(w, low, Unstructured{0.5}, SparseGptOptions{0.0, 8}), NumericalError);
  auto a = sparsegpt_prune(w, x, Unstructured{0.5}), b = sparsegpt_prune(w, x, Unstructured{0.5});
  CHECK(a.weight == b.weight);
  CHECK(a.mask.bits == b.mask.bits);
}

TEST_CASE("prune_model applies every criterion") {
  auto stream = byte_stream(2000, 13);
  auto calib = CalibrationSet::sample(stream, 8, 8, 0);
  for (auto crit : {Criterion::magnitude, Criterion::wanda, Criterion::sparsegpt}) {
    auto model = init_model(tiny_config(), 0);
    auto masks = prune_model(model, crit, SemiStructured{2, 4}, &calib);
    CHECK(masks.size() == model.linear_sites().size());
    for (const auto& s : model.linear_sites()) {
      const auto& bits = masks.at(s.weight).bits;
      CHECK(satisfies_n_m(bits, 2, 4));
      const auto& w = model.param(s.weight).var.value();
      for (std::size_t i = 0; i < w.numel(); ++i) {
        if (bits[i] == 0.0f) REQUIRE(w[i] == 0.0f);
      }
    }
    CHECK(parse_criterion(to_string(crit)) == crit);
  }
  auto model = init_model(tiny_config(), 0);
  CHECK_THROWS_AS(prune_model(model, Criterion::wanda, Unstructured{0.5}), DataError);
}
