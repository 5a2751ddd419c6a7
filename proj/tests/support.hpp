#pragma once

// Shared helpers for the unit and acceptance tests: random tensors,
// reference (naive) implementations and a central finite-difference checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "perp/autograd.hpp"
#include "perp/tensor.hpp"

namespace perp::test {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> d(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(d(rng));
  return t;
}

template <class T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c(Shape{a.rows(), b.cols()}, T(0));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return m;
}

/// max_i |a_i - b_i| / max_i |a_i|.
template <class T>
double max_rel_diff(const Tensor<T>& ref, const Tensor<T>& got) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    num = std::max(num, std::fabs(double(ref[i]) - double(got[i])));
    den = std::max(den, std::fabs(double(ref[i])));
  }
  return den > 0 ? num / den : num;
}

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) of
/// d loss / d leaf, with central differences of step h on every entry.
inline double fd_relative_error(Var<double>& leaf, const std::function<Var<double>()>& loss_fn, double h = 1e-4) {
  leaf.clear_grad();
  Var<double> loss = loss_fn();
  backward(loss);
  const Tensor<double> analytic = leaf.grad();
  leaf.clear_grad();
  Tensor<double>& x = leaf.mutable_value();
  double num2 = 0.0, an2 = 0.0, diff2 = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    double fp, fm;
    {
      NoGradGuard g;
      x[i] = orig + h;
      fp = loss_fn().item();
      x[i] = orig - h;
      fm = loss_fn().item();
    }
    x[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    num2 += numeric * numeric;
    an2 += analytic[i] * analytic[i];
    diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
  }
  const double scale = std::max(std::sqrt(num2), std::sqrt(an2));
  return scale > 0 ? std::sqrt(diff2) / scale : std::sqrt(diff2);
}

/// Weighted sum with fixed random weights: a generic scalar head for gradient checks.
inline Var<double> random_projection(const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, constant(random_tensor<double>(y.shape(), rng))));
}

/// ||W X - W_hat X||_F^2 in double, straight from the definition.
inline double recon_error(const Tensor<float>& w, const Tensor<float>& w_hat, const Tensor<float>& x) {
  double total = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t s = 0; s < x.cols(); ++s) {
      double d = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) d += (double(w(i, j)) - double(w_hat(i, j))) * double(x(j, s));
      total += d * d;
    }
  return total;
}

/// min over v of ||W_i X - v X_S||^2 for one row and a kept column set S.
inline double row_lstsq(const Tensor<float>& w, std::size_t row, const std::vector<std::size_t>& kept,
                        const Tensor<float>& x) {
  const auto S = static_cast<Eigen::Index>(x.cols());
  Eigen::VectorXd b(S);
  for (Eigen::Index s = 0; s < S; ++s) {
    double v = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) v += double(w(row, j)) * double(x(j, std::size_t(s)));
    b(s) = v;
  }
  if (kept.empty()) return b.squaredNorm();
  Eigen::MatrixXd a(S, static_cast<Eigen::Index>(kept.size()));
  for (Eigen::Index s = 0; s < S; ++s)
    for (std::size_t k = 0; k < kept.size(); ++k) a(s, Eigen::Index(k)) = double(x(kept[k], std::size_t(s)));
  const Eigen::VectorXd sol = a.completeOrthogonalDecomposition().solve(b);
  return (a * sol - b).squaredNorm();
}

/// Best objective over every mask with exactly `zeros` pruned entries
/// (per tensor), each paired with its row-wise least-squares weights.
inline double brute_force_unstructured(const Tensor<float>& w, const Tensor<float>& x, std::size_t zeros) {
  const std::size_t n = w.numel(), cols = w.cols();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << n); ++bits) {
    if (std::size_t(__builtin_popcountll(bits)) != n - zeros) continue;
    double total = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      std::vector<std::size_t> kept;
      for (std::size_t j = 0; j < cols; ++j)
        if (bits >> (r * cols + j) & 1) kept.push_back(j);
      total += row_lstsq(w, r, kept, x);
    }
    best = std::min(best, total);
  }
  return best;
}

/// Same search restricted to masks with exactly n ones per group of m along each row.
inline double brute_force_n_m(const Tensor<float>& w, const Tensor<float>& x, std::size_t n, std::size_t m) {
  const std::size_t cols = w.cols();
  double total = 0.0;
  // Rows separate, so search each row on its own.
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << cols); ++bits) {
      bool ok = true;
      for (std::size_t g = 0; g < cols && ok; g += m)
        ok = std::size_t(__builtin_popcountll((bits >> g) & ((std::uint64_t{1} << m) - 1))) == n;
      if (!ok) continue;
      std::vector<std::size_t> kept;
      for (std::size_t j = 0; j < cols; ++j)
        if (bits >> j & 1) kept.push_back(j);
      best = std::min(best, row_lstsq(w, r, kept, x));
    }
    total += best;
  }
  return total;
}

}  // namespace perp::test
