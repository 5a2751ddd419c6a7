#include "perp/criteria.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace perp {

CalibrationSet CalibrationSet::sample(std::span<const std::int32_t> stream, std::size_t count, std::size_t length,
                                      std::uint64_t seed) {
  if (count == 0) throw DataError("calibration set must contain at least one sequence");
  if (length < 2 || stream.size() < length) {
    throw DataError("calibration stream of " + std::to_string(stream.size()) + " tokens too short for windows of " +
                    std::to_string(length));
  }
  CalibrationSet set;
  set.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, stream.size() - length);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t s = start(rng);
    set.sequences.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(s),
                               stream.begin() + static_cast<std::ptrdiff_t>(s + length));
  }
  return set;
}

std::size_t CalibrationSet::positions() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

std::vector<Tensor<float>> capture_activations(const TaggedModel& model, const CalibrationSet& calib,
                                               std::optional<std::size_t> block) {
  if (calib.sequences.empty()) throw DataError("calibration set is empty");
  const auto& sites = model.linear_sites();
  const std::size_t total = calib.positions();
  std::vector<Tensor<float>> out(sites.size());
  std::vector<std::size_t> filled(sites.size(), 0);
  auto wanted = [&](std::size_t s) { return !block || sites[s].block == *block; };

  ForwardHooks hooks;
  hooks.capture = [&](std::size_t s, const Tensor<float>& input) {
    if (!wanted(s)) return;
    const std::size_t rows = input.rows(), width = input.cols();
    if (out[s].empty()) out[s] = Tensor<float>(Shape{width, total});
    Tensor<float>& x = out[s];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < width; ++j) x(j, filled[s] + r) = input(r, j);
    }
    filled[s] += rows;
  };

  NoGradGuard no_grad;
  // One sequence length per forward; group equal lengths to batch them.
  constexpr std::size_t kBatch = 16;
  for (std::size_t i = 0; i < calib.sequences.size();) {
    const std::size_t len = calib.sequences[i].size();
    TokenBatch b{0, len, {}};
    while (i < calib.sequences.size() && b.rows < kBatch && calib.sequences[i].size() == len) {
      b.tokens.insert(b.tokens.end(), calib.sequences[i].begin(), calib.sequences[i].end());
      ++b.rows;
      ++i;
    }
    forward_logits(model, b, &hooks);
  }
  return out;
}

std::vector<double> feature_norms(const Tensor<float>& x) {
  std::vector<double> norms(x.rows());
  for (std::size_t j = 0; j < x.rows(); ++j) {
    double s = 0.0;
    for (float v : x.row(j)) s += static_cast<double>(v) * static_cast<double>(v);
    norms[j] = std::sqrt(s);
  }
  return norms;
}

Tensor<float> wanda_scores(const Tensor<float>& w, std::span<const double> norms) {
  if (w.rank() != 2 || norms.size() != w.cols()) {
    throw DimensionError("wanda_scores: need one feature norm per weight column");
  }
  Tensor<float> out(w.shape());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      out(i, j) = static_cast<float>(std::fabs(static_cast<double>(w(i, j))) * norms[j]);
    }
  }
  return out;
}

Tensor<float> wanda_scores(const Tensor<float>& w, const Tensor<float>& x) {
  if (x.rank() != 2 || w.rank() != 2 || x.rows() != w.cols()) {
    throw DimensionError("wanda_scores: X rows must equal W columns, got W " + shape_str(w.shape()) + " X " +
                         shape_str(x.shape()));
  }
  const auto norms = feature_norms(x);
  return wanda_scores(w, norms);
}

SparsityMask wanda_mask(const Tensor<float>& w, const Tensor<float>& x, const MaskPattern& pattern,
                        std::string owner) {
  return build_mask(wanda_scores(w, x), pattern, MaskGrouping::per_row, std::move(owner));
}

SparseGptResult sparsegpt_prune(const Tensor<float>& w, const Tensor<float>& x, const MaskPattern& pattern,
                                SparseGptOptions opts, std::string owner) {
  validate_pattern(pattern);
  if (x.rank() != 2 || w.rank() != 2 || x.rows() != w.cols()) {
    throw DimensionError("sparsegpt: X rows must equal W columns, got W " + shape_str(w.shape()) + " X " +
                         shape_str(x.shape()));
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto rows = static_cast<Eigen::Index>(w.rows());
  const auto cols = static_cast<Eigen::Index>(w.cols());

  const auto* nm = std::get_if<SemiStructured>(&pattern);
  if (nm && w.cols() % nm->m != 0) {
    throw PatternError("N:M pattern " + pattern_name(pattern) + " needs the input dimension divisible by " +
                       std::to_string(nm->m));
  }
  std::size_t block = std::max<std::size_t>(1, opts.block_size);
  if (nm && block % nm->m != 0) block = (block / nm->m + 1) * nm->m;

  Mat W(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) W(i, j) = w(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }
  Mat X = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
              x.data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols()))
              .cast<double>();
  Mat H = X * X.transpose();
  for (Eigen::Index j = 0; j < cols; ++j) {
    if (H(j, j) == 0.0) {  // dead input feature
      H(j, j) = 1.0;
      W.col(j).setZero();
    }
  }
  const double damp = opts.damp * H.diagonal().mean();
  H.diagonal().array() += damp;

  Eigen::LLT<Mat> llt(H);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("sparsegpt: X X^T + damp*I is not positive definite; increase damp (currently " +
                         std::to_string(opts.damp) + ")");
  }
  Mat Hinv = llt.solve(Mat::Identity(cols, cols));
  Eigen::LLT<Mat> llt_inv(Hinv);
  if (llt_inv.info() != Eigen::Success) {
    throw NumericalError("sparsegpt: inverse Hessian lost definiteness; increase damp (currently " +
                         std::to_string(opts.damp) + ")");
  }
  Mat U = llt_inv.matrixU();

  Tensor<float> bits(w.shape(), 0.0f);
  Mat Q = Mat::Zero(rows, cols);
  const auto bsz = static_cast<Eigen::Index>(block);

  auto keep_best = [](std::vector<std::pair<double, std::size_t>>& cand, std::size_t keep, Tensor<float>& out) {
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t i = 0; i < std::min(keep, cand.size()); ++i) out[cand[i].second] = 1.0f;
  };

  for (Eigen::Index i1 = 0; i1 < cols; i1 += bsz) {
    const Eigen::Index i2 = std::min(i1 + bsz, cols);
    const Eigen::Index count = i2 - i1;
    Mat W1 = W.middleCols(i1, count);
    Mat Err1 = Mat::Zero(rows, count);
    Mat U1 = U.block(i1, i1, count, count);

    if (const auto* u = std::get_if<Unstructured>(&pattern)) {
      std::vector<std::pair<double, std::size_t>> cand;
      cand.reserve(static_cast<std::size_t>(rows * count));
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < count; ++c) {
          const double d = U1(c, c);
          cand.emplace_back(W1(r, c) * W1(r, c) / (d * d), static_cast<std::size_t>(r * cols + i1 + c));
        }
      }
      const auto zeros = static_cast<std::size_t>(std::llround(u->sparsity * static_cast<double>(cand.size())));
      keep_best(cand, cand.size() - zeros, bits);
    }

    for (Eigen::Index c = 0; c < count; ++c) {
      if (nm && (i1 + c) % static_cast<Eigen::Index>(nm->m) == 0) {
        for (Eigen::Index r = 0; r < rows; ++r) {
          std::vector<std::pair<double, std::size_t>> cand;
          for (Eigen::Index g = c; g < c + static_cast<Eigen::Index>(nm->m); ++g) {
            const double d = U1(g, g);
            cand.emplace_back(W1(r, g) * W1(r, g) / (d * d), static_cast<std::size_t>(r * cols + i1 + g));
          }
          keep_best(cand, nm->n, bits);
        }
      }
      const double d = U1(c, c);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double wv = W1(r, c);
        const bool kept = bits[static_cast<std::size_t>(r * cols + i1 + c)] != 0.0f;
        const double q = kept ? wv : 0.0;
        Q(r, i1 + c) = q;
        const double err = (wv - q) / d;
        Err1(r, c) = err;
        if (err != 0.0) {
          for (Eigen::Index g = c; g < count; ++g) W1(r, g) -= err * U1(c, g);
        }
      }
    }
    if (i2 < cols) W.rightCols(cols - i2).noalias() -= Err1 * U.block(i1, i2, count, cols - i2);
  }

  SparseGptResult res{SparsityMask{std::move(bits), pattern, std::move(owner)}, Tensor<float>(w.shape())};
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      const auto idx = static_cast<std::size_t>(i * cols + j);
      res.weight[idx] = res.mask.bits[idx] != 0.0f ? static_cast<float>(Q(i, j)) : 0.0f;
    }
  }
  return res;
}

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::magnitude: return "magnitude";
    case Criterion::wanda: return "wanda";
    case Criterion::sparsegpt: return "sparsegpt";
  }
  return "?";
}

Criterion parse_criterion(const std::string& name) {
  if (name == "magnitude") return Criterion::magnitude;
  if (name == "wanda") return Criterion::wanda;
  if (name == "sparsegpt") return Criterion::sparsegpt;
  throw ConfigError("unknown pruning criterion '" + name + "' (magnitude | wanda | sparsegpt)");
}

PrunedLayer prune_layer(Criterion criterion, const Tensor<float>& w, const Tensor<float>& x,
                        const MaskPattern& pattern, std::string owner) {
  switch (criterion) {
    case Criterion::magnitude: {
      auto mask = build_mask(magnitude_scores(w), pattern, MaskGrouping::per_tensor, std::move(owner));
      Tensor<float> pruned = apply_mask(w, mask.bits);
      return {std::move(mask), std::move(pruned)};
    }
    case Criterion::wanda: {
      auto mask = wanda_mask(w, x, pattern, std::move(owner));
      Tensor<float> pruned = apply_mask(w, mask.bits);
      return {std::move(mask), std::move(pruned)};
    }
    case Criterion::sparsegpt: {
      auto res = sparsegpt_prune(w, x, pattern, {}, std::move(owner));
      return {std::move(res.mask), std::move(res.weight)};
    }
  }
  throw ConfigError("unknown criterion");
}

MaskSet prune_model(TaggedModel& model, Criterion criterion, const MaskPattern& pattern,
                    const CalibrationSet* calib) {
  std::vector<Tensor<float>> inputs;
  if (criterion != Criterion::magnitude) {
    if (!calib) throw DataError(to_string(criterion) + " pruning needs a calibration set");
    inputs = capture_activations(model, *calib);
  }
  MaskSet masks;
  const auto& sites = model.linear_sites();
  for (std::size_t s = 0; s < sites.size(); ++s) {
    auto& w = model.param(sites[s].weight).var.mutable_value();
    static const Tensor<float> none;
    auto layer = prune_layer(criterion, w, inputs.empty() ? none : inputs[s], pattern, sites[s].weight);
    w = std::move(layer.weight);
    masks.emplace(sites[s].weight, std::move(layer.mask));
  }
  return masks;
}

}  // namespace perp
