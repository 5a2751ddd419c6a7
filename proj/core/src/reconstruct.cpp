#include "perp/reconstruct.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>

#include "perp/kernels.hpp"
#include "perp/optim.hpp"

namespace perp {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> view(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

template <class T>
Tensor<T> to_tensor(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m) {
  Tensor<T> out(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  std::copy(m.data(), m.data() + m.size(), out.data());
  return out;
}

MatD residual(const ReconstructionProblem& p, const MatD& w_hat) {
  const MatD masked = view(p.mask()).cast<double>().cwiseProduct(w_hat);
  return view(p.target()) - masked * view(p.inputs()).cast<double>();
}

}  // namespace

ReconstructionProblem::ReconstructionProblem(Tensor<float> w, Tensor<float> mask, Tensor<float> x)
    : w_(std::move(w)), mask_(std::move(mask)), x_(std::move(x)) {
  if (w_.rank() != 2 || x_.rank() != 2 || w_.cols() != x_.rows()) {
    throw DimensionError("reconstruction: W " + shape_str(w_.shape()) + " incompatible with X " + shape_str(x_.shape()));
  }
  require_same_shape(w_, mask_, "reconstruction mask");
  const MatD xd = view(x_).cast<double>();
  gram_ = to_tensor<double>(xd * xd.transpose());
  y_ = to_tensor<double>(view(w_).cast<double>() * xd);
}

double objective(const ReconstructionProblem& p, const Tensor<double>& w_hat) {
  require_same_shape(p.weight(), Tensor<float>(w_hat.shape()), "objective");
  return residual(p, view(w_hat)).squaredNorm();
}

double objective(const ReconstructionProblem& p, const Tensor<float>& w_hat) {
  require_same_shape(p.weight(), w_hat, "objective");
  return residual(p, view(w_hat).cast<double>()).squaredNorm();
}

std::vector<double> row_objectives(const ReconstructionProblem& p, const Tensor<double>& w_hat) {
  require_same_shape(p.weight(), Tensor<float>(w_hat.shape()), "row_objectives");
  const MatD r = residual(p, view(w_hat));
  std::vector<double> out(static_cast<std::size_t>(r.rows()));
  for (Eigen::Index i = 0; i < r.rows(); ++i) out[static_cast<std::size_t>(i)] = r.row(i).squaredNorm();
  return out;
}

OracleResult lstsq_oracle(const ReconstructionProblem& p, double damp) {
  const std::size_t n = p.rows(), m = p.cols();
  const auto G = view(p.gram());
  const MatD wd = view(p.weight()).cast<double>();
  OracleResult res;
  res.weight = Tensor<double>(Shape{n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Eigen::Index> keep;
    for (std::size_t j = 0; j < m; ++j) {
      if (p.mask()(i, j) != 0.0f) keep.push_back(static_cast<Eigen::Index>(j));
    }
    if (keep.empty()) continue;
    const auto k = static_cast<Eigen::Index>(keep.size());
    // Normal equations: G_SS w = (G W_i^T)_S.
    MatD gss(k, k);
    Eigen::VectorXd rhs(k);
    const Eigen::VectorXd gw = G * wd.row(static_cast<Eigen::Index>(i)).transpose();
    for (Eigen::Index a = 0; a < k; ++a) {
      rhs(a) = gw(keep[static_cast<std::size_t>(a)]);
      for (Eigen::Index b = 0; b < k; ++b) gss(a, b) = G(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
    }
    const double mean_diag = gss.diagonal().mean();
    gss.diagonal().array() += damp * (mean_diag > 0.0 ? mean_diag : 1.0);
    Eigen::VectorXd sol;
    Eigen::LDLT<MatD> ldlt(gss);
    const auto piv = ldlt.vectorD();
    const bool well_posed = ldlt.info() == Eigen::Success && piv.minCoeff() > 1e-12 * std::max(piv.maxCoeff(), 1e-300);
    if (well_posed) {
      sol = ldlt.solve(rhs);
    } else {
      res.flagged_rows.push_back(i);
      sol = gss.completeOrthogonalDecomposition().solve(rhs);
    }
    for (Eigen::Index a = 0; a < k; ++a) res.weight(i, static_cast<std::size_t>(keep[static_cast<std::size_t>(a)])) = sol(a);
  }
  res.row_objective = row_objectives(p, res.weight);
  res.objective = 0.0;
  for (double v : res.row_objective) res.objective += v;
  return res;
}

std::string to_string(ReconstructMethod m) { return m == ReconstructMethod::direct ? "direct" : "masked-lora"; }

ReconstructMethod parse_reconstruct_method(const std::string& name) {
  if (name == "direct") return ReconstructMethod::direct;
  if (name == "masked-lora") return ReconstructMethod::masked_lora;
  throw ConfigError("unknown reconstruction method '" + name + "' (direct | masked-lora)");
}

LayerReconstruction reconstruct_layer(const ReconstructionProblem& p, const ReconstructOptions& opts,
                                      const Tensor<float>& start) {
  const std::size_t n = p.rows(), m = p.cols();
  const Tensor<float>& mask = p.mask();
  Tensor<float> base = start.empty() ? apply_mask(p.weight(), mask) : apply_mask(start, mask);
  require_same_shape(base, p.weight(), "reconstruct start");

  LayerReconstruction out;
  out.weight = base;
  out.obj_initial = objective(p, base);
  out.obj_final = out.obj_initial;
  if (opts.steps == 0) return out;
  if (!std::isfinite(out.obj_initial)) throw NumericalError("reconstruction objective is not finite at the start");

  Tensor<float> gram(Shape{m, m});
  for (std::size_t i = 0; i < gram.numel(); ++i) gram[i] = static_cast<float>(p.gram()[i]);
  const Tensor<float>& w = p.weight();
  const bool lora = opts.method == ReconstructMethod::masked_lora;
  const std::size_t r = opts.rank;
  if (lora && r == 0) throw ConfigError("masked-lora reconstruction needs rank >= 1");
  const float s = lora ? static_cast<float>(opts.alpha / static_cast<double>(r)) : 1.0f;

  Var<float> what(base, true);
  Var<float> B, A;
  std::vector<Var<float>> leaves;
  if (lora) {
    B = Var<float>(Tensor<float>(Shape{n, r}, 0.0f), true);
    Tensor<float> a(Shape{r, m});
    std::mt19937_64 rng(opts.seed);
    std::normal_distribution<double> dist(0.0, opts.a_init_std);
    for (auto& v : a.vec()) v = static_cast<float>(dist(rng));
    A = Var<float>(std::move(a), true);
    leaves = {B, A};
  } else {
    leaves = {what};
  }
  AdamW<float> opt(leaves);
  out.optimizer_floats = opt.state_floats();
  out.trainable_entries = opt.trainable_entries();
  const LrSchedule sched = LrSchedule::with_default_warmup(opts.lr, opts.steps);

  Tensor<float> weff(Shape{n, m}), d(Shape{n, m}), dg(Shape{n, m}), ba(Shape{n, m});
  std::vector<float> at(m * r);
  auto current = [&]() -> const Tensor<float>& {
    if (!lora) {
      for (std::size_t i = 0; i < weff.numel(); ++i) weff[i] = mask[i] * what.value()[i];
    } else {
      kernels::gemm(n, r, m, B.value().data(), A.value().data(), ba.data(), false);
      for (std::size_t i = 0; i < weff.numel(); ++i) weff[i] = mask[i] * (base[i] + s * ba[i]);
    }
    return weff;
  };
  // Gram-form value tr(D G D^T) and D G for the current iterate.
  auto evaluate = [&]() {
    current();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] = w[i] - weff[i];
    kernels::gemm(n, m, m, d.data(), gram.data(), dg.data(), false);
    double f = 0.0;
    for (std::size_t i = 0; i < d.numel(); ++i) f += static_cast<double>(d[i]) * static_cast<double>(dg[i]);
    return f;
  };

  double best = evaluate();
  Tensor<float> best_w = weff;
  for (std::size_t step = 1; step <= opts.steps; ++step) {
    if (!std::isfinite(best)) throw NumericalError("reconstruction objective became non-finite");
    // dL/dW_eff = -2 D G, restricted to the mask.
    if (!lora) {
      auto& g = what.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = -2.0f * mask[i] * dg[i];
    } else {
      Tensor<float> gba(Shape{n, m});
      for (std::size_t i = 0; i < gba.numel(); ++i) gba[i] = -2.0f * s * mask[i] * dg[i];
      kernels::transpose(r, m, A.value().data(), at.data());
      kernels::gemm(n, m, r, gba.data(), at.data(), B.grad_buffer().data(), false);
      std::vector<float> bt(n * r);
      kernels::transpose(n, r, B.value().data(), bt.data());
      kernels::gemm(r, n, m, bt.data(), gba.data(), A.grad_buffer().data(), false);
    }
    opt.step(sched.at(step));
    opt.zero_grad();
    const double f = evaluate();
    if (!std::isfinite(f)) {
      throw NumericalError("reconstruction objective became non-finite at step " + std::to_string(step) +
                           "; lower the learning rate (currently " + std::to_string(opts.lr) + ")");
    }
    if (f < best) {
      best = f;
      best_w = weff;
    }
  }
  out.weight = std::move(best_w);
  out.obj_final = objective(p, out.weight);
  if (out.obj_final > out.obj_initial) {  // float-vs-double disagreement near the start point
    out.weight = base;
    out.obj_final = out.obj_initial;
  }
  return out;
}

LayerReconstruction reconstruct_layer_tuned(const ReconstructionProblem& p, ReconstructOptions opts,
                                            const std::vector<double>& lr_grid, const Tensor<float>& start) {
  if (lr_grid.empty()) return reconstruct_layer(p, opts, start);
  std::optional<LayerReconstruction> best;
  double best_lr = 0.0;
  for (double lr : lr_grid) {
    opts.lr = lr;
    try {
      auto r = reconstruct_layer(p, opts, start);
      if (!best || r.obj_final < best->obj_final || (r.obj_final == best->obj_final && lr < best_lr)) {
        best = std::move(r);
        best_lr = lr;
      }
    } catch (const NumericalError&) {
      // diverged at this lr; the others decide
    }
  }
  if (!best) throw NumericalError("reconstruction diverged for every learning rate in the grid");
  return std::move(*best);
}

SequentialResult sequential_reconstruct(const TaggedModel& dense, const CalibrationSet& calib, Criterion criterion,
                                        const MaskPattern& pattern, const SequentialOptions& opts) {
  SequentialResult res;
  res.model = dense.clone();
  const auto& sites = res.model.linear_sites();
  for (std::size_t block = 0; block < res.model.config().n_layers; ++block) {
    const auto inputs = capture_activations(res.model, calib, block);
    std::size_t block_trainable = 0;
    for (std::size_t s = 0; s < sites.size(); ++s) {
      if (sites[s].block != block) continue;
      const Tensor<float>& w_orig = dense.param(sites[s].weight).var.value();
      PrunedLayer pruned = prune_layer(criterion, w_orig, inputs[s], pattern, sites[s].weight);
      ReconstructionProblem prob(w_orig, pruned.mask.bits, inputs[s]);

      ReconstructOptions lo = opts.layer;
      lo.seed = opts.layer.seed * 1000003ull + s;
      const LayerReconstruction rec = reconstruct_layer_tuned(prob, lo, opts.lr_grid, pruned.weight);
      block_trainable += lo.method == ReconstructMethod::direct ? w_orig.numel()
                                                                : lo.rank * (w_orig.rows() + w_orig.cols());
      res.peak_optimizer_floats = std::max(res.peak_optimizer_floats, rec.optimizer_floats);

      LayerLog log{sites[s].weight, to_string(criterion), opts.layer.steps, rec.obj_initial, rec.obj_final,
                   std::numeric_limits<double>::quiet_NaN()};
      if (opts.compute_oracle) log.obj_oracle = lstsq_oracle(prob).objective;
      res.layers.push_back(log);

      res.model.param(sites[s].weight).var.mutable_value() = rec.weight;
      res.masks.emplace(sites[s].weight, std::move(pruned.mask));
    }
    res.max_block_trainable = std::max(res.max_block_trainable, block_trainable);
  }
  return res;
}

void write_layer_log_csv(const std::filesystem::path& path, const std::vector<LayerLog>& layers) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write layer log '" + path.string() + "'");
  f << "layer,criterion,steps,obj_initial,obj_final,obj_oracle\n" << std::setprecision(17);
  for (const auto& l : layers) {
    f << l.layer << ',' << l.criterion << ',' << l.steps << ',' << l.obj_initial << ',' << l.obj_final << ','
      << l.obj_oracle << '\n';
  }
}

}  // namespace perp
