#include "deqfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace deqfuse {

double GradCheckReport::worst() const {
  double w = unrolled_deviation;
  for (const GradCheckGroup& g : groups) w = std::max(w, g.max_rel_err);
  return w;
}

bool GradCheckReport::passed(double tol) const { return worst() < tol; }

namespace {

double group_rel_err(const Tensor2& analytic, const Tensor2& fd) {
  const double scale = std::max({max_abs(analytic), max_abs(fd), 1e-8});
  return max_abs_diff(analytic, fd) / scale;
}

}  // namespace

GradCheckReport run_gradcheck(const GradCheckOptions& opts) {
  RngState rng(opts.seed);
  FusionParams params = init_fusion_params(rng, opts.width, opts.n_modalities);
  ModalityBundle x;
  for (std::size_t i = 0; i < opts.n_modalities; ++i) {
    x.features.push_back(randn(rng, opts.batch, opts.width, 1.0));
  }
  const Tensor2 cotangent = randn(rng, opts.batch, opts.width, 1.0);

  SolverConfig fwd_cfg;
  fwd_cfg.tol = opts.forward_tol;
  fwd_cfg.max_steps = 600;

  const auto loss_of = [&](const FusionParams& p, const ModalityBundle& xb) {
    const EquilibriumState eq = solve_equilibrium(xb, p, fwd_cfg);
    return dot(cotangent, eq.state.z_fuse);
  };

  const EquilibriumState eq = solve_equilibrium(x, params, fwd_cfg);
  GradientBundle analytic = backward(eq, x, params, cotangent);

  GradCheckReport report;
  const double h = opts.fd_step;

  // parameter groups
  std::vector<std::pair<std::string, Tensor2*>> slots;
  visit_params(params, [&slots](const std::string& name, Tensor2& t) {
    slots.emplace_back(name, &t);
  });
  std::vector<const Tensor2*> analytic_slots;
  visit_params(analytic.params, [&analytic_slots](const std::string&, const Tensor2& t) {
    analytic_slots.push_back(&t);
  });
  for (std::size_t s = 0; s < slots.size(); ++s) {
    Tensor2& target = *slots[s].second;
    Tensor2 fd(target.rows(), target.cols());
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double saved = target[k];
      target[k] = saved + h;
      const double lp = loss_of(params, x);
      target[k] = saved - h;
      const double lm = loss_of(params, x);
      target[k] = saved;
      fd[k] = (lp - lm) / (2.0 * h);
    }
    report.groups.push_back({slots[s].first, group_rel_err(*analytic_slots[s], fd)});
  }

  // inputs
  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    Tensor2& target = x.features[i];
    Tensor2 fd(target.rows(), target.cols());
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double saved = target[k];
      target[k] = saved + h;
      const double lp = loss_of(params, x);
      target[k] = saved - h;
      const double lm = loss_of(params, x);
      target[k] = saved;
      fd[k] = (lp - lm) / (2.0 * h);
    }
    report.groups.push_back({"x_" + std::to_string(i), group_rel_err(analytic.inputs[i], fd)});
  }

  // triangulate against the unrolled oracle
  const GradientBundle unrolled = backward_unrolled(x, params, cotangent, opts.unrolled_steps);
  double dev = 0.0;
  std::size_t idx = 0;
  visit_params(unrolled.params, [&](const std::string&, const Tensor2& t) {
    const double scale = std::max(max_abs(*analytic_slots[idx]), 1e-8);
    dev = std::max(dev, max_abs_diff(*analytic_slots[idx], t) / scale);
    ++idx;
  });
  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    const double scale = std::max(max_abs(analytic.inputs[i]), 1e-8);
    dev = std::max(dev, max_abs_diff(analytic.inputs[i], unrolled.inputs[i]) / scale);
  }
  report.unrolled_deviation = dev;
  return report;
}

}  // namespace deqfuse
