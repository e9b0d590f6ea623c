#include "deqfuse/implicit_grad.hpp"

#include <cmath>

namespace deqfuse {

GradientBundle zero_gradients(const FusionParams& params, const ModalityBundle& x) {
  GradientBundle g;
  g.params = zeros_like(params);
  g.inputs.assign(x.n_modalities(), Tensor2(x.batch(), x.width()));
  return g;
}

SolverConfig default_adjoint_config() {
  SolverConfig cfg;
  cfg.method = SolverMethod::kAnderson;
  cfg.tol = 1e-6;
  cfg.max_steps = 100;
  return cfg;
}

AdjointResult solve_adjoint(const VjpFn& map_vjp, const Tensor2& dl_dz,
                            const SolverConfig& cfg) {
  cfg.validate();
  if (!dl_dz.all_finite()) throw NumericError("solve_adjoint: cotangent is not finite");
  const double c_norm = frobenius_norm(dl_dz);
  Tensor2 u(dl_dz.rows(), dl_dz.cols());
  AndersonMixer mixer(cfg.anderson_memory, cfg.beta, cfg.ridge_lambda);
  SolverTrace trace;
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    Tensor2 fu = add(map_vjp(u), dl_dz);
    const double resid = frobenius_norm(sub(fu, u)) / (c_norm > 0.0 ? c_norm : 1.0);
    trace.rel_diffs.push_back(resid);
    trace.steps_taken = step + 1;
    trace.final_residual = resid;
    if (!std::isfinite(resid) || resid > 1e6) {
      throw DivergenceError(
          "adjoint solve diverged (non-contractive Jacobian, residual " +
              std::to_string(resid) + ")",
          trace.rel_diffs);
    }
    if (resid <= cfg.tol) {
      trace.converged = true;
      return {std::move(fu), std::move(trace)};
    }
    u = cfg.method == SolverMethod::kNaive ? std::move(fu) : mixer.push(u, fu);
  }
  return {std::move(u), std::move(trace)};
}

namespace {

void add_block_grads(ModalityBlockParams& acc, const ModalityBlockParams& g) {
  add_in_place(acc.w_pre, g.w_pre);
  add_in_place(acc.b_pre, g.b_pre);
  add_in_place(acc.w_res, g.w_res);
  add_in_place(acc.b_res, g.b_res);
  add_in_place(acc.gn_pre.scale, g.gn_pre.scale);
  add_in_place(acc.gn_pre.shift, g.gn_pre.shift);
  add_in_place(acc.gn_res.scale, g.gn_res.scale);
  add_in_place(acc.gn_res.shift, g.gn_res.shift);
  add_in_place(acc.gn_out.scale, g.gn_out.scale);
  add_in_place(acc.gn_out.shift, g.gn_out.shift);
}

void add_fuse_grads(FusionParams& acc, const FuseStepGrads& g) {
  add_in_place(acc.gate_weight, g.dgate_weight);
  add_in_place(acc.gate_bias, g.dgate_bias);
  add_in_place(acc.fuse_weight, g.dfuse_weight);
  add_in_place(acc.fuse_bias, g.dfuse_bias);
  add_in_place(acc.gn_fuse.scale, g.dgn_scale);
  add_in_place(acc.gn_fuse.shift, g.dgn_shift);
}

// The injected-fusion path: cotangent dx_fuse feeds every x_i scaled by w_i,
// and w_i itself through <dx_fuse, x_i>.
void add_injected_grads(GradientBundle& acc, const ModalityBundle& x,
                        const FusionParams& params, const Tensor2& dx_fuse) {
  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    axpy_in_place(acc.inputs[i], params.modality_weights(0, i), dx_fuse);
    acc.params.modality_weights(0, i) += dot(dx_fuse, x.features[i]);
  }
}

}  // namespace

GradientBundle backward(const EquilibriumState& eq, const ModalityBundle& x,
                        const FusionParams& params, const Tensor2& dl_dzfuse,
                        const SolverConfig& adjoint_cfg) {
  x.validate();
  params.validate();
  require_same_shape(dl_dzfuse, eq.state.z_fuse, "backward");
  GradientBundle grads = zero_gradients(params, x);

  // caches at the fixed point; the fuse step sees the stationary z_i*
  const Tensor2 x_fuse = injected_fusion(x, params.modality_weights);
  std::vector<ModalityBlockCache> block_caches(x.n_modalities());
  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    modality_block(eq.state.z[i], x.features[i], params, i, &block_caches[i]);
  }
  FuseStepCache fuse_cache;
  fuse_step(eq.state.z_fuse, eq.state.z, x_fuse, params, &fuse_cache);

  const VjpFn fuse_vjp_z = [&](const Tensor2& u) {
    return fuse_step_vjp(fuse_cache, params, u).dz_fuse;
  };
  const AdjointResult adj_fuse = solve_adjoint(fuse_vjp_z, dl_dzfuse, adjoint_cfg);

  FuseStepGrads fg = fuse_step_vjp(fuse_cache, params, adj_fuse.u);
  add_fuse_grads(grads.params, fg);
  add_injected_grads(grads, x, params, fg.dx_fuse);

  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    const VjpFn block_vjp_z = [&, i](const Tensor2& u) {
      return modality_block_vjp(block_caches[i], params, i, u).dz;
    };
    const AdjointResult adj_i = solve_adjoint(block_vjp_z, fg.dz[i], adjoint_cfg);
    ModalityBlockGrads bg = modality_block_vjp(block_caches[i], params, i, adj_i.u);
    add_block_grads(grads.params.blocks[i], bg.dparams);
    add_in_place(grads.inputs[i], bg.dx);
  }
  return grads;
}

JointState joint_map_vjp(const JointMapCache& cache, const FusionParams& params,
                         const ModalityBundle& x, const JointState& upstream,
                         bool fuse_uses_fresh, GradientBundle* accum) {
  FuseStepGrads fg = fuse_step_vjp(cache.fuse, params, upstream.z_fuse);
  JointState out;
  out.z.resize(upstream.z.size());
  out.z_fuse = std::move(fg.dz_fuse);
  for (std::size_t i = 0; i < upstream.z.size(); ++i) {
    Tensor2 u_i = upstream.z[i];
    if (fuse_uses_fresh) add_in_place(u_i, fg.dz[i]);
    ModalityBlockGrads bg = modality_block_vjp(cache.blocks[i], params, i, u_i);
    out.z[i] = std::move(bg.dz);
    if (!fuse_uses_fresh) add_in_place(out.z[i], fg.dz[i]);
    if (accum != nullptr) {
      add_block_grads(accum->params.blocks[i], bg.dparams);
      add_in_place(accum->inputs[i], bg.dx);
    }
  }
  if (accum != nullptr) {
    add_fuse_grads(accum->params, fg);
    add_injected_grads(*accum, x, params, fg.dx_fuse);
  }
  return out;
}

GradientBundle backward_unrolled(const ModalityBundle& x, const FusionParams& params,
                                 const Tensor2& dl_dzfuse, std::size_t k_steps) {
  x.validate();
  params.validate();
  if (k_steps < 1) throw ConfigError("backward_unrolled: k_steps must be >= 1");
  JointState s = JointState::zeros(x.n_modalities(), x.batch(), x.width());
  std::vector<JointMapCache> caches(k_steps);
  for (std::size_t t = 0; t < k_steps; ++t) {
    s = joint_map(s, x, params, /*fuse_uses_fresh=*/true, &caches[t]);
  }
  GradientBundle grads = zero_gradients(params, x);
  Tensor2 u_fuse = dl_dzfuse;
  std::vector<Tensor2> carry(x.n_modalities(), Tensor2(x.batch(), x.width()));
  for (std::size_t t = k_steps; t-- > 0;) {
    FuseStepGrads fg = fuse_step_vjp(caches[t].fuse, params, u_fuse);
    add_fuse_grads(grads.params, fg);
    add_injected_grads(grads, x, params, fg.dx_fuse);
    for (std::size_t i = 0; i < x.n_modalities(); ++i) {
      Tensor2 u_i = add(carry[i], fg.dz[i]);
      ModalityBlockGrads bg = modality_block_vjp(caches[t].blocks[i], params, i, u_i);
      add_block_grads(grads.params.blocks[i], bg.dparams);
      add_in_place(grads.inputs[i], bg.dx);
      carry[i] = std::move(bg.dz);
    }
    u_fuse = std::move(fg.dz_fuse);
  }
  return grads;
}

double hutchinson_sq_norm(const VjpFn& map_vjp, std::size_t rows, std::size_t cols,
                          RngState& rng, std::size_t probes) {
  if (probes < 1) throw ConfigError("hutchinson_sq_norm: probes must be >= 1");
  const double dim = static_cast<double>(rows * cols);
  double acc = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    const Tensor2 eps = randn(rng, rows, cols, 1.0);
    const Tensor2 r = map_vjp(eps);
    acc += frobenius_norm(r) * frobenius_norm(r) / dim;
  }
  return acc / static_cast<double>(probes);
}

double jacobian_reg(const FusionParams& params, const ModalityBundle& x,
                    const EquilibriumState& eq, RngState& rng, std::size_t probes) {
  if (probes < 1) throw ConfigError("jacobian_reg: probes must be >= 1");
  JointMapCache cache;
  JointState s = eq.state;
  joint_map(s, x, params, /*fuse_uses_fresh=*/true, &cache);
  const std::size_t n = x.n_modalities(), batch = x.batch(), width = x.width();
  const double dim = static_cast<double>((n + 1) * batch * width);
  double acc = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    JointState eps;
    eps.z.reserve(n);
    for (std::size_t i = 0; i < n; ++i) eps.z.push_back(randn(rng, batch, width, 1.0));
    eps.z_fuse = randn(rng, batch, width, 1.0);
    const JointState r = joint_map_vjp(cache, params, x, eps);
    double sq = 0.0;
    for (const Tensor2& t : r.z) sq += dot(t, t);
    sq += dot(r.z_fuse, r.z_fuse);
    acc += sq / dim;
  }
  return acc / static_cast<double>(probes);
}

}  // namespace deqfuse
