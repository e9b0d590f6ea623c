#include "deqfuse/equilibrium.hpp"

#include <cmath>
#include <cstring>
#include <ostream>

namespace deqfuse {

JointState JointState::zeros(std::size_t n_modalities, std::size_t batch,
                             std::size_t width) {
  JointState s;
  s.z.assign(n_modalities, Tensor2(batch, width));
  s.z_fuse = Tensor2(batch, width);
  return s;
}

Tensor2 JointState::pack() const {
  const std::size_t block = z_fuse.size();
  Tensor2 out(static_cast<std::size_t>(z.size() + 1) * block, 1);
  std::size_t off = 0;
  for (const Tensor2& zi : z) {
    std::memcpy(out.data() + off, zi.data(), block * sizeof(double));
    off += block;
  }
  std::memcpy(out.data() + off, z_fuse.data(), block * sizeof(double));
  return out;
}

JointState JointState::unpack(const Tensor2& packed, std::size_t n_modalities,
                              std::size_t batch, std::size_t width) {
  const std::size_t block = batch * width;
  if (packed.size() != (n_modalities + 1) * block) {
    throw ShapeError("JointState::unpack: packed size " + std::to_string(packed.size()) +
                     " does not match " + std::to_string((n_modalities + 1) * block));
  }
  JointState s = zeros(n_modalities, batch, width);
  std::size_t off = 0;
  for (Tensor2& zi : s.z) {
    std::memcpy(zi.data(), packed.data() + off, block * sizeof(double));
    off += block;
  }
  std::memcpy(s.z_fuse.data(), packed.data() + off, block * sizeof(double));
  return s;
}

bool JointState::same_shape(const JointState& other) const {
  if (z.size() != other.z.size() || !z_fuse.same_shape(other.z_fuse)) return false;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (!z[i].same_shape(other.z[i])) return false;
  return true;
}

void SolverConfig::validate() const {
  if (!(tol > 0.0)) throw ConfigError("SolverConfig: tol must be > 0");
  if (max_steps < 1) throw ConfigError("SolverConfig: max_steps must be >= 1");
  if (anderson_memory < 1) throw ConfigError("SolverConfig: anderson_memory must be >= 1");
  if (!(beta > 0.0) || beta > 1.0) throw ConfigError("SolverConfig: beta must be in (0, 1]");
  if (ridge_lambda < 0.0) throw ConfigError("SolverConfig: ridge_lambda must be >= 0");
}

void SolverTrace::write_csv(std::ostream& os) const {
  os << "step,rel_diff\n";
  char buf[32];
  for (std::size_t i = 0; i < rel_diffs.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.6e", rel_diffs[i]);
    os << (i + 1) << "," << buf << "\n";
  }
}

double batch_mean_rel_diff(const JointState& next, const JointState& prev) {
  if (!next.same_shape(prev)) throw ShapeError("batch_mean_rel_diff: shape mismatch");
  const std::size_t batch = next.z_fuse.rows();
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double num = 0.0, den = 0.0;
    auto accumulate = [&](const Tensor2& a, const Tensor2& o) {
      for (std::size_t j = 0; j < a.cols(); ++j) {
        const double d = a(b, j) - o(b, j);
        num += d * d;
        den += o(b, j) * o(b, j);
      }
    };
    for (std::size_t i = 0; i < next.z.size(); ++i) accumulate(next.z[i], prev.z[i]);
    accumulate(next.z_fuse, prev.z_fuse);
    num = std::sqrt(num);
    den = std::sqrt(den);
    total += den > 0.0 ? num / den : num;
  }
  return total / static_cast<double>(batch);
}

JointState joint_map(const JointState& s, const ModalityBundle& x,
                     const FusionParams& params, bool fuse_uses_fresh,
                     JointMapCache* cache) {
  x.validate();
  params.validate();
  if (s.z.size() != x.n_modalities()) {
    throw ShapeError("joint_map: state has " + std::to_string(s.z.size()) +
                     " modality blocks, bundle has " + std::to_string(x.n_modalities()));
  }
  const Tensor2 x_fuse = injected_fusion(x, params.modality_weights);
  JointState out;
  out.z.reserve(s.z.size());
  if (cache != nullptr) {
    cache->blocks.assign(s.z.size(), ModalityBlockCache());
    cache->x_fuse = x_fuse;
  }
  for (std::size_t i = 0; i < s.z.size(); ++i) {
    out.z.push_back(modality_block(s.z[i], x.features[i], params, i,
                                   cache != nullptr ? &cache->blocks[i] : nullptr));
  }
  const std::vector<Tensor2>& gate_inputs = fuse_uses_fresh ? out.z : s.z;
  out.z_fuse = fuse_step(s.z_fuse, gate_inputs, x_fuse, params,
                         cache != nullptr ? &cache->fuse : nullptr);
  return out;
}

JointState residual(const JointState& s, const ModalityBundle& x,
                    const FusionParams& params, bool fuse_uses_fresh) {
  JointState r = joint_map(s, x, params, fuse_uses_fresh);
  for (std::size_t i = 0; i < r.z.size(); ++i) r.z[i] = sub(r.z[i], s.z[i]);
  r.z_fuse = sub(r.z_fuse, s.z_fuse);
  return r;
}

namespace {

constexpr double kDivergenceLimit = 1e6;

}  // namespace

AndersonMixer::AndersonMixer(std::size_t memory, double beta, double ridge_lambda)
    : memory_(memory), beta_(beta), lambda_(ridge_lambda) {
  if (memory_ < 1) throw ConfigError("AndersonMixer: memory must be >= 1");
}

void AndersonMixer::reset() {
  hist_s_.clear();
  hist_f_.clear();
}

Tensor2 AndersonMixer::push(const Tensor2& s, const Tensor2& fs) {
  hist_s_.push_back(s);
  hist_f_.push_back(fs);
  if (hist_s_.size() > memory_) {
    hist_s_.erase(hist_s_.begin());
    hist_f_.erase(hist_f_.begin());
  }
  const std::size_t n = hist_s_.size();
  const std::size_t dim = s.size();
  std::vector<double> gamma(n, 0.0);
  if (n == 1) {
    gamma[0] = 1.0;
  } else {
    // residual differences as the least-squares columns
    Tensor2 dg(dim, n - 1);
    Tensor2 gk(dim, 1);
    for (std::size_t k = 0; k < dim; ++k) {
      gk(k, 0) = hist_f_[n - 1][k] - hist_s_[n - 1][k];
      for (std::size_t j = 0; j + 1 < n; ++j) {
        const double gj = hist_f_[j][k] - hist_s_[j][k];
        const double gj1 = hist_f_[j + 1][k] - hist_s_[j + 1][k];
        dg(k, j) = gj1 - gj;
      }
    }
    const Tensor2 theta = ridge_lstsq(dg, gk, lambda_);
    gamma[0] = theta(0, 0);
    for (std::size_t j = 1; j + 1 < n; ++j) gamma[j] = theta(j, 0) - theta(j - 1, 0);
    gamma[n - 1] = 1.0 - theta(n - 2, 0);
  }
  Tensor2 next(s.rows(), s.cols());
  for (std::size_t j = 0; j < n; ++j) {
    const double ws = (1.0 - beta_) * gamma[j];
    const double wf = beta_ * gamma[j];
    for (std::size_t k = 0; k < dim; ++k)
      next[k] += ws * hist_s_[j][k] + wf * hist_f_[j][k];
  }
  return next;
}

FixedPointResult solve_fixed_point(const MapFn& f, const Tensor2& s0,
                                   const SolverConfig& cfg, const StepMetric& metric) {
  cfg.validate();
  const StepMetric step_metric =
      metric ? metric : [](const Tensor2& a, const Tensor2& b) { return rel_diff_norm(a, b); };
  Tensor2 s = s0;
  SolverTrace trace;
  AndersonMixer mixer(cfg.anderson_memory, cfg.beta, cfg.ridge_lambda);
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    Tensor2 fs = f(s);
    require_same_shape(fs, s, "solve_fixed_point");
    double resid_sq = 0.0;
    for (std::size_t k = 0; k < fs.size(); ++k) {
      const double g = fs[k] - s[k];
      resid_sq += g * g;
    }
    const double resid = std::sqrt(resid_sq);
    Tensor2 s_next = cfg.method == SolverMethod::kNaive ? std::move(fs) : mixer.push(s, fs);
    const double rd = step_metric(s_next, s);
    trace.rel_diffs.push_back(rd);
    trace.steps_taken = step + 1;
    if (!std::isfinite(resid) || resid > kDivergenceLimit || !std::isfinite(rd)) {
      throw DivergenceError("fixed-point iteration diverged (residual " +
                                std::to_string(resid) + " at step " +
                                std::to_string(step + 1) + ")",
                            trace.rel_diffs);
    }
    s = std::move(s_next);
    if (cfg.early_stop && rd <= cfg.tol) {
      trace.converged = true;
      break;
    }
  }
  if (!trace.rel_diffs.empty() && trace.rel_diffs.back() <= cfg.tol) trace.converged = true;
  const Tensor2 fs = f(s);
  trace.final_residual = rel_diff_norm(fs, s);
  FixedPointResult out;
  out.state = std::move(s);
  out.trace = std::move(trace);
  return out;
}

namespace {

EquilibriumState solve_joint(const ModalityBundle& x, const FusionParams& params,
                             const SolverConfig& cfg) {
  x.validate();
  params.validate();
  const std::size_t n = x.n_modalities(), batch = x.batch(), width = x.width();
  const MapFn f = [&](const Tensor2& packed) {
    const JointState s = JointState::unpack(packed, n, batch, width);
    return joint_map(s, x, params, cfg.fuse_uses_fresh).pack();
  };
  const StepMetric metric = [&](const Tensor2& next, const Tensor2& prev) {
    return batch_mean_rel_diff(JointState::unpack(next, n, batch, width),
                               JointState::unpack(prev, n, batch, width));
  };
  const JointState s0 = JointState::zeros(n, batch, width);
  FixedPointResult r = solve_fixed_point(f, s0.pack(), cfg, metric);
  EquilibriumState eq;
  eq.state = JointState::unpack(r.state, n, batch, width);
  eq.trace = std::move(r.trace);
  return eq;
}

}  // namespace

EquilibriumState solve_naive(const ModalityBundle& x, const FusionParams& params,
                             SolverConfig cfg) {
  cfg.method = SolverMethod::kNaive;
  return solve_joint(x, params, cfg);
}

EquilibriumState solve_anderson(const ModalityBundle& x, const FusionParams& params,
                                SolverConfig cfg) {
  cfg.method = SolverMethod::kAnderson;
  return solve_joint(x, params, cfg);
}

EquilibriumState solve_equilibrium(const ModalityBundle& x, const FusionParams& params,
                                   const SolverConfig& cfg) {
  return solve_joint(x, params, cfg);
}

EquilibriumState solve_two_phase(const ModalityBundle& x, const FusionParams& params,
                                 const SolverConfig& cfg) {
  x.validate();
  params.validate();
  const std::size_t batch = x.batch(), width = x.width();
  EquilibriumState eq;
  eq.state = JointState::zeros(x.n_modalities(), batch, width);
  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    const MapFn f = [&](const Tensor2& z) {
      return modality_block(z, x.features[i], params, i);
    };
    eq.state.z[i] = solve_fixed_point(f, Tensor2(batch, width), cfg).state;
  }
  const Tensor2 x_fuse = injected_fusion(x, params.modality_weights);
  const MapFn f_fuse = [&](const Tensor2& zf) {
    return fuse_step(zf, eq.state.z, x_fuse, params);
  };
  FixedPointResult r = solve_fixed_point(f_fuse, Tensor2(batch, width), cfg);
  eq.state.z_fuse = std::move(r.state);
  eq.trace = std::move(r.trace);
  return eq;
}

}  // namespace deqfuse
