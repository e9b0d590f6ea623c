#include "deqfuse/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deqfuse {

HeadParams init_head(RngState& rng, std::size_t width, std::size_t classes) {
  if (classes < 2) throw ConfigError("init_head: need at least two classes");
  HeadParams h;
  h.weight = randn(rng, width, classes, 1.0 / std::sqrt(static_cast<double>(width)));
  h.bias = Tensor2(1, classes);
  return h;
}

std::string variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull: return "full";
    case AblationVariant::kWeightedSumOnly: return "weighted_sum";
    case AblationVariant::kNoDeq: return "no_deq";
    case AblationVariant::kNoFuse: return "no_fuse";
    case AblationVariant::kNoTheta: return "no_theta";
    case AblationVariant::kNoGate: return "no_gate";
  }
  return "full";
}

AblationVariant variant_from_name(const std::string& name) {
  for (AblationVariant v : all_variants()) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown ablation variant: " + name);
}

const std::vector<AblationVariant>& all_variants() {
  static const std::vector<AblationVariant> kAll = {
      AblationVariant::kWeightedSumOnly, AblationVariant::kNoDeq,
      AblationVariant::kNoFuse,          AblationVariant::kNoTheta,
      AblationVariant::kNoGate,          AblationVariant::kFull,
  };
  return kAll;
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw ConfigError("TrainConfig: epochs and batch size must be positive");
  if (lr < 0.0) throw ConfigError("TrainConfig: lr must be >= 0");
  if (jacobian_reg_weight < 0.0) throw ConfigError("TrainConfig: jacobian_reg_weight must be >= 0");
  solver.validate();
}

SignProductData gen_signproduct(const SyntheticTaskSpec& spec, RngState& rng) {
  if (spec.n_modalities != 2 || spec.classes != 4) {
    throw ConfigError("gen_signproduct: task is defined for 2 modalities, 4 classes");
  }
  const std::size_t d = spec.width;
  if (d < 3) throw ConfigError("gen_signproduct: width must be >= 3");
  // three orthonormal latent directions via Gram-Schmidt
  std::vector<Tensor2> dirs;
  for (int k = 0; k < 3; ++k) {
    Tensor2 v = randn(rng, 1, d, 1.0);
    for (const Tensor2& prev : dirs) {
      axpy_in_place(v, -dot(v, prev), prev);
    }
    const double n = frobenius_norm(v);
    if (n < 1e-8) throw NumericError("gen_signproduct: degenerate directions");
    v = scaled(v, 1.0 / n);
    dirs.push_back(std::move(v));
  }
  const Tensor2& v1 = dirs[0];
  const Tensor2& u1 = dirs[1];
  const Tensor2& v2 = dirs[2];

  auto draw_split = [&](std::size_t n) {
    Dataset out;
    out.directions = dirs;
    Tensor2 x1(n, d), x2(n, d);
    out.labels.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
      const double s1 = rng.next_uniform() < 0.5 ? -1.0 : 1.0;
      const double s2 = rng.next_uniform() < 0.5 ? -1.0 : 1.0;
      const double r1 = rng.next_uniform() < 0.5 ? -1.0 : 1.0;
      for (std::size_t j = 0; j < d; ++j) {
        x1(s, j) = s1 * v1(0, j) + r1 * u1(0, j) + spec.sigma * rng.next_gaussian();
        x2(s, j) = s2 * v2(0, j) + spec.sigma * rng.next_gaussian();
      }
      out.labels[s] = 2 * (s1 * s2 > 0.0 ? 1 : 0) + (r1 > 0.0 ? 1 : 0);
    }
    out.x.features = {std::move(x1), std::move(x2)};
    return out;
  };

  SignProductData data;
  data.train = draw_split(spec.n_train);
  data.test = draw_split(spec.n_test);
  return data;
}

CrossEntropy softmax_cross_entropy(const Tensor2& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.rows(), C = logits.cols();
  if (labels.size() != B) throw ShapeError("softmax_cross_entropy: one logit row per label");
  if (B == 0) throw ConfigError("softmax_cross_entropy: empty batch");
  CrossEntropy out;
  out.dlogits = Tensor2(B, C);
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ConfigError("softmax_cross_entropy: label out of range");
    }
    double mx = logits(i, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits(i, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(logits(i, c) - mx);
    const double lse = mx + std::log(sum);
    loss += lse - logits(i, static_cast<std::size_t>(y));
    for (std::size_t c = 0; c < C; ++c) {
      double p = std::exp(logits(i, c) - mx) / sum;
      if (c == static_cast<std::size_t>(y)) p -= 1.0;
      out.dlogits(i, c) = p / static_cast<double>(B);
    }
  }
  out.loss = loss / static_cast<double>(B);
  return out;
}

MetricsResult compute_metrics(const Tensor2& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.rows(), C = logits.cols();
  if (B == 0) throw ConfigError("compute_metrics: empty input");
  if (labels.size() != B) throw ShapeError("compute_metrics: one logit row per label");
  std::vector<std::size_t> tp(C, 0), fp(C, 0), fn(C, 0), support(C, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t pred = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits(i, c) > logits(i, pred)) pred = c;
    const auto y = static_cast<std::size_t>(labels[i]);
    ++support[y];
    if (pred == y) {
      ++correct;
      ++tp[y];
    } else {
      ++fp[pred];
      ++fn[y];
    }
  }
  MetricsResult m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(B);
  double macro = 0.0, weighted = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    const double f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
    macro += f1;
    weighted += f1 * static_cast<double>(support[c]);
  }
  m.macro_f1 = macro / static_cast<double>(C);
  m.weighted_f1 = weighted / static_cast<double>(B);
  return m;
}

namespace {

Tensor2 head_logits(const Tensor2& z, const HeadParams& head) {
  return affine(z, head.weight, head.bias);
}

SolverTrace single_sweep_trace() {
  SolverTrace t;
  t.steps_taken = 1;
  t.converged = true;
  return t;
}

FusionParams variant_params(const FusionParams& params, AblationVariant variant) {
  if (variant == AblationVariant::kNoGate && params.gate_mode != GateMode::kDisabled) {
    FusionParams p = params;
    p.gate_mode = GateMode::kDisabled;
    return p;
  }
  return params;
}

}  // namespace

ForwardResult forward_predict(const ModalityBundle& x, const FusionParams& params_in,
                              const HeadParams& head, AblationVariant variant,
                              const SolverConfig& solver_cfg) {
  x.validate();
  const FusionParams params = variant_params(params_in, variant);
  const std::size_t n = x.n_modalities(), batch = x.batch(), width = x.width();
  ForwardResult out;
  switch (variant) {
    case AblationVariant::kWeightedSumOnly: {
      out.eq.state = JointState::zeros(n, batch, width);
      out.eq.state.z_fuse = injected_fusion(x, params.modality_weights);
      out.eq.trace = single_sweep_trace();
      break;
    }
    case AblationVariant::kNoDeq: {
      const JointState s0 = JointState::zeros(n, batch, width);
      out.eq.state = joint_map(s0, x, params);
      out.eq.trace = single_sweep_trace();
      break;
    }
    case AblationVariant::kNoFuse: {
      out.eq.state = JointState::zeros(n, batch, width);
      SolverTrace last;
      for (std::size_t i = 0; i < n; ++i) {
        const MapFn f = [&](const Tensor2& z) {
          return modality_block(z, x.features[i], params, i);
        };
        FixedPointResult r = solve_fixed_point(f, Tensor2(batch, width), solver_cfg);
        out.eq.state.z[i] = std::move(r.state);
        last = std::move(r.trace);
      }
      for (const Tensor2& zi : out.eq.state.z) add_in_place(out.eq.state.z_fuse, zi);
      out.eq.trace = std::move(last);
      break;
    }
    case AblationVariant::kNoTheta: {
      out.eq.state = JointState::zeros(n, batch, width);
      out.eq.state.z = x.features;
      const Tensor2 x_fuse = injected_fusion(x, params.modality_weights);
      const MapFn f = [&](const Tensor2& zf) {
        return fuse_step(zf, x.features, x_fuse, params);
      };
      FixedPointResult r = solve_fixed_point(f, Tensor2(batch, width), solver_cfg);
      out.eq.state.z_fuse = std::move(r.state);
      out.eq.trace = std::move(r.trace);
      break;
    }
    case AblationVariant::kFull:
    case AblationVariant::kNoGate: {
      out.eq = solve_equilibrium(x, params, solver_cfg);
      break;
    }
  }
  out.logits = head_logits(out.eq.state.z_fuse, head);
  return out;
}

namespace {

struct ParamSet {
  std::vector<Tensor2*> tensors;

  explicit ParamSet(FusionParams& p, HeadParams& h) {
    visit_params(p, [this](const std::string&, Tensor2& t) { tensors.push_back(&t); });
    tensors.push_back(&h.weight);
    tensors.push_back(&h.bias);
  }
};

struct GradSet {
  std::vector<Tensor2> tensors;

  GradSet(const FusionParams& p, const HeadParams& h) {
    visit_params(p, [this](const std::string&, const Tensor2& t) {
      tensors.emplace_back(t.rows(), t.cols());
    });
    tensors.emplace_back(h.weight.rows(), h.weight.cols());
    tensors.emplace_back(h.bias.rows(), h.bias.cols());
  }

  void zero() {
    for (Tensor2& t : tensors) t = Tensor2(t.rows(), t.cols());
  }

  // fusion-parameter gradients map onto the leading slots in visit order
  void accumulate_fusion(const FusionParams& grads, double weight = 1.0) {
    std::size_t idx = 0;
    visit_params(grads, [this, &idx, weight](const std::string&, const Tensor2& g) {
      axpy_in_place(tensors[idx++], weight, g);
    });
  }
};

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ParamSet& params) : cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::kAdam) {
      for (const Tensor2* t : params.tensors) {
        m_.emplace_back(t->rows(), t->cols());
        v_.emplace_back(t->rows(), t->cols());
      }
    }
  }

  void step(ParamSet& params, const GradSet& grads) {
    if (cfg_.optimizer == OptimizerKind::kSgd) {
      for (std::size_t k = 0; k < params.tensors.size(); ++k) {
        axpy_in_place(*params.tensors[k], -cfg_.lr, grads.tensors[k]);
      }
      return;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.tensors.size(); ++k) {
      Tensor2& p = *params.tensors[k];
      const Tensor2& g = grads.tensors[k];
      Tensor2& m = m_[k];
      Tensor2& v = v_[k];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = cfg_.adam_beta1 * m[j] + (1.0 - cfg_.adam_beta1) * g[j];
        v[j] = cfg_.adam_beta2 * v[j] + (1.0 - cfg_.adam_beta2) * g[j] * g[j];
        p[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.adam_eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor2> m_, v_;
};

ModalityBundle slice_bundle(const ModalityBundle& x, const std::vector<std::size_t>& idx) {
  ModalityBundle out;
  for (const Tensor2& f : x.features) {
    Tensor2 s(idx.size(), f.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < f.cols(); ++c) s(r, c) = f(idx[r], c);
    out.features.push_back(std::move(s));
  }
  return out;
}

// Gradients of the cross-entropy with respect to the fusion parameters for
// one minibatch, dispatched per variant. Head gradients are returned
// separately. The recurrent variants go through the implicit backward pass.
void variant_backward(const ModalityBundle& xb, const FusionParams& params,
                      const HeadParams& head, AblationVariant variant,
                      const ForwardResult& fwd, const Tensor2& dlogits,
                      const SolverConfig& adjoint_cfg, GradientBundle* out_grads,
                      Tensor2* out_dhead_w, Tensor2* out_dhead_b) {
  const AffineGrads head_g = affine_vjp(fwd.eq.state.z_fuse, head.weight, dlogits);
  *out_dhead_w = head_g.dw;
  *out_dhead_b = head_g.db;
  const Tensor2& dl_dzfuse = head_g.dx;
  GradientBundle grads = zero_gradients(params, xb);
  switch (variant) {
    case AblationVariant::kWeightedSumOnly: {
      for (std::size_t i = 0; i < xb.n_modalities(); ++i) {
        grads.params.modality_weights(0, i) += dot(dl_dzfuse, xb.features[i]);
        axpy_in_place(grads.inputs[i], params.modality_weights(0, i), dl_dzfuse);
      }
      break;
    }
    case AblationVariant::kNoDeq: {
      grads = backward_unrolled(xb, params, dl_dzfuse, 1);
      break;
    }
    case AblationVariant::kNoFuse: {
      for (std::size_t i = 0; i < xb.n_modalities(); ++i) {
        ModalityBlockCache cache;
        modality_block(fwd.eq.state.z[i], xb.features[i], params, i, &cache);
        const VjpFn vjp = [&](const Tensor2& u) {
          return modality_block_vjp(cache, params, i, u).dz;
        };
        const AdjointResult adj = solve_adjoint(vjp, dl_dzfuse, adjoint_cfg);
        ModalityBlockGrads bg = modality_block_vjp(cache, params, i, adj.u);
        add_in_place(grads.params.blocks[i].w_pre, bg.dparams.w_pre);
        add_in_place(grads.params.blocks[i].b_pre, bg.dparams.b_pre);
        add_in_place(grads.params.blocks[i].w_res, bg.dparams.w_res);
        add_in_place(grads.params.blocks[i].b_res, bg.dparams.b_res);
        add_in_place(grads.params.blocks[i].gn_pre.scale, bg.dparams.gn_pre.scale);
        add_in_place(grads.params.blocks[i].gn_pre.shift, bg.dparams.gn_pre.shift);
        add_in_place(grads.params.blocks[i].gn_res.scale, bg.dparams.gn_res.scale);
        add_in_place(grads.params.blocks[i].gn_res.shift, bg.dparams.gn_res.shift);
        add_in_place(grads.params.blocks[i].gn_out.scale, bg.dparams.gn_out.scale);
        add_in_place(grads.params.blocks[i].gn_out.shift, bg.dparams.gn_out.shift);
        add_in_place(grads.inputs[i], bg.dx);
      }
      break;
    }
    case AblationVariant::kNoTheta: {
      const Tensor2 x_fuse = injected_fusion(xb, params.modality_weights);
      FuseStepCache cache;
      fuse_step(fwd.eq.state.z_fuse, xb.features, x_fuse, params, &cache);
      const VjpFn vjp = [&](const Tensor2& u) {
        return fuse_step_vjp(cache, params, u).dz_fuse;
      };
      const AdjointResult adj = solve_adjoint(vjp, dl_dzfuse, adjoint_cfg);
      FuseStepGrads fg = fuse_step_vjp(cache, params, adj.u);
      add_in_place(grads.params.gate_weight, fg.dgate_weight);
      add_in_place(grads.params.gate_bias, fg.dgate_bias);
      add_in_place(grads.params.fuse_weight, fg.dfuse_weight);
      add_in_place(grads.params.fuse_bias, fg.dfuse_bias);
      add_in_place(grads.params.gn_fuse.scale, fg.dgn_scale);
      add_in_place(grads.params.gn_fuse.shift, fg.dgn_shift);
      for (std::size_t i = 0; i < xb.n_modalities(); ++i) {
        grads.params.modality_weights(0, i) += dot(fg.dx_fuse, xb.features[i]);
        // z_i = x_i here, so the fuse cotangent lands on the input directly
        add_in_place(grads.inputs[i], fg.dz[i]);
        axpy_in_place(grads.inputs[i], params.modality_weights(0, i), fg.dx_fuse);
      }
      break;
    }
    case AblationVariant::kFull:
    case AblationVariant::kNoGate: {
      grads = backward(fwd.eq, xb, params, dl_dzfuse, adjoint_cfg);
      break;
    }
  }
  *out_grads = std::move(grads);
}

// Directional finite-difference surrogate of the Jacobian penalty
// ||J eps||^2 / dim at the solved state, with exact parameter gradients of
// the surrogate itself. Returns the penalty value; accumulates gradients.
double jacobian_penalty(const FusionParams& params, const ModalityBundle& xb,
                        const JointState& state, RngState& rng, double weight,
                        GradientBundle* accum) {
  const std::size_t n = xb.n_modalities(), batch = xb.batch(), width = xb.width();
  const double dim = static_cast<double>((n + 1) * batch * width);
  const double h = 1e-3;
  JointState eps;
  eps.z.reserve(n);
  for (std::size_t i = 0; i < n; ++i) eps.z.push_back(randn(rng, batch, width, 1.0));
  eps.z_fuse = randn(rng, batch, width, 1.0);
  JointState shifted = state;
  for (std::size_t i = 0; i < n; ++i) axpy_in_place(shifted.z[i], h, eps.z[i]);
  axpy_in_place(shifted.z_fuse, h, eps.z_fuse);

  JointMapCache cache0, cache1;
  const JointState f0 = joint_map(state, xb, params, true, &cache0);
  const JointState f1 = joint_map(shifted, xb, params, true, &cache1);
  JointState delta = f1;
  for (std::size_t i = 0; i < n; ++i) delta.z[i] = sub(delta.z[i], f0.z[i]);
  delta.z_fuse = sub(delta.z_fuse, f0.z_fuse);
  double sq = dot(delta.z_fuse, delta.z_fuse);
  for (const Tensor2& t : delta.z) sq += dot(t, t);
  const double value = sq / (h * h * dim);

  const double coef = 2.0 * weight / (h * h * dim);
  GradientBundle plus = zero_gradients(params, xb);
  GradientBundle minus = zero_gradients(params, xb);
  joint_map_vjp(cache1, params, xb, delta, true, &plus);
  joint_map_vjp(cache0, params, xb, delta, true, &minus);
  std::size_t idx = 0;
  std::vector<Tensor2*> acc_slots;
  visit_params(accum->params, [&](const std::string&, Tensor2& t) { acc_slots.push_back(&t); });
  visit_params(plus.params, [&](const std::string& name, Tensor2& t) {
    axpy_in_place(*acc_slots[idx], coef, t);
    ++idx;
  });
  idx = 0;
  visit_params(minus.params, [&](const std::string& name, Tensor2& t) {
    axpy_in_place(*acc_slots[idx], -coef, t);
    ++idx;
  });
  return value;
}

}  // namespace

TrainResult train(const Dataset& train_data, const Dataset& test_data,
                  const TrainConfig& config) {
  config.validate();
  train_data.x.validate();
  const std::size_t n_train = train_data.x.batch();
  const std::size_t width = train_data.x.width();
  const std::size_t classes =
      1 + static_cast<std::size_t>(
              *std::max_element(train_data.labels.begin(), train_data.labels.end()));

  RngState rng(config.seed);
  const GateMode mode = config.variant == AblationVariant::kNoGate ? GateMode::kDisabled
                                                                   : GateMode::kAffine;
  TrainResult result;
  result.params = init_fusion_params(rng, width, train_data.x.n_modalities(), 1, mode);
  result.head = init_head(rng, width, classes);

  ParamSet param_set(result.params, result.head);
  GradSet grad_set(result.params, result.head);
  Optimizer opt(config, param_set);
  SolverConfig adjoint_cfg = default_adjoint_config();

  // every DEQ-solving variant gets the stabilizing penalty; the one-shot
  // pipelines have no recurrence to regularize
  const bool recurrent = config.variant != AblationVariant::kWeightedSumOnly &&
                         config.variant != AblationVariant::kNoDeq;

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with the run's own stream
    for (std::size_t i = n_train; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n_train; start += config.batch_size) {
      const std::size_t stop = std::min(start + config.batch_size, n_train);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      const ModalityBundle xb = slice_bundle(train_data.x, idx);
      std::vector<int> yb(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) yb[k] = train_data.labels[idx[k]];

      const ForwardResult fwd =
          forward_predict(xb, result.params, result.head, config.variant, config.solver);
      const CrossEntropy ce = softmax_cross_entropy(fwd.logits, yb);
      double batch_loss = ce.loss;

      GradientBundle fusion_grads;
      Tensor2 dhead_w, dhead_b;
      variant_backward(xb, variant_params(result.params, config.variant), result.head,
                       config.variant, fwd, ce.dlogits, adjoint_cfg, &fusion_grads,
                       &dhead_w, &dhead_b);

      if (config.jacobian_reg_weight > 0.0 && recurrent) {
        batch_loss += config.jacobian_reg_weight *
                      jacobian_penalty(variant_params(result.params, config.variant), xb,
                                       fwd.eq.state, rng, config.jacobian_reg_weight,
                                       &fusion_grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("training aborted: non-finite loss at epoch " +
                           std::to_string(epoch) + ", sample offset " +
                           std::to_string(start) + " (variant " +
                           variant_name(config.variant) + ")");
      }
      epoch_loss += batch_loss * static_cast<double>(idx.size());

      grad_set.zero();
      grad_set.accumulate_fusion(fusion_grads.params);
      add_in_place(grad_set.tensors[grad_set.tensors.size() - 2], dhead_w);
      add_in_place(grad_set.tensors[grad_set.tensors.size() - 1], dhead_b);
      if (config.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const Tensor2& t : grad_set.tensors) sq += dot(t, t);
        const double norm = std::sqrt(sq);
        if (norm > config.max_grad_norm) {
          const double s = config.max_grad_norm / norm;
          for (Tensor2& t : grad_set.tensors) t = scaled(t, s);
        }
      }
      opt.step(param_set, grad_set);
    }

    const ForwardResult test_fwd = forward_predict(test_data.x, result.params, result.head,
                                                   config.variant, config.solver);
    const MetricsResult m = compute_metrics(test_fwd.logits, test_data.labels);
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(n_train);
    stats.test_accuracy = m.accuracy;
    stats.macro_f1 = m.macro_f1;
    stats.weighted_f1 = m.weighted_f1;
    result.history.push_back(stats);
  }
  return result;
}

}  // namespace deqfuse
