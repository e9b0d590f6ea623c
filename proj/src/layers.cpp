#include "deqfuse/layers.hpp"

#include <cmath>

namespace deqfuse {

void ModalityBundle::validate() const {
  if (features.empty()) throw ConfigError("ModalityBundle: need at least one modality");
  for (std::size_t i = 1; i < features.size(); ++i) {
    if (!features[i].same_shape(features[0])) {
      throw ShapeError("ModalityBundle: feature " + std::to_string(i) + " is " +
                       shape_str(features[i]) + ", expected " + shape_str(features[0]));
    }
  }
}

std::string gate_mode_name(GateMode mode) {
  switch (mode) {
    case GateMode::kAffine: return "affine";
    case GateMode::kSigmoid: return "sigmoid";
    case GateMode::kDisabled: return "disabled";
  }
  return "affine";
}

GateMode gate_mode_from_name(const std::string& name) {
  if (name == "affine") return GateMode::kAffine;
  if (name == "sigmoid") return GateMode::kSigmoid;
  if (name == "disabled") return GateMode::kDisabled;
  throw ConfigError("unknown gate mode: " + name);
}

void FusionParams::validate() const {
  if (width == 0 || n_modalities == 0) throw ConfigError("FusionParams: empty dimensions");
  if (groups == 0 || width % groups != 0) {
    throw ConfigError("FusionParams: groups (" + std::to_string(groups) +
                      ") must divide width (" + std::to_string(width) + ")");
  }
  if (blocks.size() != n_modalities) throw ConfigError("FusionParams: block count mismatch");
  if (modality_weights.cols() != n_modalities || modality_weights.rows() != 1) {
    throw ConfigError("FusionParams: modality_weights must be 1x" +
                      std::to_string(n_modalities));
  }
  if (!(eps > 0.0)) throw ConfigError("FusionParams: eps must be > 0");
}

namespace {

void visit_block(const std::string& prefix, ModalityBlockParams& b,
                 const std::function<void(const std::string&, Tensor2&)>& fn) {
  fn(prefix + ".w_pre", b.w_pre);
  fn(prefix + ".b_pre", b.b_pre);
  fn(prefix + ".w_res", b.w_res);
  fn(prefix + ".b_res", b.b_res);
  fn(prefix + ".gn_pre.scale", b.gn_pre.scale);
  fn(prefix + ".gn_pre.shift", b.gn_pre.shift);
  fn(prefix + ".gn_res.scale", b.gn_res.scale);
  fn(prefix + ".gn_res.shift", b.gn_res.shift);
  fn(prefix + ".gn_out.scale", b.gn_out.scale);
  fn(prefix + ".gn_out.shift", b.gn_out.shift);
}

}  // namespace

void visit_params(FusionParams& params,
                  const std::function<void(const std::string&, Tensor2&)>& fn) {
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    visit_block("block" + std::to_string(i), params.blocks[i], fn);
  }
  fn("gate.weight", params.gate_weight);
  fn("gate.bias", params.gate_bias);
  fn("fuse.weight", params.fuse_weight);
  fn("fuse.bias", params.fuse_bias);
  fn("gn_fuse.scale", params.gn_fuse.scale);
  fn("gn_fuse.shift", params.gn_fuse.shift);
  fn("modality_weights", params.modality_weights);
}

void visit_params(const FusionParams& params,
                  const std::function<void(const std::string&, const Tensor2&)>& fn) {
  visit_params(const_cast<FusionParams&>(params),
               [&fn](const std::string& name, Tensor2& t) { fn(name, t); });
}

FusionParams zeros_like(const FusionParams& params) {
  FusionParams out = params;
  visit_params(out, [](const std::string&, Tensor2& t) {
    t = Tensor2::zeros(t.rows(), t.cols());
  });
  return out;
}

FusionParams init_fusion_params(RngState& rng, std::size_t width,
                                std::size_t n_modalities, std::size_t groups,
                                GateMode gate_mode, const InitConfig& init) {
  FusionParams p;
  p.width = width;
  p.n_modalities = n_modalities;
  p.groups = groups;
  p.gate_mode = gate_mode;
  const double w_std = init.weight_scale / std::sqrt(static_cast<double>(width));
  for (std::size_t i = 0; i < n_modalities; ++i) {
    ModalityBlockParams b;
    b.w_pre = randn(rng, width, width, w_std);
    b.b_pre = randn(rng, 1, width, init.pre_bias_std);
    b.w_res = randn(rng, width, width, w_std);
    b.b_res = Tensor2::zeros(1, width);
    b.gn_pre = {Tensor2::full(1, width, 1.0), Tensor2::zeros(1, width)};
    b.gn_res = {Tensor2::full(1, width, 1.0), Tensor2::zeros(1, width)};
    b.gn_out = {Tensor2::full(1, width, init.output_gn_scale), Tensor2::zeros(1, width)};
    p.blocks.push_back(std::move(b));
  }
  p.gate_weight = randn(rng, width, width, w_std);
  p.gate_bias = Tensor2::zeros(1, width);
  p.fuse_weight = randn(rng, width, width, w_std);
  p.fuse_bias = Tensor2::zeros(1, width);
  p.gn_fuse = {Tensor2::full(1, width, init.output_gn_scale), Tensor2::zeros(1, width)};
  p.modality_weights = Tensor2::full(1, n_modalities, 1.0 / static_cast<double>(n_modalities));
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------

Tensor2 relu(const Tensor2& x) {
  Tensor2 out = x;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = out[k] > 0.0 ? out[k] : 0.0;
  return out;
}

Tensor2 relu_vjp(const Tensor2& x, const Tensor2& upstream) {
  require_same_shape(x, upstream, "relu_vjp");
  Tensor2 out = upstream;
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (!(x[k] > 0.0)) out[k] = 0.0;
  }
  return out;
}

Tensor2 affine(const Tensor2& x, const Tensor2& w, const Tensor2& b) {
  return add_row_broadcast(matmul(x, w), b);
}

AffineGrads affine_vjp(const Tensor2& x, const Tensor2& w, const Tensor2& upstream) {
  AffineGrads g;
  g.dx = matmul(upstream, transpose(w));
  g.dw = matmul(transpose(x), upstream);
  g.db = col_sums(upstream);
  return g;
}

Tensor2 group_norm(const Tensor2& x, std::size_t groups, double eps,
                   const Tensor2& scale, const Tensor2& shift, GroupNormCache* cache) {
  const std::size_t d = x.cols();
  if (groups == 0 || d % groups != 0) {
    throw ConfigError("group_norm: groups (" + std::to_string(groups) +
                      ") must divide width (" + std::to_string(d) + ")");
  }
  if (!(eps > 0.0)) throw ConfigError("group_norm: eps must be > 0");
  if (scale.cols() != d || shift.cols() != d) {
    throw ShapeError("group_norm: affine must be 1x" + std::to_string(d));
  }
  const std::size_t m = d / groups;
  const std::size_t batch = x.rows();
  Tensor2 xhat(batch, d);
  Tensor2 inv_std(batch, groups);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t off = g * m;
      double mean = 0.0;
      for (std::size_t j = 0; j < m; ++j) mean += x(i, off + j);
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double c = x(i, off + j) - mean;
        var += c * c;
      }
      var /= static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std(i, g) = inv;
      for (std::size_t j = 0; j < m; ++j) xhat(i, off + j) = (x(i, off + j) - mean) * inv;
    }
  }
  Tensor2 out(batch, d);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out(i, j) = xhat(i, j) * scale(0, j) + shift(0, j);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->groups = groups;
  }
  return out;
}

GroupNormGrads group_norm_vjp(const GroupNormCache& cache, const Tensor2& scale,
                              const Tensor2& upstream) {
  if (cache.groups == 0) throw StateError("group_norm_vjp: cache not populated");
  const Tensor2& xhat = cache.xhat;
  require_same_shape(xhat, upstream, "group_norm_vjp");
  const std::size_t batch = xhat.rows(), d = xhat.cols();
  const std::size_t groups = cache.groups, m = d / groups;
  GroupNormGrads g;
  g.dscale = Tensor2(1, d);
  g.dshift = Tensor2(1, d);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      g.dscale(0, j) += upstream(i, j) * xhat(i, j);
      g.dshift(0, j) += upstream(i, j);
    }
  }
  g.dx = Tensor2(batch, d);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t off = gi * m;
      double mean_u = 0.0, mean_ux = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double uh = upstream(i, off + j) * scale(0, off + j);
        mean_u += uh;
        mean_ux += uh * xhat(i, off + j);
      }
      mean_u /= static_cast<double>(m);
      mean_ux /= static_cast<double>(m);
      const double inv = cache.inv_std(i, gi);
      for (std::size_t j = 0; j < m; ++j) {
        const double uh = upstream(i, off + j) * scale(0, off + j);
        g.dx(i, off + j) = inv * (uh - mean_u - xhat(i, off + j) * mean_ux);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

Tensor2 modality_block(const Tensor2& z, const Tensor2& x, const FusionParams& params,
                       std::size_t i, ModalityBlockCache* cache) {
  require_same_shape(z, x, "modality_block");
  if (i >= params.blocks.size()) throw ConfigError("modality_block: index out of range");
  const ModalityBlockParams& b = params.blocks[i];
  if (z.cols() != params.width) {
    throw ShapeError("modality_block: input is " + shape_str(z) + ", width must be " +
                     std::to_string(params.width));
  }
  ModalityBlockCache local;
  ModalityBlockCache& c = cache != nullptr ? *cache : local;
  c.z = z;
  const Tensor2 a_pre = affine(z, b.w_pre, b.b_pre);
  c.h_pre = group_norm(a_pre, params.groups, params.eps, b.gn_pre.scale, b.gn_pre.shift,
                       &c.gn_pre);
  c.z_hat = relu(c.h_pre);
  Tensor2 a_res = add(affine(c.z_hat, b.w_res, b.b_res), x);
  c.z_tilde = group_norm(a_res, params.groups, params.eps, b.gn_res.scale,
                         b.gn_res.shift, &c.gn_res);
  c.r_out = relu(c.z_tilde);
  return group_norm(c.r_out, params.groups, params.eps, b.gn_out.scale, b.gn_out.shift,
                    &c.gn_out);
}

ModalityBlockGrads modality_block_vjp(const ModalityBlockCache& cache,
                                      const FusionParams& params, std::size_t i,
                                      const Tensor2& upstream) {
  const ModalityBlockParams& b = params.blocks[i];
  ModalityBlockGrads g;
  GroupNormGrads g3 = group_norm_vjp(cache.gn_out, b.gn_out.scale, upstream);
  g.dparams.gn_out = {std::move(g3.dscale), std::move(g3.dshift)};
  const Tensor2 dz_tilde = relu_vjp(cache.z_tilde, g3.dx);
  GroupNormGrads g2 = group_norm_vjp(cache.gn_res, b.gn_res.scale, dz_tilde);
  g.dparams.gn_res = {std::move(g2.dscale), std::move(g2.dshift)};
  AffineGrads ga2 = affine_vjp(cache.z_hat, b.w_res, g2.dx);
  g.dparams.w_res = std::move(ga2.dw);
  g.dparams.b_res = std::move(ga2.db);
  g.dx = g2.dx;  // the injected input enters the residual sum directly
  const Tensor2 dh_pre = relu_vjp(cache.h_pre, ga2.dx);
  GroupNormGrads g1 = group_norm_vjp(cache.gn_pre, b.gn_pre.scale, dh_pre);
  g.dparams.gn_pre = {std::move(g1.dscale), std::move(g1.dshift)};
  AffineGrads ga1 = affine_vjp(cache.z, b.w_pre, g1.dx);
  g.dparams.w_pre = std::move(ga1.dw);
  g.dparams.b_pre = std::move(ga1.db);
  g.dz = std::move(ga1.dx);
  return g;
}

Tensor2 gate(const Tensor2& z_fuse, const Tensor2& z_i, const FusionParams& params) {
  require_same_shape(z_fuse, z_i, "gate");
  Tensor2 pre = affine(add(z_fuse, z_i), params.gate_weight, params.gate_bias);
  if (params.gate_mode == GateMode::kSigmoid) {
    for (std::size_t k = 0; k < pre.size(); ++k) pre[k] = 1.0 / (1.0 + std::exp(-pre[k]));
  }
  return pre;
}

Tensor2 fuse_step(const Tensor2& z_fuse, const std::vector<Tensor2>& z_all,
                  const Tensor2& x_fuse, const FusionParams& params,
                  FuseStepCache* cache) {
  if (z_all.empty()) throw ConfigError("fuse_step: no modalities");
  require_same_shape(z_fuse, x_fuse, "fuse_step");
  for (const Tensor2& z : z_all) require_same_shape(z_fuse, z, "fuse_step");
  FuseStepCache local;
  FuseStepCache& c = cache != nullptr ? *cache : local;
  c.z_fuse = z_fuse;
  c.z_all = z_all;
  c.alphas.clear();
  c.gate_pre.clear();
  Tensor2 sum(z_fuse.rows(), z_fuse.cols());
  for (const Tensor2& zi : z_all) {
    if (params.gate_mode == GateMode::kDisabled) {
      add_in_place(sum, zi);
      continue;
    }
    Tensor2 pre = affine(add(z_fuse, zi), params.gate_weight, params.gate_bias);
    Tensor2 alpha = pre;
    if (params.gate_mode == GateMode::kSigmoid) {
      for (std::size_t k = 0; k < alpha.size(); ++k)
        alpha[k] = 1.0 / (1.0 + std::exp(-alpha[k]));
    }
    add_in_place(sum, hadamard(alpha, z_fuse));
    c.gate_pre.push_back(std::move(pre));
    c.alphas.push_back(std::move(alpha));
  }
  c.purified_sum = sum;
  c.pre_relu = add(affine(sum, params.fuse_weight, params.fuse_bias), x_fuse);
  const Tensor2 r = relu(c.pre_relu);
  return group_norm(r, params.groups, params.eps, params.gn_fuse.scale,
                    params.gn_fuse.shift, &c.gn_fuse);
}

FuseStepGrads fuse_step_vjp(const FuseStepCache& cache, const FusionParams& params,
                            const Tensor2& upstream) {
  FuseStepGrads g;
  GroupNormGrads gn = group_norm_vjp(cache.gn_fuse, params.gn_fuse.scale, upstream);
  g.dgn_scale = std::move(gn.dscale);
  g.dgn_shift = std::move(gn.dshift);
  const Tensor2 da = relu_vjp(cache.pre_relu, gn.dx);
  g.dx_fuse = da;
  AffineGrads gf = affine_vjp(cache.purified_sum, params.fuse_weight, da);
  g.dfuse_weight = std::move(gf.dw);
  g.dfuse_bias = std::move(gf.db);
  const Tensor2& d_sum = gf.dx;
  g.dz_fuse = Tensor2(cache.z_fuse.rows(), cache.z_fuse.cols());
  g.dgate_weight = Tensor2(params.gate_weight.rows(), params.gate_weight.cols());
  g.dgate_bias = Tensor2(1, params.width);
  g.dz.clear();
  for (std::size_t i = 0; i < cache.z_all.size(); ++i) {
    if (params.gate_mode == GateMode::kDisabled) {
      g.dz.push_back(d_sum);
      continue;
    }
    const Tensor2& alpha = cache.alphas[i];
    Tensor2 dalpha = hadamard(d_sum, cache.z_fuse);
    add_in_place(g.dz_fuse, hadamard(d_sum, alpha));
    if (params.gate_mode == GateMode::kSigmoid) {
      for (std::size_t k = 0; k < dalpha.size(); ++k)
        dalpha[k] *= alpha[k] * (1.0 - alpha[k]);
    }
    AffineGrads gg =
        affine_vjp(add(cache.z_fuse, cache.z_all[i]), params.gate_weight, dalpha);
    add_in_place(g.dgate_weight, gg.dw);
    add_in_place(g.dgate_bias, gg.db);
    add_in_place(g.dz_fuse, gg.dx);
    g.dz.push_back(std::move(gg.dx));
  }
  return g;
}

Tensor2 injected_fusion(const ModalityBundle& x, const Tensor2& weights) {
  x.validate();
  if (weights.rows() != 1 || weights.cols() != x.n_modalities()) {
    throw ConfigError("injected_fusion: need 1x" + std::to_string(x.n_modalities()) +
                      " weights, got " + shape_str(weights));
  }
  Tensor2 out(x.batch(), x.width());
  for (std::size_t i = 0; i < x.n_modalities(); ++i) {
    axpy_in_place(out, weights(0, i), x.features[i]);
  }
  return out;
}

}  // namespace deqfuse
