#ifndef DEQFUSE_LAYERS_HPP
#define DEQFUSE_LAYERS_HPP

#include <functional>
#include <string>
#include <vector>

#include "deqfuse/rng.hpp"
#include "deqfuse/tensor.hpp"

namespace deqfuse {

/// Per-modality input features x_1..x_N, all batch x d.
struct ModalityBundle {
  std::vector<Tensor2> features;

  std::size_t n_modalities() const noexcept { return features.size(); }
  std::size_t batch() const noexcept { return features.empty() ? 0 : features[0].rows(); }
  std::size_t width() const noexcept { return features.empty() ? 0 : features[0].cols(); }
  void validate() const;
};

/// How the soft gate weights the fused feature. kAffine is the literal map
/// alpha = W(z_fuse + z_i) + b; kSigmoid squashes it; kDisabled replaces the
/// purified feature by the modality feature itself (the gating ablation).
enum class GateMode { kAffine, kSigmoid, kDisabled };

std::string gate_mode_name(GateMode mode);
GateMode gate_mode_from_name(const std::string& name);

struct GroupNormAffine {
  Tensor2 scale;  // 1 x d
  Tensor2 shift;  // 1 x d
};

/// One modality's residual block: out = GN(ReLU(GN(W_res ReLU(GN(W_pre z +
/// b_pre)) + x + b_res))) with a per-site affine on every normalization.
struct ModalityBlockParams {
  Tensor2 w_pre, b_pre;  // d x d, 1 x d
  Tensor2 w_res, b_res;
  GroupNormAffine gn_pre, gn_res, gn_out;
};

struct FusionParams {
  std::size_t width = 0;
  std::size_t n_modalities = 0;
  std::size_t groups = 1;
  double eps = 1e-5;
  GateMode gate_mode = GateMode::kAffine;

  std::vector<ModalityBlockParams> blocks;
  Tensor2 gate_weight, gate_bias;  // shared across modalities
  Tensor2 fuse_weight, fuse_bias;
  GroupNormAffine gn_fuse;
  Tensor2 modality_weights;  // 1 x N importance weights

  void validate() const;
};

/// Visits every learnable tensor in a stable order with stable names
/// (block0.w_pre, ..., gate.weight, fuse.weight, modality_weights).
void visit_params(FusionParams& params,
                  const std::function<void(const std::string&, Tensor2&)>& fn);
void visit_params(const FusionParams& params,
                  const std::function<void(const std::string&, const Tensor2&)>& fn);

FusionParams zeros_like(const FusionParams& params);

/// Random initialization. Weight matrices get std init_weight_scale/sqrt(d);
/// the pre-projection bias is drawn N(0, 0.5^2) and the output-site group-norm
/// scales start at 0.5 so the layer map contracts at initialization (the
/// normalization stages are otherwise scale-free and can sustain mask
/// oscillations). Remaining biases and shifts start at zero, w_i = 1/N.
struct InitConfig {
  double weight_scale = 0.25;
  double pre_bias_std = 0.5;
  double output_gn_scale = 0.5;
};

FusionParams init_fusion_params(RngState& rng, std::size_t width,
                                std::size_t n_modalities, std::size_t groups = 1,
                                GateMode gate_mode = GateMode::kAffine,
                                const InitConfig& init = {});

// ---------------------------------------------------------------------------
// Primitives. Forward functions optionally fill a cache; the matching *_vjp
// consumes it and returns exact reverse-mode cotangents.
// ---------------------------------------------------------------------------

Tensor2 relu(const Tensor2& x);
/// Cotangent of ReLU given the forward input (derivative at 0 is 0).
Tensor2 relu_vjp(const Tensor2& x, const Tensor2& upstream);

/// y = x W + b with b broadcast across rows.
Tensor2 affine(const Tensor2& x, const Tensor2& w, const Tensor2& b);
struct AffineGrads {
  Tensor2 dx, dw, db;
};
AffineGrads affine_vjp(const Tensor2& x, const Tensor2& w, const Tensor2& upstream);

struct GroupNormCache {
  Tensor2 xhat;     // batch x d, normalized pre-affine
  Tensor2 inv_std;  // batch x groups
  std::size_t groups = 0;
};

/// Standardizes each of `groups` contiguous channel groups per sample to zero
/// mean / unit variance (eps inside the square root), then applies the
/// per-channel affine.
Tensor2 group_norm(const Tensor2& x, std::size_t groups, double eps,
                   const Tensor2& scale, const Tensor2& shift,
                   GroupNormCache* cache = nullptr);

struct GroupNormGrads {
  Tensor2 dx, dscale, dshift;
};
GroupNormGrads group_norm_vjp(const GroupNormCache& cache, const Tensor2& scale,
                              const Tensor2& upstream);

// ---------------------------------------------------------------------------
// Composite maps.
// ---------------------------------------------------------------------------

struct ModalityBlockCache {
  Tensor2 z, h_pre, z_hat, z_tilde, r_out;
  GroupNormCache gn_pre, gn_res, gn_out;
};

/// f_theta_i(z; x): the three-stage residual block for modality i.
Tensor2 modality_block(const Tensor2& z, const Tensor2& x, const FusionParams& params,
                       std::size_t i, ModalityBlockCache* cache = nullptr);

struct ModalityBlockGrads {
  Tensor2 dz, dx;
  ModalityBlockParams dparams;
};
ModalityBlockGrads modality_block_vjp(const ModalityBlockCache& cache,
                                      const FusionParams& params, std::size_t i,
                                      const Tensor2& upstream);

/// Soft gate alpha_i = W_g (z_fuse + z_i) + b_g (optionally sigmoid-squashed).
Tensor2 gate(const Tensor2& z_fuse, const Tensor2& z_i, const FusionParams& params);

struct FuseStepCache {
  Tensor2 z_fuse;
  std::vector<Tensor2> z_all;
  std::vector<Tensor2> alphas;     // post-nonlinearity gate values
  std::vector<Tensor2> gate_pre;   // pre-nonlinearity (affine) gate values
  Tensor2 purified_sum;            // sum_i z'_i
  Tensor2 pre_relu;                // W_fuse sum + b_fuse + x_fuse
  GroupNormCache gn_fuse;
};

/// f_fuse(z_fuse; z_1..z_N, x_fuse): purify the fused feature per modality,
/// combine, and pass through the simplified residual block.
Tensor2 fuse_step(const Tensor2& z_fuse, const std::vector<Tensor2>& z_all,
                  const Tensor2& x_fuse, const FusionParams& params,
                  FuseStepCache* cache = nullptr);

struct FuseStepGrads {
  Tensor2 dz_fuse;
  std::vector<Tensor2> dz;
  Tensor2 dx_fuse;
  Tensor2 dgate_weight, dgate_bias;
  Tensor2 dfuse_weight, dfuse_bias;
  Tensor2 dgn_scale, dgn_shift;
};
FuseStepGrads fuse_step_vjp(const FuseStepCache& cache, const FusionParams& params,
                            const Tensor2& upstream);

/// x_fuse = sum_i w_i x_i.
Tensor2 injected_fusion(const ModalityBundle& x, const Tensor2& weights);

}  // namespace deqfuse

#endif  // DEQFUSE_LAYERS_HPP
