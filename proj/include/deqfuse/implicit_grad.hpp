#ifndef DEQFUSE_IMPLICIT_GRAD_HPP
#define DEQFUSE_IMPLICIT_GRAD_HPP

#include "deqfuse/equilibrium.hpp"

namespace deqfuse {

/// Gradients of the loss with respect to every fusion parameter (mirrors
/// FusionParams) and each injected input x_i.
struct GradientBundle {
  FusionParams params;
  std::vector<Tensor2> inputs;
};

GradientBundle zero_gradients(const FusionParams& params, const ModalityBundle& x);

using VjpFn = std::function<Tensor2(const Tensor2&)>;

/// Tighter-than-forward defaults for the adjoint linear solves.
SolverConfig default_adjoint_config();

struct AdjointResult {
  Tensor2 u;
  SolverTrace trace;
};

/// Solves u = u J_f + dl_dz (equivalently u (I - J_f) = dl_dz) by Anderson
/// iteration on the affine map, with J_f available only through map_vjp.
/// Divergence signals a non-contractive Jacobian and throws.
AdjointResult solve_adjoint(const VjpFn& map_vjp, const Tensor2& dl_dz,
                            const SolverConfig& cfg = default_adjoint_config());

/// Implicit backward pass through a converged equilibrium: adjoint solve for
/// z_fuse, fusion-parameter VJPs, per-modality adjoint solves, block VJPs,
/// and both x_i paths (through z_i* and through the injected x_fuse).
GradientBundle backward(const EquilibriumState& eq, const ModalityBundle& x,
                        const FusionParams& params, const Tensor2& dl_dzfuse,
                        const SolverConfig& adjoint_cfg = default_adjoint_config());

/// Oracle path: gradients of the k-step unrolled forward computation from a
/// zero state, chained step by step in reverse. Converges to backward() on
/// contractive instances as k grows.
GradientBundle backward_unrolled(const ModalityBundle& x, const FusionParams& params,
                                 const Tensor2& dl_dzfuse, std::size_t k_steps);

/// Hutchinson estimate of ||J||_F^2 / dim for a map available as a VJP:
/// mean over probes of ||eps^T J||^2 / dim with standard Gaussian eps.
double hutchinson_sq_norm(const VjpFn& map_vjp, std::size_t rows, std::size_t cols,
                          RngState& rng, std::size_t probes);

/// The same estimate for the joint fusion map at the solved equilibrium.
double jacobian_reg(const FusionParams& params, const ModalityBundle& x,
                    const EquilibriumState& eq, RngState& rng, std::size_t probes);

/// VJP of the joint map at a cached evaluation point: cotangent of the packed
/// state, plus (optionally) parameter and input cotangents accumulated into a
/// GradientBundle. Used by the Jacobian estimator and the regularizer.
JointState joint_map_vjp(const JointMapCache& cache, const FusionParams& params,
                         const ModalityBundle& x, const JointState& upstream,
                         bool fuse_uses_fresh = true, GradientBundle* accum = nullptr);

}  // namespace deqfuse

#endif  // DEQFUSE_IMPLICIT_GRAD_HPP
