#ifndef DEQFUSE_EQUILIBRIUM_HPP
#define DEQFUSE_EQUILIBRIUM_HPP

#include <functional>
#include <iosfwd>
#include <vector>

#include "deqfuse/layers.hpp"

namespace deqfuse {

/// The joint hidden state (z_1..z_N, z_fuse), each block batch x d. Packing
/// order for solver algebra is [z_1 ... z_N, z_fuse], each flattened
/// row-major into one column vector.
struct JointState {
  std::vector<Tensor2> z;
  Tensor2 z_fuse;

  static JointState zeros(std::size_t n_modalities, std::size_t batch, std::size_t width);
  Tensor2 pack() const;
  static JointState unpack(const Tensor2& packed, std::size_t n_modalities,
                           std::size_t batch, std::size_t width);
  bool same_shape(const JointState& other) const;
};

enum class SolverMethod { kNaive, kAnderson };

struct SolverConfig {
  SolverMethod method = SolverMethod::kAnderson;
  double tol = 1e-4;
  std::size_t max_steps = 100;
  std::size_t anderson_memory = 5;
  double beta = 1.0;
  double ridge_lambda = 1e-4;
  /// When false the trace always runs to max_steps (fixed-length traces).
  bool early_stop = true;
  /// Gate inputs use the freshly swept z_i (the layer-wise data flow); the
  /// pre-sweep alternative converges to the same fixed point.
  bool fuse_uses_fresh = true;

  void validate() const;
};

struct SolverTrace {
  std::vector<double> rel_diffs;
  std::size_t steps_taken = 0;
  bool converged = false;
  double final_residual = 0.0;

  /// CSV export: header `step,rel_diff`, scientific notation, one row per step.
  void write_csv(std::ostream& os) const;
};

struct EquilibriumState {
  JointState state;
  SolverTrace trace;
};

/// Mean over batch samples of the per-sample relative difference of the
/// packed state (guarded denominator). This is the solver stopping metric.
double batch_mean_rel_diff(const JointState& next, const JointState& prev);

struct JointMapCache {
  std::vector<ModalityBlockCache> blocks;
  FuseStepCache fuse;
  Tensor2 x_fuse;
};

/// One synchronous sweep: z_i <- f_theta_i(z_i; x_i) for all i, then
/// z_fuse <- f_fuse(z_fuse; z, x_fuse). x_fuse is recomputed from the bundle.
JointState joint_map(const JointState& s, const ModalityBundle& x,
                     const FusionParams& params, bool fuse_uses_fresh = true,
                     JointMapCache* cache = nullptr);

/// g(s) = joint_map(s) - s, blockwise.
JointState residual(const JointState& s, const ModalityBundle& x,
                    const FusionParams& params, bool fuse_uses_fresh = true);

// ---------------------------------------------------------------------------
// Generic fixed-point solver over a packed state. Used by the fusion solve,
// the adjoint solve, and test stub maps.
// ---------------------------------------------------------------------------

using MapFn = std::function<Tensor2(const Tensor2&)>;
using StepMetric = std::function<double(const Tensor2& next, const Tensor2& prev)>;

/// Anderson(m) mixing over (iterate, map value) pairs. Weights gamma minimize
/// ||sum_k gamma_k g_k|| with sum gamma = 1, where g_k = f(s_k) - s_k, through
/// the unconstrained difference reformulation solved by ridge_lstsq. The next
/// iterate is (1-beta) sum gamma_k s_k + beta sum gamma_k f(s_k). Memory 1
/// degenerates to (damped) naive iteration.
class AndersonMixer {
 public:
  AndersonMixer(std::size_t memory, double beta, double ridge_lambda);
  Tensor2 push(const Tensor2& s, const Tensor2& fs);
  void reset();

 private:
  std::size_t memory_;
  double beta_;
  double lambda_;
  std::vector<Tensor2> hist_s_, hist_f_;
};

struct FixedPointResult {
  Tensor2 state;
  SolverTrace trace;
};

/// Iterates s <- f(s) from s0 (naive) or with Anderson(m) extrapolation: the
/// mixing weights minimize ||sum_k gamma_k g(s_k)|| with sum gamma = 1 through
/// the difference reformulation solved by ridge_lstsq, then
/// s <- (1-beta) sum gamma_k s_k + beta sum gamma_k f(s_k).
/// Divergence (step metric above 1e6 or non-finite state) throws
/// DivergenceError carrying the partial trace.
FixedPointResult solve_fixed_point(const MapFn& f, const Tensor2& s0,
                                   const SolverConfig& cfg,
                                   const StepMetric& metric = StepMetric());

EquilibriumState solve_naive(const ModalityBundle& x, const FusionParams& params,
                             SolverConfig cfg);
EquilibriumState solve_anderson(const ModalityBundle& x, const FusionParams& params,
                                SolverConfig cfg);
EquilibriumState solve_equilibrium(const ModalityBundle& x, const FusionParams& params,
                                   const SolverConfig& cfg);

/// Benchmarking variant that exploits the block-triangular structure: each
/// z_i* is solved on its own, then z_fuse* with the z_i* frozen. Same fixed
/// point as the joint solve; the trace is the fuse phase's.
EquilibriumState solve_two_phase(const ModalityBundle& x, const FusionParams& params,
                                 const SolverConfig& cfg);

}  // namespace deqfuse

#endif  // DEQFUSE_EQUILIBRIUM_HPP
