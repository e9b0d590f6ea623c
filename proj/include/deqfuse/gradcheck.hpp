#ifndef DEQFUSE_GRADCHECK_HPP
#define DEQFUSE_GRADCHECK_HPP

#include "deqfuse/implicit_grad.hpp"

namespace deqfuse {

struct GradCheckOptions {
  std::size_t width = 6;
  std::size_t n_modalities = 2;
  std::size_t batch = 2;
  std::uint64_t seed = 0;
  double fd_step = 1e-4;
  double forward_tol = 1e-10;
  std::size_t unrolled_steps = 100;
};

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

/// Implicit backward against two oracles on one seeded random instance: the
/// central-finite-difference derivative of the scalar loss <c, z_fuse*>
/// (per parameter group and per input), and the k-step unrolled backward.
struct GradCheckReport {
  std::vector<GradCheckGroup> groups;  // parameters, then x_0..x_{N-1}
  double unrolled_deviation = 0.0;

  double worst() const;
  bool passed(double tol) const;
};

GradCheckReport run_gradcheck(const GradCheckOptions& opts);

}  // namespace deqfuse

#endif  // DEQFUSE_GRADCHECK_HPP
