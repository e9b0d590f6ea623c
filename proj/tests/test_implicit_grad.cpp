#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deqfuse/gradcheck.hpp"
#include "deqfuse/implicit_grad.hpp"

using namespace deqfuse;

namespace {

ModalityBundle random_bundle(RngState& rng, std::size_t n, std::size_t batch,
                             std::size_t width) {
  ModalityBundle x;
  for (std::size_t i = 0; i < n; ++i) x.features.push_back(randn(rng, batch, width, 1.0));
  return x;
}

// a dense matrix rescaled to a target spectral radius (power iteration)
Tensor2 with_spectral_radius(RngState& rng, std::size_t n, double target) {
  Tensor2 j = randn(rng, n, n, 1.0);
  Tensor2 v = randn(rng, n, 1, 1.0);
  double lambda = 0.0;
  for (int it = 0; it < 200; ++it) {
    v = matmul(j, v);
    lambda = frobenius_norm(v);
    v = scaled(v, 1.0 / lambda);
  }
  return scaled(j, target / lambda);
}

double max_rel_dev(const GradientBundle& a, const GradientBundle& b) {
  double dev = 0.0;
  std::vector<const Tensor2*> slots_a, slots_b;
  visit_params(a.params, [&](const std::string&, const Tensor2& t) { slots_a.push_back(&t); });
  visit_params(b.params, [&](const std::string&, const Tensor2& t) { slots_b.push_back(&t); });
  for (std::size_t k = 0; k < slots_a.size(); ++k) {
    const double scale = std::max(max_abs(*slots_a[k]), 1e-8);
    dev = std::max(dev, max_abs_diff(*slots_a[k], *slots_b[k]) / scale);
  }
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    const double scale = std::max(max_abs(a.inputs[i]), 1e-8);
    dev = std::max(dev, max_abs_diff(a.inputs[i], b.inputs[i]) / scale);
  }
  return dev;
}

}  // namespace

TEST_CASE("adjoint of the zero map returns the cotangent") {
  const VjpFn zero_vjp = [](const Tensor2& u) { return Tensor2(u.rows(), u.cols()); };
  const Tensor2 c = Tensor2::from_rows({{1, -2, 3}});
  const AdjointResult r = solve_adjoint(zero_vjp, c);
  CHECK(max_abs_diff(r.u, c) == 0.0);
  CHECK(r.trace.converged);
}

TEST_CASE("scalar adjoint: J = 0.5 gives u = 2") {
  const VjpFn half = [](const Tensor2& u) { return scaled(u, 0.5); };
  const Tensor2 c = Tensor2::full(1, 1, 1.0);
  const AdjointResult r = solve_adjoint(half, c);
  CHECK(r.u(0, 0) == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("adjoint matches a dense solve on a seeded contractive Jacobian") {
  RngState rng(0);
  const Tensor2 j = with_spectral_radius(rng, 6, 0.7);
  const Tensor2 c = randn(rng, 1, 6, 1.0);
  const VjpFn vjp = [&](const Tensor2& u) { return matmul(u, j); };
  SolverConfig tight = default_adjoint_config();
  tight.tol = 1e-11;
  const AdjointResult r = solve_adjoint(vjp, c, tight);

  // dense oracle: u (I - J) = c  <=>  (I - J)^T u^T = c^T
  Tensor2 a = sub(Tensor2::identity(6), j);
  const Tensor2 u_dense = transpose(ridge_lstsq(transpose(a), transpose(c), 0.0));
  CHECK(max_abs_diff(r.u, u_dense) < 1e-8);

  // residual certificate
  const Tensor2 lhs = add(matmul(r.u, j), c);
  CHECK(frobenius_norm(sub(lhs, r.u)) / frobenius_norm(c) <= 1e-6);
}

TEST_CASE("adjoint divergence raises a typed error") {
  const VjpFn expanding = [](const Tensor2& u) { return scaled(u, 2.0); };
  SolverConfig cfg = default_adjoint_config();
  cfg.method = SolverMethod::kNaive;
  CHECK_THROWS_AS(solve_adjoint(expanding, Tensor2::full(1, 4, 1.0), cfg),
                  DivergenceError);
}

TEST_CASE("zero loss cotangent yields exactly zero gradients") {
  RngState rng(1);
  FusionParams p = init_fusion_params(rng, 6, 2);
  const ModalityBundle x = random_bundle(rng, 2, 2, 6);
  SolverConfig cfg;
  cfg.tol = 1e-10;
  cfg.max_steps = 400;
  const EquilibriumState eq = solve_anderson(x, p, cfg);
  const GradientBundle g = backward(eq, x, p, Tensor2(2, 6));
  visit_params(g.params,
               [](const std::string&, const Tensor2& t) { CHECK(max_abs(t) == 0.0); });
  for (const Tensor2& t : g.inputs) CHECK(max_abs(t) == 0.0);
}

TEST_CASE("constant map: implicit backward collapses to the one-step chain") {
  // zero weights make the joint map constant in z, so (I - J)^{-1} = I
  const std::size_t d = 6, n = 2, batch = 2;
  FusionParams p;
  p.width = d;
  p.n_modalities = n;
  p.groups = 1;
  for (std::size_t i = 0; i < n; ++i) {
    ModalityBlockParams b;
    b.w_pre = Tensor2(d, d);
    b.b_pre = Tensor2(1, d);
    b.w_res = Tensor2(d, d);
    b.b_res = Tensor2(1, d);
    b.gn_pre = {Tensor2::full(1, d, 1.0), Tensor2(1, d)};
    b.gn_res = {Tensor2::full(1, d, 1.0), Tensor2(1, d)};
    b.gn_out = {Tensor2::full(1, d, 1.0), Tensor2(1, d)};
    p.blocks.push_back(std::move(b));
  }
  p.gate_weight = Tensor2(d, d);
  p.gate_bias = Tensor2(1, d);
  p.fuse_weight = Tensor2(d, d);
  p.fuse_bias = Tensor2(1, d);
  p.gn_fuse = {Tensor2::full(1, d, 1.0), Tensor2(1, d)};
  p.modality_weights = Tensor2::full(1, n, 0.5);

  RngState rng(2);
  const ModalityBundle x = random_bundle(rng, n, batch, d);
  SolverConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_steps = 10;
  const EquilibriumState eq = solve_naive(x, p, cfg);
  REQUIRE(eq.trace.converged);
  const Tensor2 dl = randn(rng, batch, d, 1.0);
  const GradientBundle implicit = backward(eq, x, p, dl);

  // hand-composed single VJP sweep at the fixed point
  JointMapCache cache;
  joint_map(eq.state, x, p, true, &cache);
  GradientBundle one_step = zero_gradients(p, x);
  JointState upstream = JointState::zeros(n, batch, d);
  upstream.z_fuse = dl;
  joint_map_vjp(cache, p, x, upstream, true, &one_step);
  CHECK(max_rel_dev(implicit, one_step) < 1e-9);
}

TEST_CASE("implicit gradients match finite differences on a seeded instance") {
  GradCheckOptions opts;
  const GradCheckReport report = run_gradcheck(opts);
  for (const GradCheckGroup& g : report.groups) {
    INFO(g.name);
    CHECK(g.max_rel_err < 1e-3);
  }
  CHECK(report.unrolled_deviation < 1e-3);
}

TEST_CASE("unrolled k=1 equals one reverse sweep from zero") {
  RngState rng(3);
  FusionParams p = init_fusion_params(rng, 6, 2);
  const ModalityBundle x = random_bundle(rng, 2, 2, 6);
  const Tensor2 dl = randn(rng, 2, 6, 1.0);
  const GradientBundle unrolled = backward_unrolled(x, p, dl, 1);

  JointMapCache cache;
  const JointState zero = JointState::zeros(2, 2, 6);
  joint_map(zero, x, p, true, &cache);
  GradientBundle manual = zero_gradients(p, x);
  JointState upstream = JointState::zeros(2, 2, 6);
  upstream.z_fuse = dl;
  joint_map_vjp(cache, p, x, upstream, true, &manual);
  CHECK(max_rel_dev(unrolled, manual) == 0.0);
}

TEST_CASE("scalar probe: truncated unrolling converges to the analytic derivative") {
  // z <- 0.5 z + x from zero: dz_k/dx = 2 (1 - 2^{-k})
  double z = 0.0, dz_dx = 0.0;
  const double x = 0.3;
  for (int k = 0; k < 40; ++k) {
    z = 0.5 * z + x;
    dz_dx = 0.5 * dz_dx + 1.0;
  }
  CHECK(std::fabs(dz_dx - 2.0) < 1e-10);
  CHECK(std::fabs(z - 2.0 * x) < 1e-10);
}

TEST_CASE("unrolled backward converges to the implicit gradients") {
  RngState rng(4);
  FusionParams p = init_fusion_params(rng, 6, 2);
  const ModalityBundle x = random_bundle(rng, 2, 2, 6);
  SolverConfig cfg;
  cfg.tol = 1e-12;
  cfg.max_steps = 500;
  const EquilibriumState eq = solve_anderson(x, p, cfg);
  const Tensor2 dl = randn(rng, 2, 6, 1.0);
  const GradientBundle implicit = backward(eq, x, p, dl);
  const GradientBundle unrolled = backward_unrolled(x, p, dl, 100);
  CHECK(max_rel_dev(implicit, unrolled) < 1e-3);
}

TEST_CASE("hutchinson estimator on synthetic Jacobians") {
  SUBCASE("zero map") {
    const VjpFn zero = [](const Tensor2& u) { return Tensor2(u.rows(), u.cols()); };
    RngState rng(0);
    CHECK(hutchinson_sq_norm(zero, 1, 6, rng, 10) == 0.0);
  }
  SUBCASE("scaled identity: estimate approaches c^2") {
    const double c = 0.8;
    const VjpFn vjp = [c](const Tensor2& u) { return scaled(u, c); };
    RngState rng(1);
    const double est = hutchinson_sq_norm(vjp, 1, 8, rng, 4000);
    CHECK(est == doctest::Approx(c * c).epsilon(0.05));
  }
  SUBCASE("dense 6x6 oracle within 2% at 1e4 probes") {
    RngState rng(2);
    const Tensor2 j = randn(rng, 6, 6, 0.5);
    double frob_sq = 0.0;
    for (std::size_t k = 0; k < j.size(); ++k) frob_sq += j[k] * j[k];
    const double exact = frob_sq / 6.0;
    const VjpFn vjp = [&](const Tensor2& u) { return matmul(u, j); };
    RngState probe_rng(3);
    const double est = hutchinson_sq_norm(vjp, 1, 6, probe_rng, 10000);
    CHECK(std::fabs(est - exact) / exact < 0.02);
  }
  SUBCASE("deterministic given seed and probes") {
    RngState a(5), b(5);
    const VjpFn vjp = [](const Tensor2& u) { return scaled(u, 0.3); };
    CHECK(hutchinson_sq_norm(vjp, 2, 3, a, 50) == hutchinson_sq_norm(vjp, 2, 3, b, 50));
  }
}

TEST_CASE("jacobian_reg of the fusion system is nonnegative and deterministic") {
  RngState rng(6);
  FusionParams p = init_fusion_params(rng, 8, 2);
  const ModalityBundle x = random_bundle(rng, 2, 2, 8);
  SolverConfig cfg;
  cfg.tol = 1e-8;
  cfg.max_steps = 300;
  const EquilibriumState eq = solve_anderson(x, p, cfg);
  RngState r1(9), r2(9);
  const double a = jacobian_reg(p, x, eq, r1, 32);
  const double b = jacobian_reg(p, x, eq, r2, 32);
  CHECK(a >= 0.0);
  CHECK(a == b);
}
