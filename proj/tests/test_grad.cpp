#include <doctest.h>

#include <cmath>

#include "dsc/grad.hpp"

using namespace dsc;

namespace {

DscLayer small_layer(std::uint64_t seed, GammaMode mode,
                     bool zero_lambdas = false) {
  DscConfig cfg;
  cfg.d = 5;
  cfg.M = 8;
  cfg.K = 3;
  cfg.gamma_mode = mode;
  if (zero_lambdas)
    cfg.lambda_aux = cfg.lambda_budget = cfg.lambda_frame = cfg.lambda_z = 0.0;
  DscLayer layer = make_layer(cfg, seed);
  if (mode == GammaMode::Channelwise) {
    Rng rng = Rng::stream(seed, "test-gamma");
    for (double& g : layer.gamma) g = rng.normal();
  }
  return layer;
}

}  // namespace

TEST_CASE("channelwise gamma = 0 cuts the bank gradients") {
  DscLayer layer = small_layer(3, GammaMode::Channelwise);
  layer.gamma.assign(layer.d(), 0.0);
  Rng rng = Rng::stream(3, "gradzero");
  Matrix X = gaussian_matrix(4, 5, 1.0, rng);
  Matrix up = gaussian_matrix(4, 5, 1.0, rng);
  const GradBundle g = backward(layer, X, up);
  for (double v : g.dU_hat.data) CHECK(v == 0.0);
  for (double v : g.dV_hat.data) CHECK(v == 0.0);
  // the gate still sees upstream signal through its own derivative
  double gnorm = 0.0;
  for (double v : g.dGamma) gnorm += std::fabs(v);
  CHECK(gnorm > 0.0);
  // the base path is unaffected
  CHECK(frobenius_norm(g.dW0) > 0.0);
}

TEST_CASE("finite differences: probe objective, scalar mode") {
  DscLayer layer = small_layer(42, GammaMode::Scalar);
  Rng rng = Rng::stream(42, "fd-probe");
  Matrix X = gaussian_matrix(4, 5, 1.0, rng);
  Matrix T = gaussian_matrix(4, 5, 1.0, rng);
  const FdReport rep = finite_diff_check(layer, X, T, 1e-5);
  for (const FdEntry& e : rep.entries) {
    INFO(e.group, " ", e.reason);
    if (!e.skipped) CHECK(e.max_rel_err < 1e-6);
  }
  CHECK(rep.worst < 1e-6);
}

TEST_CASE("finite differences: full objective, channelwise mode") {
  DscLayer layer = small_layer(1337, GammaMode::Channelwise);
  Rng rng = Rng::stream(1337, "fd-chan");
  Matrix X = gaussian_matrix(3, 5, 1.0, rng);
  Matrix T = gaussian_matrix(3, 5, 1.0, rng);
  const FdReport rep = finite_diff_check(layer, X, T, 1e-5, TaskTerm::MseMean);
  for (const FdEntry& e : rep.entries) {
    INFO(e.group, " ", e.reason);
    if (!e.skipped) CHECK(e.max_rel_err < 1e-6);
  }
}

TEST_CASE("finite differences: K = M (no selection boundary at all)") {
  DscConfig cfg;
  cfg.d = 4;
  cfg.M = 5;
  cfg.K = 5;
  DscLayer layer = make_layer(cfg, 7);
  Rng rng = Rng::stream(7, "fd-km");
  Matrix X = gaussian_matrix(3, 4, 1.0, rng);
  Matrix T = gaussian_matrix(3, 4, 1.0, rng);
  const FdReport rep = finite_diff_check(layer, X, T, 1e-5);
  for (const FdEntry& e : rep.entries) {
    INFO(e.group, " ", e.reason);
    if (!e.skipped) CHECK(e.max_rel_err < 1e-6);
  }
}

TEST_CASE("input gradient matches finite differences") {
  DscLayer layer = small_layer(11, GammaMode::Scalar, /*zero_lambdas=*/true);
  Rng rng = Rng::stream(11, "fd-input");
  Matrix X = gaussian_matrix(2, 5, 1.0, rng);
  Matrix T = gaussian_matrix(2, 5, 1.0, rng);
  auto [loss, g] = objective_with_grad(layer, X, T, TaskTerm::ProbeHalfSq);

  auto probe = [&](const Matrix& Xp) {
    const Matrix Y = forward(layer, Xp);
    double v = 0.0;
    for (std::size_t i = 0; i < Y.data.size(); ++i) {
      const double diff = Y.data[i] - T.data[i];
      v += 0.5 * diff * diff;
    }
    return v;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < X.data.size(); ++i) {
    Matrix Xp = X;
    Xp.data[i] += h;
    const double fp = probe(Xp);
    Xp.data[i] = X.data[i] - h;
    const double fm = probe(Xp);
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::fabs(fd), std::fabs(g.dX.data[i]), 1e-6});
    CHECK(std::fabs(fd - g.dX.data[i]) / denom < 1e-5);
  }
  CHECK(loss.total == doctest::Approx(loss.task));
}

TEST_CASE("loss breakdown recomposes with the layer weights") {
  DscLayer layer = small_layer(29, GammaMode::Scalar);
  Rng rng = Rng::stream(29, "breakdown");
  Matrix X = gaussian_matrix(4, 5, 1.0, rng);
  Matrix T = gaussian_matrix(4, 5, 1.0, rng);
  auto [loss, g] = objective_with_grad(layer, X, T, TaskTerm::MseMean);
  (void)g;
  const DscConfig& c = layer.config;
  const double recomposed = loss.task + c.lambda_aux * loss.aux +
                            c.lambda_budget * loss.budget +
                            c.lambda_frame * loss.frame + c.lambda_z * loss.z;
  CHECK(loss.total == doctest::Approx(recomposed).epsilon(1e-14));
  CHECK(loss.aux >= 1.0);  // load balance penalty is bounded below at 1
  CHECK(loss.z > 0.0);
}

TEST_CASE("differentiability guard reports sane margins") {
  DscLayer layer = small_layer(31, GammaMode::Scalar);
  Rng rng = Rng::stream(31, "guard");
  Matrix X = gaussian_matrix(6, 5, 1.0, rng);
  const DifferentiabilityGuard guard = compute_guard(layer, X);
  CHECK(guard.min_topk_margin > 0.0);
  CHECK(guard.min_norm_margin > 0.0);
  CHECK(guard.clamp_margin > 0.0);
  CHECK(guard.pass(0.0));
  CHECK_FALSE(guard.pass(1e12));
}

TEST_CASE("backward throws only at an exact selection tie") {
  DscConfig cfg;
  cfg.d = 2;
  cfg.M = 3;
  cfg.K = 1;
  DscLayer layer = make_layer(cfg, 2);
  // force two identical columns so the top-1 choice ties exactly
  for (std::size_t i = 0; i < 2; ++i) {
    layer.router.W_r(i, 0) = 1.0;
    layer.router.W_r(i, 1) = 1.0;
    layer.router.W_r(i, 2) = -1.0;
  }
  Matrix X(1, 2, 1.0);
  Matrix up(1, 2, 1.0);
  CHECK_THROWS_AS(backward(layer, X, up), GuardError);
}

TEST_CASE("gradcheck skips groups near a boundary instead of failing") {
  DscConfig cfg;
  cfg.d = 3;
  cfg.M = 4;
  cfg.K = 2;
  DscLayer layer = make_layer(cfg, 77);
  // shrink one atom to sit right at the projection kink
  for (std::size_t i = 0; i < 3; ++i)
    layer.bank.U_hat(0, i) = (i == 0) ? layer.bank.eps_norm : 0.0;
  Rng rng = Rng::stream(77, "skip");
  Matrix X = gaussian_matrix(2, 3, 1.0, rng);
  Matrix T = gaussian_matrix(2, 3, 1.0, rng);
  const FdReport rep = finite_diff_check(layer, X, T, 1e-5);
  bool saw_skip = false;
  for (const FdEntry& e : rep.entries)
    if (e.group == "U_hat") {
      CHECK(e.skipped);
      CHECK_FALSE(e.reason.empty());
      saw_skip = true;
    }
  CHECK(saw_skip);
}
