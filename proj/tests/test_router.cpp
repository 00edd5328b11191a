#include <doctest.h>

#include <cmath>
#include <vector>

#include "dsc/router.hpp"
#include "dsc/rng.hpp"

using namespace dsc;

namespace {

RouterParams zero_router(std::size_t d, std::size_t M) {
  RouterParams p;
  p.W_r = Matrix(d, M);
  return p;
}

}  // namespace

TEST_CASE("zero router: uniform logits, K=2") {
  RouterParams p = zero_router(3, 4);
  Matrix X(1, 3);
  X(0, 0) = 1.0;
  RoutingOutcome out = route(p, X, 2);

  const double a = std::log(2.0);  // softplus(0)
  const double S = 2.0 * a;
  CHECK(out.S[0] == doctest::Approx(S).epsilon(1e-15));
  CHECK(out.S[0] == doctest::Approx(1.3862943611).epsilon(1e-9));
  const double expect_z = a * std::tanh(S) / (S + p.eps_div);
  for (int k = 0; k < 2; ++k)
    CHECK(out.z_hat(0, k) == doctest::Approx(expect_z).epsilon(1e-15));
  CHECK(expect_z == doctest::Approx(0.4412).epsilon(1e-3));
  const double sum_z = out.z_hat(0, 0) + out.z_hat(0, 1);
  CHECK(sum_z == doctest::Approx(0.8824).epsilon(1e-3));
  CHECK(sum_z < std::tanh(S));
  // ties resolve to the lowest indices
  CHECK(out.indices[0] == std::vector<std::size_t>{0, 1});
}

TEST_CASE("unit gate magnitudes: phi = (1, 1)") {
  // pick logits with softplus(r) = 1 exactly: r = ln(e - 1)
  const double r1 = std::log(std::exp(1.0) - 1.0);
  RouterParams p = zero_router(2, 3);
  p.W_r(0, 0) = r1;
  p.W_r(0, 1) = r1;
  p.W_r(0, 2) = -30.0;
  Matrix X(1, 2);
  X(0, 0) = 1.0;
  RoutingOutcome out = route(p, X, 2);
  CHECK(out.S[0] == doctest::Approx(2.0).epsilon(1e-12));
  const double sum_z = out.z_hat(0, 0) + out.z_hat(0, 1);
  CHECK(sum_z == doctest::Approx(0.9640271).epsilon(1e-6));
  CHECK(sum_z < std::tanh(2.0));
  CHECK(std::tanh(2.0) == doctest::Approx(0.9640276).epsilon(1e-6));
}

TEST_CASE("logit clamp saturates at tau") {
  RouterParams p = zero_router(1, 2);
  p.tau = 10.0;
  p.W_r(0, 0) = 50.0;
  p.W_r(0, 1) = -50.0;
  Matrix X(1, 1);
  X(0, 0) = 1.0;
  RoutingOutcome out = route(p, X, 2);
  CHECK(out.r_raw(0, 0) == doctest::Approx(50.0));
  CHECK(out.r(0, 0) == doctest::Approx(10.0));
  CHECK(out.r(0, 1) == doctest::Approx(-10.0));
  CHECK(out.alpha(0, 0) == doctest::Approx(softplus(10.0)).epsilon(1e-15));
}

TEST_CASE("contraction holds on random batches") {
  Rng rng = Rng::stream(21, "router-fuzz");
  RouterParams p;
  p.W_r = gaussian_matrix(6, 10, 0.5, rng);
  Matrix X = gaussian_matrix(64, 6, 2.0, rng);
  RoutingOutcome out = route(p, X, 3);
  for (std::size_t b = 0; b < 64; ++b) {
    double sum_z = 0.0;
    for (int k = 0; k < 3; ++k) {
      CHECK(out.z_hat(b, k) >= 0.0);
      sum_z += out.z_hat(b, k);
    }
    CHECK(sum_z < std::tanh(out.S[b]));
    CHECK(std::tanh(out.S[b]) < 1.0);
    const double closed = out.S[b] / (out.S[b] + p.eps_div) * std::tanh(out.S[b]);
    CHECK(std::fabs(sum_z - closed) <= 1e-12);
  }
}

TEST_CASE("route is equivariant under expert permutation") {
  Rng rng = Rng::stream(33, "router-perm");
  RouterParams p;
  p.W_r = gaussian_matrix(4, 6, 1.0, rng);
  Matrix X = gaussian_matrix(8, 4, 1.0, rng);
  RoutingOutcome base = route(p, X, 2);

  RouterParams perm = p;  // rotate columns by 2
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) perm.W_r(i, j) = p.W_r(i, (j + 2) % 6);
  RoutingOutcome rot = route(perm, X, 2);

  for (std::size_t b = 0; b < 8; ++b) {
    CHECK(rot.S[b] == doctest::Approx(base.S[b]).epsilon(1e-12));
    // selected indices map through the inverse rotation
    std::vector<std::size_t> mapped;
    for (std::size_t j : base.indices[b]) mapped.push_back((j + 6 - 2) % 6);
    std::sort(mapped.begin(), mapped.end());
    CHECK(rot.indices[b] == mapped);
  }
}

TEST_CASE("gate grows monotonically along a logit ramp") {
  // scaling the input up increases every logit, so S must not decrease
  RouterParams p = zero_router(2, 4);
  p.W_r(0, 0) = 1.0;
  p.W_r(0, 1) = 0.5;
  p.W_r(1, 2) = 0.8;
  p.W_r(1, 3) = 0.2;
  double prev_S = -1.0;
  for (double t = 0.25; t <= 4.0; t += 0.25) {
    Matrix X(1, 2);
    X(0, 0) = t;
    X(0, 1) = t;
    RoutingOutcome out = route(p, X, 2);
    CHECK(out.S[0] >= prev_S);
    prev_S = out.S[0];
  }
}

TEST_CASE("aux load balance loss: bounds and exact values") {
  // uniform softmax: M * M * (1/M)^2 = 1
  RouterParams p = zero_router(2, 4);
  Matrix X = Matrix(3, 2, 1.0);
  RoutingOutcome uniform = route(p, X, 2);
  CHECK(aux_load_balance_loss(uniform, 4) == doctest::Approx(1.0).epsilon(1e-12));

  // collapse onto one expert: loss -> M
  p.W_r(0, 0) = 9.0;  // stays inside tau
  RoutingOutcome collapsed = route(p, X, 2);
  CHECK(aux_load_balance_loss(collapsed, 4) == doctest::Approx(4.0).epsilon(1e-3));
  CHECK(aux_load_balance_loss(collapsed, 4) <= 4.0);
  CHECK_THROWS_AS(aux_load_balance_loss(collapsed, 5), std::invalid_argument);
}

TEST_CASE("budget loss hinge") {
  RouterParams p = zero_router(1, 2);
  Matrix X(1, 1);
  X(0, 0) = 1.0;
  RoutingOutcome out = route(p, X, 2);  // S = 2 ln 2
  const double S = 2.0 * std::log(2.0);
  CHECK(budget_loss(out, 1.0) == doctest::Approx(0.0));  // S > mu
  const double gap = 2.0 - S;
  CHECK(budget_loss(out, 2.0) == doctest::Approx(gap * gap).epsilon(1e-12));
  CHECK_THROWS_AS(budget_loss(out, 0.0), std::invalid_argument);
}

TEST_CASE("z loss on uniform logits") {
  RouterParams p = zero_router(2, 8);
  Matrix X(4, 2, 0.5);
  RoutingOutcome out = route(p, X, 3);
  const double want = std::log(8.0) * std::log(8.0);
  CHECK(z_loss(out) == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(4.3241).epsilon(1e-4));
}

TEST_CASE("route input validation") {
  RouterParams p = zero_router(3, 4);
  Matrix X(1, 3);
  CHECK_THROWS_AS(route(p, X, 0), std::invalid_argument);
  CHECK_THROWS_AS(route(p, X, 5), std::invalid_argument);
  Matrix bad(1, 2);
  CHECK_THROWS_AS(route(p, bad, 2), std::invalid_argument);
  Matrix inf(1, 3);
  inf(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(route(p, inf, 2), std::invalid_argument);
}

TEST_CASE("layernorm routing path normalizes per token") {
  RouterParams p = zero_router(4, 3);
  p.use_layernorm = true;
  p.W_r(0, 0) = 1.0;
  Matrix X(1, 4);
  X(0, 0) = 10.0;
  X(0, 1) = 20.0;
  X(0, 2) = 30.0;
  X(0, 3) = 40.0;
  RoutingOutcome out = route(p, X, 1);
  double mean = 0.0;
  for (std::size_t i = 0; i < 4; ++i) mean += out.x_routing(0, i);
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
  // scale invariance of the normalized input (up to eps effects)
  Matrix X2 = X;
  for (double& v : X2.data) v *= 100.0;
  RoutingOutcome out2 = route(p, X2, 1);
  CHECK(out2.r_raw(0, 0) == doctest::Approx(out.r_raw(0, 0)).epsilon(1e-6));
}
