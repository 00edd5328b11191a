#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "dsc/basis_bank.hpp"
#include "dsc/matrix.hpp"
#include "dsc/numeric.hpp"
#include "dsc/router.hpp"
#include "dsc/rng.hpp"

namespace dsc {

enum class GammaMode { Scalar, Channelwise };

struct DscConfig {
  std::size_t d = 32;
  std::size_t M = 32;
  std::size_t K = 4;
  GammaMode gamma_mode = GammaMode::Scalar;
  double tau = 10.0;
  double eps_norm = 1e-6;
  double eps_div = 1e-6;
  double mu = 1.0;
  double lambda_aux = 0.01;
  double lambda_budget = 0.01;
  double lambda_frame = 0.001;
  double lambda_z = 1e-4;
  double ln_eps = 1e-5;

  void validate() const {
    if (d < 2) throw std::invalid_argument("DscConfig: d >= 2 required");
    if (K < 1 || K > M) throw std::invalid_argument("DscConfig: 1 <= K <= M required");
    if (!(tau > 0.0) || !(eps_norm > 0.0) || !(eps_div > 0.0) || !(mu > 0.0))
      throw std::invalid_argument("DscConfig: positive tau/eps/mu required");
    if (lambda_aux < 0 || lambda_budget < 0 || lambda_frame < 0 || lambda_z < 0)
      throw std::invalid_argument("DscConfig: lambdas must be >= 0");
  }
};

// One DSC layer: shared basis bank, router, gate scale, and a bias-free
// static base map W0 (d x d).
struct DscLayer {
  DscConfig config;
  BasisBank bank;
  RouterParams router;
  std::vector<double> gamma;  // size 1 (scalar) or d (channelwise)
  Matrix W0;                  // d x d

  std::size_t d() const { return config.d; }
  std::size_t M() const { return config.M; }
  std::size_t K() const { return config.K; }
  double gamma_inf_norm() const {
    double m = 0.0;
    for (double g : gamma) m = std::max(m, std::fabs(g));
    return m;
  }
};

// Scalar mode starts at gamma = 1; channelwise starts at the zero vector so
// the residual branch begins exactly at the identity.
inline DscLayer make_layer(const DscConfig& config, std::uint64_t seed) {
  config.validate();
  DscLayer layer;
  layer.config = config;
  Rng bank_rng = Rng::stream(seed, "bank");
  layer.bank = make_bank(config.M, config.d, config.eps_norm, bank_rng);
  Rng router_rng = Rng::stream(seed, "router");
  layer.router.W_r = gaussian_matrix(
      config.d, config.M, 1.0 / std::sqrt(static_cast<double>(config.d)),
      router_rng);
  layer.router.tau = config.tau;
  layer.router.eps_div = config.eps_div;
  layer.router.use_layernorm = (config.gamma_mode == GammaMode::Channelwise);
  layer.router.ln_eps = config.ln_eps;
  if (config.gamma_mode == GammaMode::Scalar)
    layer.gamma = {1.0};
  else
    layer.gamma.assign(config.d, 0.0);
  Rng base_rng = Rng::stream(seed, "base");
  layer.W0 = gaussian_matrix(config.d, config.d,
                             1.0 / std::sqrt(static_cast<double>(config.d)),
                             base_rng);
  return layer;
}

struct ForwardCache {
  RoutingOutcome outcome;
  ProjectedBank proj;
  Matrix c_lat;      // B x K latent coefficients x.u
  Matrix y_dyn_pre;  // B x d dynamic output before gamma
};

namespace detail {

inline Matrix forward_impl(const DscLayer& layer, const Matrix& X,
                           ForwardCache* cache) {
  const std::size_t B = X.rows, d = layer.d(), K = layer.K();
  if (X.cols != d) throw std::invalid_argument("forward: input dim mismatch");

  RoutingOutcome outcome = route(layer.router, X, K);
  ProjectedBank proj = project_rows(layer.bank);
  Matrix c_lat(B, K), y_dyn_pre(B, d);

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t j = outcome.indices[b][k];
      // Projection onto the active atom uses the raw input even when the
      // routing path normalized it.
      c_lat(b, k) = dot(X.row_span(b), proj.U.row_span(j));
      const double cm = c_lat(b, k) * outcome.z_hat(b, k);
      const double* vj = proj.V.row(j);
      double* yb = y_dyn_pre.row(b);
      for (std::size_t i = 0; i < d; ++i) yb[i] += cm * vj[i];
    }
  }

  Matrix Y = matmul(X, layer.W0);
  if (layer.config.gamma_mode == GammaMode::Scalar) {
    const double g = layer.gamma[0];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < d; ++i) Y(b, i) += g * y_dyn_pre(b, i);
  } else {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < d; ++i)
        Y(b, i) += layer.gamma[i] * y_dyn_pre(b, i);
  }

  if (cache) {
    cache->outcome = std::move(outcome);
    cache->proj = std::move(proj);
    cache->c_lat = std::move(c_lat);
    cache->y_dyn_pre = std::move(y_dyn_pre);
  }
  return Y;
}

}  // namespace detail

// Algorithm variant with a global scalar gate and raw routing input.
inline Matrix forward_basic(const DscLayer& layer, const Matrix& X,
                            ForwardCache* cache = nullptr) {
  if (layer.config.gamma_mode != GammaMode::Scalar)
    throw std::invalid_argument("forward_basic: scalar gamma mode required");
  return detail::forward_impl(layer, X, cache);
}

// Algorithm variant with layer-normalized routing input and a channelwise
// output gate.
inline Matrix forward_refined(const DscLayer& layer, const Matrix& X,
                              ForwardCache* cache = nullptr) {
  if (layer.config.gamma_mode != GammaMode::Channelwise)
    throw std::invalid_argument("forward_refined: channelwise gamma mode required");
  return detail::forward_impl(layer, X, cache);
}

inline Matrix forward(const DscLayer& layer, const Matrix& X,
                      ForwardCache* cache = nullptr) {
  return detail::forward_impl(layer, X, cache);
}

// Materialize the effective per-token operator: sum_j z_j u_j^T v_j, with the
// scalar gamma folded in, or right-multiplied by diag(gamma) in channelwise
// mode (the gate acts on output channels).
inline Matrix assemble_delta_w(const DscLayer& layer,
                               std::span<const double> x) {
  const std::size_t d = layer.d(), K = layer.K();
  Matrix X(1, d);
  std::copy(x.begin(), x.end(), X.row(0));
  RoutingOutcome outcome = route(layer.router, X, K);
  ProjectedBank proj = project_rows(layer.bank);

  Matrix dw(d, d);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t j = outcome.indices[0][k];
    const double z = outcome.z_hat(0, k);
    const double* uj = proj.U.row(j);
    const double* vj = proj.V.row(j);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t c = 0; c < d; ++c) dw(a, c) += z * uj[a] * vj[c];
  }
  if (layer.config.gamma_mode == GammaMode::Scalar) {
    for (double& v : dw.data) v *= layer.gamma[0];
  } else {
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t c = 0; c < d; ++c) dw(a, c) *= layer.gamma[c];
  }
  return dw;
}

// Brute-force reference: per token, assemble the dense operator and apply it
// with a full matrix multiply.
inline Matrix forward_dense_oracle(const DscLayer& layer, const Matrix& X) {
  const std::size_t B = X.rows, d = layer.d();
  Matrix Y = matmul(X, layer.W0);
  for (std::size_t b = 0; b < B; ++b) {
    const Matrix dw = assemble_delta_w(layer, X.row_span(b));
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t a = 0; a < d; ++a) s += X(b, a) * dw(a, c);
      Y(b, c) += s;
    }
  }
  return Y;
}

struct StarDecomposition {
  double s = 0.0;  // radial magnitude, in [0, 1)
  Matrix P;        // point in the convex hull of the active atoms
};

// Writes the unscaled operator as s * P with P a convex combination of the
// active atoms. Degenerate at the star center (s = 0).
inline StarDecomposition star_decompose(const DscLayer& layer,
                                        std::span<const double> x) {
  const std::size_t d = layer.d(), K = layer.K();
  Matrix X(1, d);
  std::copy(x.begin(), x.end(), X.row(0));
  RoutingOutcome outcome = route(layer.router, X, K);
  ProjectedBank proj = project_rows(layer.bank);

  double s = 0.0;
  for (std::size_t k = 0; k < K; ++k) s += outcome.z_hat(0, k);
  if (s <= 0.0)
    throw std::domain_error("star_decompose: at star center (delta W = 0)");

  StarDecomposition res;
  res.s = s;
  res.P = Matrix(d, d);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t j = outcome.indices[0][k];
    const double w = outcome.z_hat(0, k) / s;  // convex coefficient
    const double* uj = proj.U.row(j);
    const double* vj = proj.V.row(j);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t c = 0; c < d; ++c) res.P(a, c) += w * uj[a] * vj[c];
  }
  return res;
}

struct BoundReport {
  double norm = 0.0;
  double bound = 0.0;
  double margin = 0.0;
  bool ok = false;
};

// Per-token spectral check of the effective operator against the gate bound:
// strictly below gamma in scalar mode, at most ||gamma||_inf channelwise.
inline std::vector<BoundReport> verify_spectral_bound(const DscLayer& layer,
                                                      const Matrix& X) {
  std::vector<BoundReport> reports(X.rows);
  const bool scalar = layer.config.gamma_mode == GammaMode::Scalar;
  for (std::size_t b = 0; b < X.rows; ++b) {
    const Matrix dw = assemble_delta_w(layer, X.row_span(b));
    BoundReport& rep = reports[b];
    rep.bound = scalar ? layer.gamma[0] : layer.gamma_inf_norm();
    rep.norm = (frobenius_norm(dw) == 0.0) ? 0.0 : spectral_norm(dw);
    rep.margin = rep.bound - rep.norm;
    rep.ok = scalar ? (rep.norm < rep.bound) : (rep.norm <= rep.bound);
  }
  return reports;
}

}  // namespace dsc
