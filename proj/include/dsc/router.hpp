#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "dsc/matrix.hpp"
#include "dsc/numeric.hpp"

namespace dsc {

struct RouterParams {
  Matrix W_r;                 // d x M
  double tau = 10.0;          // logit clamp bound
  double eps_div = 1e-6;      // division guard in the magnitude gate
  bool use_layernorm = false; // refined path normalizes the routing input
  double ln_eps = 1e-5;

  std::size_t d() const { return W_r.rows; }
  std::size_t M() const { return W_r.cols; }
};

// Per-token routing state. r is clamped to [-tau, tau]; alpha = softplus(r);
// phi gathers alpha at the selected indices; z_hat = phi/(S+eps) * tanh(S).
struct RoutingOutcome {
  Matrix x_routing;   // B x d input actually fed to the router
  Matrix r_raw;       // B x M
  Matrix r;           // B x M, clamped
  Matrix alpha;       // B x M
  Matrix softmax_r;   // B x M, softmax over clamped logits (for L_aux)
  std::vector<double> lse;  // per-token logsumexp of clamped logits
  std::vector<std::vector<std::size_t>> indices;  // B x K, sorted ascending
  Matrix phi;         // B x K
  Matrix z_hat;       // B x K
  std::vector<double> S;  // per-token signal strength
  std::size_t K = 0;
  double eps_div = 0.0;

  std::size_t B() const { return r.rows; }
  std::size_t M() const { return r.cols; }
};

inline RoutingOutcome route(const RouterParams& params, const Matrix& X,
                            std::size_t K) {
  const std::size_t B = X.rows, d = X.cols, M = params.M();
  if (d != params.d()) throw std::invalid_argument("route: input dim mismatch");
  if (K == 0 || K > M) throw std::invalid_argument("route: require 1 <= K <= M");
  if (!X.finite()) throw std::invalid_argument("route: non-finite input");

  RoutingOutcome out;
  out.K = K;
  out.eps_div = params.eps_div;
  out.x_routing = Matrix(B, d);
  out.r_raw = Matrix(B, M);
  out.r = Matrix(B, M);
  out.alpha = Matrix(B, M);
  out.softmax_r = Matrix(B, M);
  out.lse.resize(B);
  out.indices.resize(B);
  out.phi = Matrix(B, K);
  out.z_hat = Matrix(B, K);
  out.S.resize(B);

  for (std::size_t b = 0; b < B; ++b) {
    if (params.use_layernorm) {
      const std::vector<double> xn = layer_norm(X.row_span(b), params.ln_eps);
      std::copy(xn.begin(), xn.end(), out.x_routing.row(b));
    } else {
      std::copy(X.row(b), X.row(b) + d, out.x_routing.row(b));
    }
    for (std::size_t j = 0; j < M; ++j) {
      double rr = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        rr += out.x_routing(b, i) * params.W_r(i, j);
      out.r_raw(b, j) = rr;
      const double rc = std::clamp(rr, -params.tau, params.tau);
      out.r(b, j) = rc;
      out.alpha(b, j) = softplus(rc);
    }
    softmax_inplace(out.r.row_span(b), {out.softmax_r.row(b), M});
    out.lse[b] = logsumexp(out.r.row_span(b));

    TopKResult tk = top_k_select(out.alpha.row_span(b), K);
    out.indices[b] = std::move(tk.indices);
    double S = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      out.phi(b, k) = tk.values[k];
      S += tk.values[k];
    }
    out.S[b] = S;
    const double gate = std::tanh(S) / (S + params.eps_div);
    for (std::size_t k = 0; k < K; ++k) out.z_hat(b, k) = out.phi(b, k) * gate;
  }
  return out;
}

// Load balance penalty: M * sum_j P_j^2 with P_j the batch-mean
// softmax mass on expert j. Minimum 1 at uniformity, maximum M at collapse.
inline double aux_load_balance_loss(const RoutingOutcome& out, std::size_t M) {
  const std::size_t B = out.B();
  if (B < 1) throw std::invalid_argument("aux_load_balance_loss: empty batch");
  if (M != out.M()) throw std::invalid_argument("aux_load_balance_loss: M mismatch");
  double loss = 0.0;
  for (std::size_t j = 0; j < M; ++j) {
    double P = 0.0;
    for (std::size_t b = 0; b < B; ++b) P += out.softmax_r(b, j);
    P /= static_cast<double>(B);
    loss += P * P;
  }
  return static_cast<double>(M) * loss;
}

// Hinge on the batch-mean signal strength: max(0, mu - mean S)^2.
inline double budget_loss(const RoutingOutcome& out, double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("budget_loss: mu must be > 0");
  double mean_S = 0.0;
  for (double s : out.S) mean_S += s;
  mean_S /= static_cast<double>(out.B());
  const double gap = std::max(0.0, mu - mean_S);
  return gap * gap;
}

// Squared log-partition over clamped logits, batch mean.
inline double z_loss(const RoutingOutcome& out) {
  const std::size_t B = out.B();
  if (B < 1) throw std::invalid_argument("z_loss: empty batch");
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) loss += out.lse[b] * out.lse[b];
  return loss / static_cast<double>(B);
}

}  // namespace dsc
