#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsc/dsc_layer.hpp"

namespace dsc {

struct GradBundle {
  Matrix dU_hat;  // M x d
  Matrix dV_hat;  // M x d
  Matrix dW_r;    // d x M
  Matrix dW0;     // d x d
  Matrix dX;      // B x d
  std::vector<double> dGamma;  // size 1 or d

  static GradBundle zeros(const DscLayer& layer, std::size_t B) {
    GradBundle g;
    g.dU_hat = Matrix(layer.M(), layer.d());
    g.dV_hat = Matrix(layer.M(), layer.d());
    g.dW_r = Matrix(layer.d(), layer.M());
    g.dW0 = Matrix(layer.d(), layer.d());
    g.dX = Matrix(B, layer.d());
    g.dGamma.assign(layer.gamma.size(), 0.0);
    return g;
  }
};

// Distances to the nondifferentiable boundaries of the computation: top-K
// selection ties, the projection kink at eps_norm, and the logit clamp.
struct DifferentiabilityGuard {
  double min_topk_margin = 0.0;
  double min_norm_margin = 0.0;
  double clamp_margin = 0.0;

  bool pass(double threshold) const {
    return min_topk_margin > threshold && min_norm_margin > threshold &&
           clamp_margin > threshold;
  }
};

struct GuardError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline DifferentiabilityGuard compute_guard(const DscLayer& layer,
                                            const Matrix& X) {
  const std::size_t M = layer.M(), K = layer.K();
  RoutingOutcome out = route(layer.router, X, K);
  DifferentiabilityGuard g;
  g.min_topk_margin = std::numeric_limits<double>::infinity();
  g.min_norm_margin = std::numeric_limits<double>::infinity();
  g.clamp_margin = std::numeric_limits<double>::infinity();

  for (std::size_t b = 0; b < X.rows; ++b) {
    if (K < M) {
      double min_sel = std::numeric_limits<double>::infinity();
      double max_unsel = -std::numeric_limits<double>::infinity();
      std::vector<bool> selected(M, false);
      for (std::size_t j : out.indices[b]) selected[j] = true;
      for (std::size_t j = 0; j < M; ++j) {
        if (selected[j])
          min_sel = std::min(min_sel, out.alpha(b, j));
        else
          max_unsel = std::max(max_unsel, out.alpha(b, j));
      }
      g.min_topk_margin = std::min(g.min_topk_margin, min_sel - max_unsel);
    }
    for (std::size_t j = 0; j < M; ++j) {
      const double rr = out.r_raw(b, j);
      g.clamp_margin = std::min(
          g.clamp_margin,
          std::min(std::fabs(rr - layer.router.tau), std::fabs(rr + layer.router.tau)));
    }
  }
  for (std::size_t j = 0; j < M; ++j) {
    const double nu = norm2(layer.bank.U_hat.row_span(j));
    const double nv = norm2(layer.bank.V_hat.row_span(j));
    g.min_norm_margin = std::min(
        g.min_norm_margin, std::min(std::fabs(nu - layer.bank.eps_norm),
                                    std::fabs(nv - layer.bank.eps_norm)));
  }
  return g;
}

struct LossBreakdown {
  double task = 0.0;
  double aux = 0.0;
  double budget = 0.0;
  double frame = 0.0;
  double z = 0.0;
  double total = 0.0;

  void recompose(const DscConfig& c) {
    total = task + c.lambda_aux * aux + c.lambda_budget * budget +
            c.lambda_frame * frame + c.lambda_z * z;
  }
};

namespace detail {

struct RegWeights {
  double aux = 0.0, budget = 0.0, frame = 0.0, z = 0.0;
};

// Reverse pass for sum_b <upstream_b, y_b> plus the weighted router/bank
// regularizers. Selection indices are frozen; softplus' = sigmoid; the clamp
// passes gradient on the closed interval [-tau, tau].
inline GradBundle backward_impl(const DscLayer& layer, const Matrix& X,
                                const Matrix& upstream,
                                const ForwardCache& cache,
                                const RegWeights& reg,
                                LossBreakdown* breakdown) {
  const std::size_t B = X.rows, d = layer.d(), M = layer.M(), K = layer.K();
  const RoutingOutcome& out = cache.outcome;
  const bool scalar_gamma = layer.config.gamma_mode == GammaMode::Scalar;
  const double eps = layer.router.eps_div;

  GradBundle g = GradBundle::zeros(layer, B);
  Matrix dU_proj(M, d), dV_proj(M, d);
  Matrix dr(B, M);  // grad w.r.t. clamped logits

  // Batch-level quantities for the router regularizers.
  std::vector<double> P(M, 0.0);
  if (reg.aux != 0.0 || breakdown) {
    for (std::size_t j = 0; j < M; ++j) {
      for (std::size_t b = 0; b < B; ++b) P[j] += out.softmax_r(b, j);
      P[j] /= static_cast<double>(B);
    }
  }
  double mean_S = 0.0;
  for (double s : out.S) mean_S += s;
  mean_S /= static_cast<double>(B);
  const double budget_gap = std::max(0.0, layer.config.mu - mean_S);
  // dL_budget/dS_b, shared by every token.
  const double dS_budget =
      reg.budget * (-2.0) * budget_gap / static_cast<double>(B);

  if (breakdown) {
    double aux_val = 0.0;
    for (std::size_t j = 0; j < M; ++j) aux_val += P[j] * P[j];
    breakdown->aux = static_cast<double>(M) * aux_val;
    breakdown->budget = budget_gap * budget_gap;
    double zv = 0.0;
    for (std::size_t b = 0; b < B; ++b) zv += out.lse[b] * out.lse[b];
    breakdown->z = zv / static_cast<double>(B);
    breakdown->frame = (M >= 2) ? (frame_potential_of(cache.proj.U) +
                                   frame_potential_of(cache.proj.V))
                                : 0.0;
  }

  std::vector<double> w(d), dx_r(d), dp(M);
  for (std::size_t b = 0; b < B; ++b) {
    // Gate scale.
    if (scalar_gamma) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        s += upstream(b, i) * cache.y_dyn_pre(b, i);
        w[i] = layer.gamma[0] * upstream(b, i);
      }
      g.dGamma[0] += s;
    } else {
      for (std::size_t i = 0; i < d; ++i) {
        g.dGamma[i] += upstream(b, i) * cache.y_dyn_pre(b, i);
        w[i] = layer.gamma[i] * upstream(b, i);
      }
    }

    // Atom composition path.
    const double S = out.S[b];
    const double th = std::tanh(S);
    const double sech2 = 1.0 - th * th;
    const double h = th / (S + eps);
    const double hp = (sech2 * (S + eps) - th) / ((S + eps) * (S + eps));

    std::vector<double> dz(K, 0.0), dphi(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t j = out.indices[b][k];
      const double dcm = dot({w.data(), d}, cache.proj.V.row_span(j));
      const double cm = cache.c_lat(b, k) * out.z_hat(b, k);
      double* dvj = dV_proj.row(j);
      for (std::size_t i = 0; i < d; ++i) dvj[i] += cm * w[i];
      const double dc_lat = dcm * out.z_hat(b, k);
      dz[k] = dcm * cache.c_lat(b, k);
      double* duj = dU_proj.row(j);
      const double* xb = X.row(b);
      const double* uj = cache.proj.U.row(j);
      for (std::size_t i = 0; i < d; ++i) {
        duj[i] += dc_lat * xb[i];
        g.dX(b, i) += dc_lat * uj[i];
      }
    }

    // z_hat = phi * tanh(S)/(S+eps) with S = sum phi.
    double dS = dS_budget;
    for (std::size_t k = 0; k < K; ++k) {
      dphi[k] = dz[k] * h;
      dS += dz[k] * out.phi(b, k) * hp;
    }
    for (std::size_t k = 0; k < K; ++k) dphi[k] += dS;

    // phi -> selected logits (softplus' = sigmoid).
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t j = out.indices[b][k];
      dr(b, j) += dphi[k] * sigmoid(out.r(b, j));
    }

    // Aux loss: softmax backward with dP_j = 2 M P_j / B.
    if (reg.aux != 0.0) {
      const double coeff =
          reg.aux * 2.0 * static_cast<double>(M) / static_cast<double>(B);
      double inner = 0.0;
      for (std::size_t j = 0; j < M; ++j) {
        dp[j] = coeff * P[j];
        inner += dp[j] * out.softmax_r(b, j);
      }
      for (std::size_t j = 0; j < M; ++j)
        dr(b, j) += out.softmax_r(b, j) * (dp[j] - inner);
    }

    // Z loss: d lse^2 / dr_j = 2 lse softmax_j.
    if (reg.z != 0.0) {
      const double coeff = reg.z * 2.0 * out.lse[b] / static_cast<double>(B);
      for (std::size_t j = 0; j < M; ++j)
        dr(b, j) += coeff * out.softmax_r(b, j);
    }

    // Clamp mask, router matrix, and input path.
    std::fill(dx_r.begin(), dx_r.end(), 0.0);
    for (std::size_t j = 0; j < M; ++j) {
      const double rr = out.r_raw(b, j);
      const double drj =
          (rr >= -layer.router.tau && rr <= layer.router.tau) ? dr(b, j) : 0.0;
      if (drj == 0.0) continue;
      for (std::size_t i = 0; i < d; ++i) {
        g.dW_r(i, j) += out.x_routing(b, i) * drj;
        dx_r[i] += layer.router.W_r(i, j) * drj;
      }
    }

    if (layer.router.use_layernorm) {
      // x_routing = (x - mean)/sqrt(var + eps); population statistics.
      double mean = 0.0;
      for (std::size_t i = 0; i < d; ++i) mean += X(b, i);
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        var += (X(b, i) - mean) * (X(b, i) - mean);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + layer.router.ln_eps);
      double gmean = 0.0, gx = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        gmean += dx_r[i];
        gx += dx_r[i] * out.x_routing(b, i);
      }
      gmean /= static_cast<double>(d);
      gx /= static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i)
        g.dX(b, i) += inv * (dx_r[i] - gmean - out.x_routing(b, i) * gx);
    } else {
      for (std::size_t i = 0; i < d; ++i) g.dX(b, i) += dx_r[i];
    }

    // Static base.
    const double* xb = X.row(b);
    for (std::size_t i = 0; i < d; ++i) {
      const double ui = upstream(b, i);
      if (ui == 0.0) continue;
      for (std::size_t a = 0; a < d; ++a) g.dW0(a, i) += xb[a] * ui;
      for (std::size_t a = 0; a < d; ++a) g.dX(b, a) += layer.W0(a, i) * ui;
    }
  }

  // Frame regularizer acts on the projected rows.
  if (reg.frame != 0.0) {
    frame_potential_grad_projected(cache.proj.U, reg.frame, dU_proj);
    frame_potential_grad_projected(cache.proj.V, reg.frame, dV_proj);
  }

  // Map projected-row gradients back through the unit-ball projection.
  for (std::size_t j = 0; j < M; ++j) {
    projection_backward_row(cache.proj.U.row_span(j), cache.proj.norm_U[j],
                            layer.bank.eps_norm, dU_proj.row_span(j),
                            {g.dU_hat.row(j), d});
    projection_backward_row(cache.proj.V.row_span(j), cache.proj.norm_V[j],
                            layer.bank.eps_norm, dV_proj.row_span(j),
                            {g.dV_hat.row(j), d});
  }
  return g;
}

}  // namespace detail

// Gradient of sum_b <upstream_b, y_b> w.r.t. every parameter group and the
// input. Errors out when the forward pass sits exactly on a selection tie,
// the clamp boundary, or the projection kink.
inline GradBundle backward(const DscLayer& layer, const Matrix& X,
                           const Matrix& upstream) {
  const DifferentiabilityGuard guard = compute_guard(layer, X);
  if (!(guard.min_topk_margin > 0.0))
    throw GuardError("backward: top-K selection tie");
  if (!(guard.min_norm_margin > 0.0))
    throw GuardError("backward: atom norm at the projection kink");
  if (!(guard.clamp_margin > 0.0))
    throw GuardError("backward: logit exactly at the clamp boundary");
  ForwardCache cache;
  forward(layer, X, &cache);
  return detail::backward_impl(layer, X, upstream, cache,
                               detail::RegWeights{}, nullptr);
}

enum class TaskTerm {
  ProbeHalfSq,  // 0.5 * ||Y - T||^2, summed
  MseMean,      // mean over B*d of (Y - T)^2
};

// Full objective (task term + the layer's weighted regularizers) with its
// gradient, sharing one forward/backward pass.
inline std::pair<LossBreakdown, GradBundle> objective_with_grad(
    const DscLayer& layer, const Matrix& X, const Matrix& Y_target,
    TaskTerm term) {
  ForwardCache cache;
  const Matrix Y = forward(layer, X, &cache);
  if (!Y.same_shape(Y_target))
    throw std::invalid_argument("objective_with_grad: target shape mismatch");

  Matrix upstream(Y.rows, Y.cols);
  double task = 0.0;
  const double scale =
      (term == TaskTerm::ProbeHalfSq)
          ? 1.0
          : 2.0 / static_cast<double>(Y.rows * Y.cols);
  for (std::size_t i = 0; i < Y.data.size(); ++i) {
    const double diff = Y.data[i] - Y_target.data[i];
    upstream.data[i] = scale * diff;
    task += (term == TaskTerm::ProbeHalfSq)
                ? 0.5 * diff * diff
                : diff * diff / static_cast<double>(Y.data.size());
  }

  const DscConfig& c = layer.config;
  detail::RegWeights reg{c.lambda_aux, c.lambda_budget, c.lambda_frame,
                         c.lambda_z};
  LossBreakdown breakdown;
  GradBundle g =
      detail::backward_impl(layer, X, upstream, cache, reg, &breakdown);
  breakdown.task = task;
  breakdown.recompose(c);
  if (!std::isfinite(breakdown.total))
    throw std::runtime_error("objective_with_grad: non-finite loss");
  return {breakdown, g};
}

struct FdEntry {
  std::string group;
  double max_rel_err = 0.0;
  bool skipped = false;
  std::string reason;
};

struct FdReport {
  std::vector<FdEntry> entries;
  double worst = 0.0;  // over non-skipped groups
};

namespace detail {

// Independent re-evaluation of the full objective in extended precision.
// Shares no code with the forward pass under test, and keeps the central
// differences from being drowned in double-rounding noise at small h.
inline long double objective_value_ld(const DscLayer& layer, const Matrix& X,
                                      const Matrix& T, TaskTerm term) {
  using ld = long double;
  const std::size_t B = X.rows, d = layer.d(), M = layer.M(), K = layer.K();
  const DscConfig& c = layer.config;
  auto sp = [](ld x) -> ld {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  };

  // projected banks
  std::vector<ld> U(M * d), V(M * d);
  for (std::size_t j = 0; j < M; ++j) {
    ld nu = 0, nv = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const ld u = layer.bank.U_hat(j, i), v = layer.bank.V_hat(j, i);
      nu += u * u;
      nv += v * v;
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    const ld du = std::max<ld>(layer.bank.eps_norm, nu);
    const ld dv = std::max<ld>(layer.bank.eps_norm, nv);
    for (std::size_t i = 0; i < d; ++i) {
      U[j * d + i] = static_cast<ld>(layer.bank.U_hat(j, i)) / du;
      V[j * d + i] = static_cast<ld>(layer.bank.V_hat(j, i)) / dv;
    }
  }

  ld task = 0, zl = 0, mean_S = 0;
  std::vector<ld> P(M, 0);
  std::vector<ld> xr(d), r(M), alpha(M), y(d), ydyn(d);
  for (std::size_t b = 0; b < B; ++b) {
    if (layer.router.use_layernorm) {
      ld mean = 0;
      for (std::size_t i = 0; i < d; ++i) mean += X(b, i);
      mean /= static_cast<ld>(d);
      ld var = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const ld dvi = X(b, i) - mean;
        var += dvi * dvi;
      }
      var /= static_cast<ld>(d);
      const ld inv = 1.0L / std::sqrt(var + static_cast<ld>(layer.router.ln_eps));
      for (std::size_t i = 0; i < d; ++i) xr[i] = (X(b, i) - mean) * inv;
    } else {
      for (std::size_t i = 0; i < d; ++i) xr[i] = X(b, i);
    }
    const ld tau = layer.router.tau;
    ld rmax = -tau;
    for (std::size_t j = 0; j < M; ++j) {
      ld s = 0;
      for (std::size_t i = 0; i < d; ++i) s += xr[i] * layer.router.W_r(i, j);
      r[j] = std::clamp<ld>(s, -tau, tau);
      alpha[j] = sp(r[j]);
      rmax = std::max(rmax, r[j]);
    }
    ld esum = 0;
    for (std::size_t j = 0; j < M; ++j) esum += std::exp(r[j] - rmax);
    const ld lse = rmax + std::log(esum);
    zl += lse * lse;
    for (std::size_t j = 0; j < M; ++j) P[j] += std::exp(r[j] - rmax) / esum;

    // top-K by repeated max, ties toward the lowest index
    std::vector<std::size_t> sel;
    std::vector<bool> taken(M, false);
    ld S = 0;
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t best = M;
      for (std::size_t j = 0; j < M; ++j)
        if (!taken[j] && (best == M || alpha[j] > alpha[best])) best = j;
      taken[best] = true;
      sel.push_back(best);
      S += alpha[best];
    }
    mean_S += S;
    const ld gate = std::tanh(S) / (S + static_cast<ld>(layer.router.eps_div));

    for (std::size_t i = 0; i < d; ++i) {
      ld s = 0;
      for (std::size_t a = 0; a < d; ++a) s += static_cast<ld>(X(b, a)) * layer.W0(a, i);
      y[i] = s;
      ydyn[i] = 0;
    }
    for (std::size_t j : sel) {
      ld clat = 0;
      for (std::size_t i = 0; i < d; ++i) clat += static_cast<ld>(X(b, i)) * U[j * d + i];
      const ld cm = clat * alpha[j] * gate;
      for (std::size_t i = 0; i < d; ++i) ydyn[i] += cm * V[j * d + i];
    }
    const bool scalar = c.gamma_mode == GammaMode::Scalar;
    for (std::size_t i = 0; i < d; ++i) {
      const ld g = scalar ? layer.gamma[0] : layer.gamma[i];
      y[i] += g * ydyn[i];
      const ld diff = y[i] - static_cast<ld>(T(b, i));
      task += (term == TaskTerm::ProbeHalfSq)
                  ? 0.5L * diff * diff
                  : diff * diff / static_cast<ld>(B * d);
    }
  }

  ld aux = 0;
  for (std::size_t j = 0; j < M; ++j) {
    const ld pj = P[j] / static_cast<ld>(B);
    aux += pj * pj;
  }
  aux *= static_cast<ld>(M);
  const ld gap = std::max<ld>(0.0L, static_cast<ld>(c.mu) - mean_S / static_cast<ld>(B));
  const ld budget = gap * gap;
  ld frame = 0;
  if (M >= 2) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < M; ++j) {
        if (i == j) continue;
        ld gu = 0, gv = 0;
        for (std::size_t k = 0; k < d; ++k) {
          gu += U[i * d + k] * U[j * d + k];
          gv += V[i * d + k] * V[j * d + k];
        }
        frame += gu * gu + gv * gv;
      }
  }
  return task + static_cast<ld>(c.lambda_aux) * aux +
         static_cast<ld>(c.lambda_budget) * budget +
         static_cast<ld>(c.lambda_frame) * frame +
         static_cast<ld>(c.lambda_z) * (zl / static_cast<ld>(B));
}

inline double fd_group(DscLayer& layer, const Matrix& X, const Matrix& T,
                       TaskTerm term, std::span<double> params,
                       std::span<const double> analytic, double h) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    const long double fp = objective_value_ld(layer, X, T, term);
    params[i] = orig - h;
    const long double fm = objective_value_ld(layer, X, T, term);
    params[i] = orig;
    const double numeric =
        static_cast<double>((fp - fm) / (2.0L * static_cast<long double>(h)));
    const double denom =
        std::max({std::fabs(numeric), std::fabs(analytic[i]), 1e-8});
    worst = std::max(worst, std::fabs(numeric - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace detail

// Central-difference check of the full objective against the analytic
// gradients, per parameter group. Groups whose guard margin cannot absorb the
// step are reported as skipped rather than failed.
inline FdReport finite_diff_check(const DscLayer& layer, const Matrix& X,
                                  const Matrix& Y_target, double h = 1e-5,
                                  TaskTerm term = TaskTerm::ProbeHalfSq) {
  const DifferentiabilityGuard guard = compute_guard(layer, X);
  auto [loss, analytic] = objective_with_grad(layer, X, Y_target, term);
  (void)loss;

  DscLayer work = layer;  // perturbed copy
  FdReport report;
  const double safety = 10.0 * h;

  auto run = [&](const std::string& name, std::span<double> params,
                 std::span<const double> grads, bool needs_norm_margin,
                 bool needs_router_margin) {
    FdEntry e;
    e.group = name;
    if (needs_norm_margin && guard.min_norm_margin <= safety) {
      e.skipped = true;
      e.reason = "atom norm within 10h of the projection kink";
    } else if (needs_router_margin &&
               (guard.min_topk_margin <= safety || guard.clamp_margin <= safety)) {
      e.skipped = true;
      e.reason = "routing within 10h of a selection tie or clamp boundary";
    } else {
      e.max_rel_err = detail::fd_group(work, X, Y_target, term, params, grads, h);
      report.worst = std::max(report.worst, e.max_rel_err);
    }
    report.entries.push_back(std::move(e));
  };

  run("U_hat", work.bank.U_hat.data, analytic.dU_hat.data, true, false);
  run("V_hat", work.bank.V_hat.data, analytic.dV_hat.data, true, false);
  run("W_r", work.router.W_r.data, analytic.dW_r.data, false, true);
  run("gamma", work.gamma, analytic.dGamma, false, false);
  run("W0", work.W0.data, analytic.dW0.data, false, false);
  return report;
}

}  // namespace dsc
