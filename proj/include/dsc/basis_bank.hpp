#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dsc/matrix.hpp"
#include "dsc/rng.hpp"

namespace dsc {

// Raw learnable basis matrices. Rows are atoms; consumers always go through
// the projected views, which live on the closed unit ball.
struct BasisBank {
  Matrix U_hat;  // M x d
  Matrix V_hat;  // M x d
  double eps_norm = 1e-6;

  std::size_t M() const { return U_hat.rows; }
  std::size_t d() const { return U_hat.cols; }
};

inline BasisBank make_bank(std::size_t M, std::size_t d, double eps_norm,
                           Rng& rng) {
  if (M < 1 || d < 2) throw std::invalid_argument("make_bank: need M >= 1, d >= 2");
  if (!(eps_norm > 0.0) || eps_norm >= 1.0)
    throw std::invalid_argument("make_bank: need 0 < eps_norm << 1");
  BasisBank bank;
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
  bank.U_hat = gaussian_matrix(M, d, std_dev, rng);
  bank.V_hat = gaussian_matrix(M, d, std_dev, rng);
  bank.eps_norm = eps_norm;
  return bank;
}

// row / max(eps, ||row||); returns the raw row norm for Jacobian reuse.
inline double project_row(std::span<const double> src, double eps_norm,
                          std::span<double> dst) {
  const double n = norm2(src);
  const double denom = std::max(eps_norm, n);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / denom;
  return n;
}

struct ProjectedBank {
  Matrix U, V;                       // M x d, row norms <= 1
  std::vector<double> norm_U, norm_V;  // raw row norms, for the Jacobian
};

inline ProjectedBank project_rows(const BasisBank& bank) {
  const std::size_t M = bank.M(), d = bank.d();
  ProjectedBank p;
  p.U = Matrix(M, d);
  p.V = Matrix(M, d);
  p.norm_U.resize(M);
  p.norm_V.resize(M);
  for (std::size_t j = 0; j < M; ++j) {
    p.norm_U[j] = project_row(bank.U_hat.row_span(j), bank.eps_norm,
                              {p.U.row(j), d});
    p.norm_V[j] = project_row(bank.V_hat.row_span(j), bank.eps_norm,
                              {p.V.row(j), d});
  }
  return p;
}

// Projected rows at the given indices. Indices must be strictly increasing.
inline std::pair<Matrix, Matrix> gather_active(
    const BasisBank& bank, std::span<const std::size_t> indices) {
  const std::size_t M = bank.M(), d = bank.d(), K = indices.size();
  Matrix U_I(K, d), V_I(K, d);
  for (std::size_t i = 0; i < K; ++i) {
    if (indices[i] >= M)
      throw std::out_of_range("gather_active: index out of range");
    if (i > 0 && indices[i] <= indices[i - 1])
      throw std::invalid_argument("gather_active: indices not strictly increasing");
    project_row(bank.U_hat.row_span(indices[i]), bank.eps_norm, {U_I.row(i), d});
    project_row(bank.V_hat.row_span(indices[i]), bank.eps_norm, {V_I.row(i), d});
  }
  return {std::move(U_I), std::move(V_I)};
}

// Off-diagonal Gram energy of the projected banks, both ordered pairs
// counted: sum_{i != j} (u_i.u_j)^2 + sum_{i != j} (v_i.v_j)^2.
inline double frame_potential_of(const Matrix& rows) {
  double loss = 0.0;
  for (std::size_t i = 0; i < rows.rows; ++i)
    for (std::size_t j = 0; j < rows.rows; ++j) {
      if (i == j) continue;
      const double g = dot(rows.row_span(i), rows.row_span(j));
      loss += g * g;
    }
  return loss;
}

inline double frame_potential_loss(const BasisBank& bank) {
  if (bank.M() < 2) throw std::invalid_argument("frame_potential_loss: need M >= 2");
  const ProjectedBank p = project_rows(bank);
  return frame_potential_of(p.U) + frame_potential_of(p.V);
}

struct CoherenceStats {
  double max_abs_offdiag_U = 0.0;
  double max_abs_offdiag_V = 0.0;
  double welch_gap = 0.0;  // frame loss minus its unit-norm Welch floor
};

inline double welch_floor(std::size_t M, std::size_t d) {
  const double m = static_cast<double>(M), dd = static_cast<double>(d);
  return std::max(0.0, 2.0 * (m * m / dd - m));
}

inline CoherenceStats coherence_stats(const BasisBank& bank) {
  if (bank.M() < 2) throw std::invalid_argument("coherence_stats: need M >= 2");
  const ProjectedBank p = project_rows(bank);
  CoherenceStats s;
  auto max_off = [](const Matrix& rows) {
    double m = 0.0;
    for (std::size_t i = 0; i < rows.rows; ++i)
      for (std::size_t j = i + 1; j < rows.rows; ++j)
        m = std::max(m, std::fabs(dot(rows.row_span(i), rows.row_span(j))));
    return m;
  };
  s.max_abs_offdiag_U = max_off(p.U);
  s.max_abs_offdiag_V = max_off(p.V);
  s.welch_gap = frame_potential_of(p.U) + frame_potential_of(p.V) -
                welch_floor(bank.M(), bank.d());
  return s;
}

// d(frame)/d(projected rows), scaled: row i += scale * 4 * sum_{j!=i} (g_ij) row_j.
inline void frame_potential_grad_projected(const Matrix& rows, double scale,
                                           Matrix& grad) {
  const std::size_t M = rows.rows, d = rows.cols;
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      if (i == j) continue;
      const double g = dot(rows.row_span(i), rows.row_span(j));
      const double c = scale * 4.0 * g;
      double* gi = grad.row(i);
      const double* rj = rows.row(j);
      for (std::size_t k = 0; k < d; ++k) gi[k] += c * rj[k];
    }
}

// Chain a projected-row gradient back through the unit-ball projection.
// Smooth branch for ||row|| > eps, constant 1/eps branch otherwise.
inline void projection_backward_row(std::span<const double> proj_row,
                                    double raw_norm, double eps_norm,
                                    std::span<const double> grad_proj,
                                    std::span<double> grad_raw_out) {
  const std::size_t d = proj_row.size();
  if (raw_norm > eps_norm) {
    const double ug = dot(proj_row, grad_proj);
    for (std::size_t k = 0; k < d; ++k)
      grad_raw_out[k] += (grad_proj[k] - proj_row[k] * ug) / raw_norm;
  } else {
    for (std::size_t k = 0; k < d; ++k)
      grad_raw_out[k] += grad_proj[k] / eps_norm;
  }
}

// Gradient of scale * frame_potential_loss w.r.t. the raw U_hat, V_hat.
inline void frame_potential_grad(const BasisBank& bank, double scale,
                                 Matrix& dU_hat, Matrix& dV_hat) {
  const std::size_t M = bank.M(), d = bank.d();
  const ProjectedBank p = project_rows(bank);
  Matrix gU(M, d), gV(M, d);
  frame_potential_grad_projected(p.U, scale, gU);
  frame_potential_grad_projected(p.V, scale, gV);
  for (std::size_t j = 0; j < M; ++j) {
    projection_backward_row(p.U.row_span(j), p.norm_U[j], bank.eps_norm,
                            gU.row_span(j), {dU_hat.row(j), d});
    projection_backward_row(p.V.row_span(j), p.norm_V[j], bank.eps_norm,
                            gV.row_span(j), {dV_hat.row(j), d});
  }
}

}  // namespace dsc
