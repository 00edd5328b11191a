#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dsc/dsc_layer.hpp"
#include "dsc/grad.hpp"

namespace dsc {

struct SuiteResult {
  std::string name;
  std::size_t checks = 0;
  std::size_t violations = 0;
  double worst = 0.0;  // suite-specific worst figure (error or margin)
  std::vector<std::string> messages;

  void fail(const std::string& msg) {
    ++violations;
    if (messages.size() < 20) messages.push_back(msg);
  }
};

struct VerifyReport {
  std::vector<SuiteResult> suites;
  bool ok() const {
    for (const auto& s : suites)
      if (s.violations > 0) return false;
    return true;
  }
  std::string text() const {
    std::ostringstream os;
    std::size_t total = 0;
    for (const auto& s : suites) {
      os << s.name << ": " << s.checks << " checks, " << s.violations
         << " violations, worst=" << s.worst << "\n";
      for (const auto& m : s.messages) os << "  " << m << "\n";
      total += s.violations;
    }
    os << total << " violations\n";
    return os.str();
  }
  std::string csv() const {
    std::ostringstream os;
    os << "suite,checks,violations,worst\n";
    for (const auto& s : suites)
      os << s.name << ',' << s.checks << ',' << s.violations << ',' << s.worst
         << "\n";
    return os.str();
  }
};

namespace detail {

inline DscConfig random_config(Rng& rng, GammaMode mode) {
  DscConfig c;
  c.K = 1 + rng.below(8);
  c.d = 2 + rng.below(63);
  c.M = std::max<std::size_t>(c.K, 1 + rng.below(128));
  c.gamma_mode = mode;
  return c;
}

inline DscLayer random_layer(Rng& rng, std::uint64_t seed, GammaMode mode) {
  DscLayer layer = make_layer(random_config(rng, mode), seed);
  if (mode == GammaMode::Scalar) {
    layer.gamma[0] = 0.25 + rng.uniform();
  } else {
    for (double& g : layer.gamma) g = 2.0 * rng.uniform() - 1.0;
  }
  return layer;
}

}  // namespace detail

// Factorized forward vs the dense per-token operator, both variants.
inline SuiteResult suite_oracle_equivalence(std::uint64_t seed,
                                            std::size_t n_configs,
                                            double tol = 1e-10) {
  SuiteResult s;
  s.name = "oracle_equivalence";
  Rng rng = Rng::stream(seed, "verify-oracle");
  for (std::size_t i = 0; i < n_configs; ++i) {
    const GammaMode mode =
        (i % 2 == 0) ? GammaMode::Scalar : GammaMode::Channelwise;
    DscLayer layer = detail::random_layer(rng, seed + i, mode);
    Matrix X = gaussian_matrix(4, layer.d(), 1.0, rng);
    const Matrix Yf = (mode == GammaMode::Scalar) ? forward_basic(layer, X)
                                                  : forward_refined(layer, X);
    const Matrix Yo = forward_dense_oracle(layer, X);
    const double err = max_abs_diff(Yf, Yo);
    s.worst = std::max(s.worst, err);
    ++s.checks;
    if (!(err < tol))
      s.fail("config " + std::to_string(i) + ": max-abs " + std::to_string(err));
  }
  return s;
}

// Strict contraction of the gate: sum z < tanh(S) < 1, and the closed form
// (S/(S+eps)) tanh(S) to 1e-12.
inline SuiteResult suite_contraction(std::uint64_t seed, std::size_t n_tokens) {
  SuiteResult s;
  s.name = "contraction";
  Rng rng = Rng::stream(seed, "verify-contraction");
  std::size_t done = 0;
  while (done < n_tokens) {
    DscLayer layer = detail::random_layer(rng, seed + done, GammaMode::Scalar);
    const std::size_t B = std::min<std::size_t>(256, n_tokens - done);
    Matrix X = gaussian_matrix(B, layer.d(), 3.0, rng);
    RoutingOutcome out = route(layer.router, X, layer.K());
    for (std::size_t b = 0; b < B; ++b) {
      double sum_z = 0.0;
      for (std::size_t k = 0; k < layer.K(); ++k) sum_z += out.z_hat(b, k);
      const double S = out.S[b];
      const double closed =
          (S / (S + layer.router.eps_div)) * std::tanh(S);
      const double err = std::fabs(sum_z - closed);
      s.worst = std::max(s.worst, err);
      ++s.checks;
      // tanh rounds to exactly 1.0 in double for large S; the contraction
      // itself still holds strictly through the S/(S+eps) factor.
      if (!(sum_z < std::tanh(S)) || !(sum_z < 1.0) || !(err <= 1e-12))
        s.fail("token " + std::to_string(done + b) + ": sum_z=" +
               std::to_string(sum_z) + " tanh(S)=" + std::to_string(std::tanh(S)));
    }
    done += B;
  }
  return s;
}

// Power-iterated operator norm against the gate bound, including adversarial
// saturated routing over identical atoms. `inject_fault` shrinks the bound to
// force a visible violation (test hook).
inline SuiteResult suite_spectral_bound(std::uint64_t seed,
                                        std::size_t n_tokens,
                                        bool inject_fault = false) {
  SuiteResult s;
  s.name = "verify_spectral_bound";
  Rng rng = Rng::stream(seed, "verify-spectral");
  std::size_t done = 0;
  while (done < n_tokens) {
    const GammaMode mode =
        (done % 2 == 0) ? GammaMode::Scalar : GammaMode::Channelwise;
    DscLayer layer = detail::random_layer(rng, seed + done, mode);
    const std::size_t B = std::min<std::size_t>(64, n_tokens - done);
    Matrix X = gaussian_matrix(B, layer.d(), 2.0, rng);
    auto reports = verify_spectral_bound(layer, X);
    for (const auto& r : reports) {
      ++s.checks;
      const double bound = inject_fault ? r.bound * 1e-9 : r.bound;
      const bool ok = (mode == GammaMode::Scalar) ? (r.norm < bound)
                                                  : (r.norm <= bound);
      s.worst = std::max(s.worst, r.norm - bound);
      if (!ok)
        s.fail("verify_spectral_bound: norm " + std::to_string(r.norm) +
               " vs bound " + std::to_string(bound));
    }
    done += B;
  }

  // Adversarial: every atom identical, logits saturated high.
  DscConfig cfg;
  cfg.d = 8;
  cfg.M = 16;
  cfg.K = 4;
  cfg.gamma_mode = GammaMode::Scalar;
  DscLayer adv = make_layer(cfg, seed);
  adv.gamma[0] = 0.5;
  for (std::size_t j = 0; j < cfg.M; ++j)
    for (std::size_t i = 0; i < cfg.d; ++i) {
      adv.bank.U_hat(j, i) = (i == 0) ? 3.0 : 0.0;
      adv.bank.V_hat(j, i) = (i == 1) ? 3.0 : 0.0;
    }
  for (double& w : adv.router.W_r.data) w = 5.0;  // saturate the clamp
  Matrix Xa = gaussian_matrix(16, cfg.d, 2.0, rng);
  for (double& v : Xa.data) v = std::fabs(v) + 1.0;  // keep logits large
  auto reports = verify_spectral_bound(adv, Xa);
  for (const auto& r : reports) {
    ++s.checks;
    s.worst = std::max(s.worst, r.norm - r.bound);
    if (!r.ok)
      s.fail("verify_spectral_bound (adversarial): norm " +
             std::to_string(r.norm) + " vs " + std::to_string(r.bound));
  }
  return s;
}

// s*P (plus gamma) reproduces the assembled operator; coefficients live on
// the simplex.
inline SuiteResult suite_star_decomposition(std::uint64_t seed,
                                            std::size_t n_tokens) {
  SuiteResult s;
  s.name = "star_decomposition";
  Rng rng = Rng::stream(seed, "verify-star");
  std::size_t done = 0;
  while (done < n_tokens) {
    DscLayer layer = detail::random_layer(rng, seed + done, GammaMode::Scalar);
    const std::size_t B = std::min<std::size_t>(32, n_tokens - done);
    Matrix X = gaussian_matrix(B, layer.d(), 1.0, rng);
    for (std::size_t b = 0; b < B; ++b) {
      const StarDecomposition sd = star_decompose(layer, X.row_span(b));
      const Matrix dw = assemble_delta_w(layer, X.row_span(b));
      double err = 0.0;
      for (std::size_t i = 0; i < dw.data.size(); ++i)
        err = std::max(err, std::fabs(layer.gamma[0] * sd.s * sd.P.data[i] -
                                      dw.data[i]));
      s.worst = std::max(s.worst, err);
      ++s.checks;
      if (!(err <= 1e-12) || !(sd.s >= 0.0) || !(sd.s < 1.0))
        s.fail("token " + std::to_string(done + b) + ": reconstruction err " +
               std::to_string(err) + ", s=" + std::to_string(sd.s));
    }
    done += B;
  }
  return s;
}

// Unit-norm overcomplete banks sit above the Welch floor.
inline SuiteResult suite_welch_floor(std::uint64_t seed) {
  SuiteResult s;
  s.name = "welch_floor";
  Rng rng = Rng::stream(seed, "verify-welch");
  const std::pair<std::size_t, std::size_t> cases[] = {{4, 2}, {8, 3}, {16, 4}};
  for (auto [M, d] : cases) {
    BasisBank bank;
    bank.eps_norm = 1e-6;
    bank.U_hat = Matrix(M, d);
    bank.V_hat = Matrix(M, d);
    for (std::size_t j = 0; j < M; ++j) {
      std::vector<double> u(d), v(d);
      for (auto& x : u) x = rng.normal();
      for (auto& x : v) x = rng.normal();
      const double nu = norm2(u), nv = norm2(v);
      for (std::size_t i = 0; i < d; ++i) {
        bank.U_hat(j, i) = u[i] / nu;
        bank.V_hat(j, i) = v[i] / nv;
      }
    }
    const double loss = frame_potential_loss(bank);
    const double floor = welch_floor(M, d);
    ++s.checks;
    s.worst = std::min(s.worst, loss - floor);
    if (!(loss >= floor - 1e-9))
      s.fail("M=" + std::to_string(M) + " d=" + std::to_string(d) + ": loss " +
             std::to_string(loss) + " below floor " + std::to_string(floor));
  }
  return s;
}

// Structural frame-loss identities: orthonormal banks score zero, the loss
// is permutation invariant, duplicated atoms show coherence 1.
inline SuiteResult suite_frame_loss(std::uint64_t seed) {
  SuiteResult s;
  s.name = "frame_loss";
  Rng rng = Rng::stream(seed, "verify-frame");

  {
    const std::size_t d = 6, M = 4;
    BasisBank bank;
    bank.eps_norm = 1e-6;
    bank.U_hat = Matrix(M, d);
    bank.V_hat = Matrix(M, d);
    for (std::size_t j = 0; j < M; ++j) {
      bank.U_hat(j, j) = 1.0;
      bank.V_hat(j, j + 1) = 1.0;
    }
    ++s.checks;
    if (std::fabs(frame_potential_loss(bank)) > 1e-15)
      s.fail("orthonormal bank: nonzero frame loss");
  }

  {
    Rng r2 = Rng::stream(seed, "verify-frame-perm");
    BasisBank bank = make_bank(7, 5, 1e-6, r2);
    const double base = frame_potential_loss(bank);
    BasisBank permuted = bank;
    // rotate rows by 3
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t i = 0; i < 5; ++i) {
        permuted.U_hat(j, i) = bank.U_hat((j + 3) % 7, i);
        permuted.V_hat(j, i) = bank.V_hat((j + 3) % 7, i);
      }
    const double perm = frame_potential_loss(permuted);
    ++s.checks;
    s.worst = std::max(s.worst, std::fabs(base - perm));
    if (std::fabs(base - perm) > 1e-9 * std::max(1.0, base))
      s.fail("frame loss not permutation invariant");
  }

  {
    Rng r3 = Rng::stream(seed, "verify-frame-dup");
    BasisBank bank = make_bank(3, 4, 1e-6, r3);
    for (std::size_t i = 0; i < 4; ++i) bank.U_hat(1, i) = bank.U_hat(0, i);
    const CoherenceStats cs = coherence_stats(bank);
    ++s.checks;
    if (std::fabs(cs.max_abs_offdiag_U - 1.0) > 1e-12)
      s.fail("duplicated atom: max coherence != 1");
  }
  (void)rng;
  return s;
}

inline VerifyReport run_verify(std::uint64_t seed, std::size_t oracle_configs,
                               std::size_t fuzz_tokens,
                               bool inject_gamma_fault = false) {
  VerifyReport rep;
  rep.suites.push_back(suite_oracle_equivalence(seed, oracle_configs));
  rep.suites.push_back(suite_contraction(seed, fuzz_tokens));
  rep.suites.push_back(
      suite_spectral_bound(seed, fuzz_tokens / 20, inject_gamma_fault));
  rep.suites.push_back(suite_star_decomposition(seed, fuzz_tokens / 20));
  rep.suites.push_back(suite_welch_floor(seed));
  rep.suites.push_back(suite_frame_loss(seed));
  return rep;
}

}  // namespace dsc
