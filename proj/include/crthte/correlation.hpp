#pragma once

// Intracluster correlation structures for outcomes and covariates.
//
// Every supported structure is a special case of the three-parameter block
// exchangeable form over one cluster with J periods of m individuals:
//
//   corr = 1    same observation
//   corr = c1   same period, different individuals
//   corr = c0   same individual, different periods
//   corr = c2   different periods, different individuals
//
// Observation index layout is period-major: index = period * m + individual.
// All matrices, design rows, and simulated data in this library use it.
//
// Such matrices live in the span of {I(x)I, 1(x)I, I(x)1, 1(x)1} where 1 is the
// all-ones matrix and the left factor acts on periods. The four Kronecker
// products of the centering / averaging projectors are the eigenspaces, so
// eigenvalues and inverses have closed forms and never need a dense solve.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crthte/errors.hpp"

namespace crthte {

inline constexpr long kDefaultDimensionCap = 20000;
inline constexpr double kPsdTolerance = 1e-12;

// Correlation parameters of the block exchangeable form.
struct BlockParams {
  double c0 = 0.0;  // same individual, different periods
  double c1 = 0.0;  // same period, different individuals
  double c2 = 0.0;  // different periods, different individuals

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

// Coefficients on the basis {I(x)I, 1(x)I, I(x)1, 1(x)1}.
struct KronForm {
  double ii = 0.0;
  double ji = 0.0;
  double ij = 0.0;
  double jj = 0.0;

  // The m x m block between two periods is  diag * I + ones * 1.
  struct Block {
    double diag;
    double ones;
  };
  Block block(bool same_period) const {
    return same_period ? Block{ii + ji, ij + jj} : Block{ji, jj};
  }

  KronForm scaled(double f) const { return {ii * f, ji * f, ij * f, jj * f}; }
};

inline KronForm kron_form(const BlockParams& p) {
  return {1.0 - p.c1 - p.c0 + p.c2, p.c0 - p.c2, p.c1 - p.c2, p.c2};
}

struct Eigenpair {
  double value;
  long multiplicity;
};

// Eigenvalues of the block exchangeable matrix in canonical order
//   tau1: within-period and within-individual contrasts   ((J-1)(m-1))
//   tau2: period contrasts of cluster-period means          (J-1)
//   tau3: individual contrasts of individual means          (m-1)
//   tau4: the cluster mean                                  1
inline std::array<Eigenpair, 4> block_spectrum(const BlockParams& p, long m, long periods) {
  const double md = static_cast<double>(m);
  const double jd = static_cast<double>(periods);
  const double t1 = 1.0 - p.c1 - p.c0 + p.c2;
  const double t2 = 1.0 + (md - 1.0) * p.c1 - p.c0 - (md - 1.0) * p.c2;
  const double t3 = 1.0 - p.c1 + (jd - 1.0) * (p.c0 - p.c2);
  const double t4 = 1.0 + (md - 1.0) * p.c1 + (jd - 1.0) * p.c0 + (jd - 1.0) * (md - 1.0) * p.c2;
  return {{{t1, (periods - 1) * (m - 1)}, {t2, periods - 1}, {t3, m - 1}, {t4, 1}}};
}

inline std::array<double, 4> eigenvalues_block(double alpha0, double alpha1, double alpha2, long m,
                                               long periods) {
  const auto s = block_spectrum({alpha0, alpha1, alpha2}, m, periods);
  return {s[0].value, s[1].value, s[2].value, s[3].value};
}

inline std::array<long, 4> multiplicities_block(long m, long periods) {
  return {(periods - 1) * (m - 1), periods - 1, m - 1, 1};
}

// Nested exchangeable (c0 == c2) spectrum:
//   lambda1 = 1 - a1                       multiplicity J(m-1)
//   lambda2 = 1 + (m-1)a1 - m a2           multiplicity J-1
//   lambda3 = 1 + (m-1)a1 + (J-1)m a2      multiplicity 1
inline std::array<double, 3> eigenvalues_nested(double alpha1, double alpha2, long m, long periods) {
  const double md = static_cast<double>(m);
  const double jd = static_cast<double>(periods);
  return {1.0 - alpha1, 1.0 + (md - 1.0) * alpha1 - md * alpha2,
          1.0 + (md - 1.0) * alpha1 + (jd - 1.0) * md * alpha2};
}

inline std::array<long, 3> multiplicities_nested(long m, long periods) {
  return {periods * (m - 1), periods - 1, 1};
}

inline double min_eigenvalue(const BlockParams& p, long m, long periods) {
  double lo = 1.0;
  for (const auto& e : block_spectrum(p, m, periods))
    if (e.multiplicity > 0) lo = std::min(lo, e.value);
  return lo;
}

// Inverse expressed on the Kronecker basis. Empty eigenspaces (J == 1 or
// m == 1) contribute nothing.
inline KronForm inverse_form(const BlockParams& p, long m, long periods) {
  const auto s = block_spectrum(p, m, periods);
  for (const auto& e : s) {
    if (e.multiplicity > 0 && e.value <= kPsdTolerance) {
      throw ValidationError("correlation matrix is singular or not positive definite (eigenvalue " +
                            std::to_string(e.value) + ")");
    }
  }
  const double md = static_cast<double>(m);
  const double jd = static_cast<double>(periods);
  KronForm f;
  if (s[0].multiplicity > 0) {
    const double w = 1.0 / s[0].value;
    f.ii += w;
    f.ji -= w / jd;
    f.ij -= w / md;
    f.jj += w / (jd * md);
  }
  if (s[1].multiplicity > 0) {
    const double w = 1.0 / s[1].value;
    f.ij += w / md;
    f.jj -= w / (jd * md);
  }
  if (s[2].multiplicity > 0) {
    const double w = 1.0 / s[2].value;
    f.ji += w / jd;
    f.jj -= w / (jd * md);
  }
  f.jj += 1.0 / (s[3].value * jd * md);
  return f;
}

inline void check_dimension(long m, long periods, long cap) {
  if (m < 1 || periods < 1) throw ValidationError("cluster-period size and periods must be >= 1");
  if (m * periods > cap) {
    throw ResourceError("matrix dimension " + std::to_string(m * periods) + " exceeds cap " +
                        std::to_string(cap));
  }
}

inline Eigen::MatrixXd dense_matrix(const BlockParams& p, long m, long periods,
                                    long cap = kDefaultDimensionCap) {
  check_dimension(m, periods, cap);
  const long n = m * periods;
  Eigen::MatrixXd r(n, n);
  for (long a = 0; a < n; ++a) {
    for (long b = 0; b < n; ++b) {
      const bool same_period = a / m == b / m;
      const bool same_individual = a % m == b % m;
      if (a == b)
        r(a, b) = 1.0;
      else if (same_period)
        r(a, b) = p.c1;
      else if (same_individual)
        r(a, b) = p.c0;
      else
        r(a, b) = p.c2;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Outcome structures
// ---------------------------------------------------------------------------

enum class OutcomeKind { exchangeable, arm_specific_exchangeable, nested_exchangeable, block_exchangeable };

struct OutcomeCorrelation {
  OutcomeKind kind = OutcomeKind::exchangeable;
  double alpha0 = 0.0;  // within-individual (block only)
  double alpha1 = 0.0;  // within-period
  double alpha2 = 0.0;  // between-period
  bool cac_mode = false;
  std::optional<std::pair<double, double>> arm_values;  // (control, treatment) alpha1

  static OutcomeCorrelation exchangeable(double alpha1) {
    return {OutcomeKind::exchangeable, alpha1, alpha1, alpha1, false, std::nullopt};
  }
  static OutcomeCorrelation nested(double alpha1, double alpha2) {
    return {OutcomeKind::nested_exchangeable, alpha2, alpha1, alpha2, false, std::nullopt};
  }
  static OutcomeCorrelation nested_cac(double alpha1, double cac) {
    check_cac(cac);
    auto c = nested(alpha1, cac * alpha1);
    c.cac_mode = true;
    return c;
  }
  static OutcomeCorrelation block(double alpha0, double alpha1, double alpha2) {
    return {OutcomeKind::block_exchangeable, alpha0, alpha1, alpha2, false, std::nullopt};
  }
  static OutcomeCorrelation block_cac(double alpha0, double alpha1, double cac) {
    check_cac(cac);
    auto c = block(alpha0, alpha1, cac * alpha1);
    c.cac_mode = true;
    return c;
  }
  static OutcomeCorrelation arm_specific(double control, double treatment) {
    return {OutcomeKind::arm_specific_exchangeable, 0.0, 0.0, 0.0, false,
            std::make_pair(control, treatment)};
  }

  double cac() const { return alpha1 == 0.0 ? 0.0 : alpha2 / alpha1; }

  BlockParams params() const {
    if (kind == OutcomeKind::arm_specific_exchangeable)
      throw ValidationError("arm-specific correlation needs an arm; use params_for_arm");
    switch (kind) {
      case OutcomeKind::exchangeable:
        return {alpha1, alpha1, alpha1};
      case OutcomeKind::nested_exchangeable:
        return {alpha2, alpha1, alpha2};
      default:
        return {alpha0, alpha1, alpha2};
    }
  }

  BlockParams params_for_arm(bool treated) const {
    if (kind != OutcomeKind::arm_specific_exchangeable) return params();
    const double a = treated ? arm_values->second : arm_values->first;
    return {a, a, a};
  }

 private:
  static void check_cac(double cac) {
    if (!(cac >= 0.0 && cac <= 1.0)) throw ValidationError("CAC must lie in [0, 1]", "cac");
  }
};

// ---------------------------------------------------------------------------
// Covariate structures
// ---------------------------------------------------------------------------

enum class CovariateKind {
  independent,
  exchangeable,            // rho1 everywhere
  nested_exchangeable,     // rho1 within period, rho2 between periods
  cluster_level_constant,  // all pairwise correlations 1
  cohort_time_invariant    // 1 for the same individual, rho0 otherwise
};

struct CovariateCorrelation {
  CovariateKind kind = CovariateKind::independent;
  double rho0 = 0.0;
  double rho1 = 0.0;
  double rho2 = 0.0;
  bool cac_mode = false;

  static CovariateCorrelation independent() { return {}; }
  static CovariateCorrelation exchangeable(double rho1) {
    return {CovariateKind::exchangeable, rho1, rho1, rho1, false};
  }
  static CovariateCorrelation nested(double rho1, double rho2) {
    return {CovariateKind::nested_exchangeable, rho2, rho1, rho2, false};
  }
  static CovariateCorrelation nested_cac(double rho1, double cac) {
    if (!(cac >= 0.0 && cac <= 1.0)) throw ValidationError("CAC must lie in [0, 1]", "covariate.cac");
    auto c = nested(rho1, cac * rho1);
    c.cac_mode = true;
    return c;
  }
  static CovariateCorrelation cluster_level_constant() {
    return {CovariateKind::cluster_level_constant, 1.0, 1.0, 1.0, false};
  }
  static CovariateCorrelation cohort_time_invariant(double rho0) {
    return {CovariateKind::cohort_time_invariant, rho0, rho0, rho0, false};
  }

  BlockParams params() const {
    switch (kind) {
      case CovariateKind::independent:
        return {0.0, 0.0, 0.0};
      case CovariateKind::exchangeable:
        return {rho1, rho1, rho1};
      case CovariateKind::nested_exchangeable:
        return {rho2, rho1, rho2};
      case CovariateKind::cluster_level_constant:
        return {1.0, 1.0, 1.0};
      case CovariateKind::cohort_time_invariant:
        return {1.0, rho0, rho0};
    }
    return {};
  }
};

// Covariate matrices may be singular; they are only used for second moments.
inline Eigen::MatrixXd build_outcome_matrix(const OutcomeCorrelation& corr, long m, long periods,
                                            long cap = kDefaultDimensionCap) {
  const BlockParams p = corr.params();
  auto r = dense_matrix(p, m, periods, cap);
  const double lo = min_eigenvalue(p, m, periods);
  if (lo < -kPsdTolerance)
    throw ValidationError("outcome correlation matrix is not positive semi-definite", "outcome");
  return r;
}

inline Eigen::MatrixXd build_covariate_matrix(const CovariateCorrelation& corr, long m, long periods,
                                              long cap = kDefaultDimensionCap) {
  const BlockParams p = corr.params();
  auto r = dense_matrix(p, m, periods, cap);
  if (min_eigenvalue(p, m, periods) < -kPsdTolerance)
    throw ValidationError("covariate correlation matrix is not positive semi-definite", "covariate");
  return r;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

enum class Severity { hard, advisory };

struct Finding {
  Severity severity;
  std::string code;
  std::string message;
};

inline bool has_hard(const std::vector<Finding>& findings) {
  for (const auto& f : findings)
    if (f.severity == Severity::hard) return true;
  return false;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline void check_unit_interval(std::vector<Finding>& out, const std::string& name, double v) {
  if (!(v >= -1.0 && v <= 1.0))
    out.push_back({Severity::hard, "range", name + " = " + fmt(v) + " outside [-1, 1]"});
}

// Every eigenvalue is affine in m, so its minimum over [m_lo, m_hi] is at an
// endpoint.
inline void check_psd(std::vector<Finding>& out, const std::string& what, const BlockParams& p,
                      long m_lo, long m_hi, long periods) {
  static const char* names[] = {"tau1", "tau2", "tau3", "tau4"};
  for (long m : {m_lo, m_hi}) {
    const auto s = block_spectrum(p, m, periods);
    for (int k = 0; k < 4; ++k) {
      if (s[k].multiplicity > 0 && s[k].value < -kPsdTolerance) {
        out.push_back({Severity::hard, "not_psd",
                       what + " correlation not positive semi-definite at m = " + std::to_string(m) +
                           " (" + names[k] + " = " + fmt(s[k].value) + ")"});
        return;
      }
    }
  }
}

}  // namespace detail

inline std::vector<Finding> validate(const OutcomeCorrelation& corr, long m_lo, long m_hi,
                                     long periods) {
  std::vector<Finding> out;
  if (m_lo < 1 || m_hi < m_lo) {
    out.push_back({Severity::hard, "range", "invalid cluster-size range"});
    return out;
  }
  auto exch_bound = [&](const std::string& name, double a) {
    const double lower = m_hi > 1 ? -1.0 / static_cast<double>(m_hi - 1) : -1.0;
    if (!(a >= lower && a <= 1.0))
      out.push_back({Severity::hard, "range", name + " = " + detail::fmt(a) + ": ICC out of [-1/(m-1), 1]"});
    if (a > 0.25 && a <= 1.0)
      out.push_back({Severity::advisory, "large_icc",
                     name + " = " + detail::fmt(a) + " is unusually large for an outcome ICC"});
  };

  if (corr.kind == OutcomeKind::arm_specific_exchangeable) {
    exch_bound("alpha1 (control)", corr.arm_values->first);
    exch_bound("alpha1 (treatment)", corr.arm_values->second);
    if (has_hard(out)) return out;
    detail::check_psd(out, "control-arm outcome", corr.params_for_arm(false), m_lo, m_hi, periods);
    detail::check_psd(out, "treatment-arm outcome", corr.params_for_arm(true), m_lo, m_hi, periods);
    return out;
  }

  exch_bound("alpha1", corr.alpha1);
  if (corr.kind != OutcomeKind::exchangeable) detail::check_unit_interval(out, "alpha2", corr.alpha2);
  if (corr.kind == OutcomeKind::block_exchangeable) detail::check_unit_interval(out, "alpha0", corr.alpha0);
  if (corr.cac_mode) {
    const double cac = corr.cac();
    if (!(cac >= 0.0 && cac <= 1.0))
      out.push_back({Severity::hard, "range", "CAC = " + detail::fmt(cac) + " outside [0, 1]"});
  }
  if (corr.kind == OutcomeKind::nested_exchangeable || corr.kind == OutcomeKind::block_exchangeable) {
    if (corr.alpha1 < corr.alpha2)
      out.push_back({Severity::advisory, "ordering", "alpha1 < alpha2: between-period ICC exceeds within-period"});
  }
  if (corr.kind == OutcomeKind::block_exchangeable && corr.alpha0 < corr.alpha2)
    out.push_back({Severity::advisory, "ordering", "alpha0 < alpha2: within-individual ICC below between-period"});
  if (has_hard(out)) return out;
  detail::check_psd(out, "outcome", corr.params(), m_lo, m_hi, periods);
  return out;
}

inline std::vector<Finding> validate(const CovariateCorrelation& corr, long m_lo, long m_hi,
                                     long periods) {
  std::vector<Finding> out;
  if (m_lo < 1 || m_hi < m_lo) {
    out.push_back({Severity::hard, "range", "invalid cluster-size range"});
    return out;
  }
  switch (corr.kind) {
    case CovariateKind::independent:
    case CovariateKind::cluster_level_constant:
      return out;
    case CovariateKind::exchangeable:
      detail::check_unit_interval(out, "rho1", corr.rho1);
      break;
    case CovariateKind::nested_exchangeable:
      detail::check_unit_interval(out, "rho1", corr.rho1);
      detail::check_unit_interval(out, "rho2", corr.rho2);
      if (corr.rho1 < corr.rho2)
        out.push_back({Severity::advisory, "ordering", "rho1 < rho2: between-period covariate ICC exceeds within-period"});
      break;
    case CovariateKind::cohort_time_invariant:
      detail::check_unit_interval(out, "rho0", corr.rho0);
      break;
  }
  if (has_hard(out)) return out;
  detail::check_psd(out, "covariate", corr.params(), m_lo, m_hi, periods);
  return out;
}

}  // namespace crthte
