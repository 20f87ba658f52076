#pragma once

// Expected-information variance engine.
//
// For a cluster with treatment row u (length J) and cluster-period size m the
// model columns are
//
//   fixed:   period indicators P1..PJ (or one intercept), W = u (x) 1_m
//   random:  X (pooled) or X1..XJ (period-specific), WX = (u (x) 1_m) o X
//
// Random columns are diag(v (x) 1_m) X for a period vector v. With
// A = V^{-1} = R_y^{-1} / sigma^2 and both A and R_x block exchangeable, every
// expected cross-product reduces to a J x J quadratic form:
//
//   E[fixed' A fixed]   = v' S w
//   E[fixed' A random]  = mu v' S w
//   E[random' A random] = sigma_x^2 v' T w + mu^2 v' S w
//
// with S_jl = 1' A_jl 1 and T_jl = tr(A_jl R_x,lj). Each takes one value on
// the diagonal and one off it, so assembly is O(strata * p^2 * J^2) regardless
// of m.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "crthte/correlation.hpp"
#include "crthte/designs.hpp"
#include "crthte/errors.hpp"

namespace crthte {

inline constexpr double kEstimabilityTolerance = 1e-10;

enum class CovariateLevel { individual, cluster };
enum class CovariateType { continuous, binary };
enum class CovariateEffect { pooled, period_specific };

struct OutcomeModel {
  double sigma_yx = 1.0;
  OutcomeCorrelation correlation;
};

struct CovariateModel {
  CovariateLevel level = CovariateLevel::individual;
  CovariateType dtype = CovariateType::continuous;
  double mu_x = 0.0;
  double sigma_x = 1.0;
  double prevalence = 0.5;
  CovariateCorrelation correlation;

  static CovariateModel continuous(double mu, double sd, CovariateCorrelation corr) {
    if (!(sd > 0.0)) throw ValidationError("covariate SD must be positive", "covariate.sd");
    CovariateModel c;
    c.mu_x = mu;
    c.sigma_x = sd;
    c.correlation = corr;
    c.level = corr.kind == CovariateKind::cluster_level_constant ? CovariateLevel::cluster : CovariateLevel::individual;
    return c;
  }
  static CovariateModel binary(double p, CovariateCorrelation corr) {
    if (!(p > 0.0 && p < 1.0)) throw ValidationError("covariate prevalence must lie in (0, 1)", "covariate.prevalence");
    CovariateModel c;
    c.dtype = CovariateType::binary;
    c.prevalence = p;
    c.mu_x = p;
    c.sigma_x = std::sqrt(p * (1.0 - p));
    c.correlation = corr;
    c.level = corr.kind == CovariateKind::cluster_level_constant ? CovariateLevel::cluster : CovariateLevel::individual;
    return c;
  }

  double variance() const {
    return dtype == CovariateType::binary ? prevalence * (1.0 - prevalence) : sigma_x * sigma_x;
  }
};

// ---------------------------------------------------------------------------
// Column layout
// ---------------------------------------------------------------------------

struct Column {
  std::string name;
  bool random;                // multiplies the covariate
  std::vector<double> period; // length J
};

struct ColumnLayout {
  std::vector<Column> columns;
  int w_index = -1;
  int wx_index = -1;
  int size() const { return static_cast<int>(columns.size()); }
};

// One cluster's columns. `period_intercepts` = false replaces the J period
// indicators by a common intercept (used when the "periods" are subclusters).
inline ColumnLayout cluster_design_columns(const std::vector<std::uint8_t>& u, int J, CovariateEffect effect,
                                           bool period_intercepts = true) {
  ColumnLayout out;
  auto unit = [J](int j) {
    std::vector<double> e(J, 0.0);
    e[j] = 1.0;
    return e;
  };
  std::vector<double> w(u.begin(), u.end());
  if (J == 1 || !period_intercepts) {
    out.columns.push_back({"1", false, std::vector<double>(J, 1.0)});
  } else {
    for (int j = 0; j < J; ++j) out.columns.push_back({"P" + std::to_string(j + 1), false, unit(j)});
  }
  out.w_index = out.size();
  out.columns.push_back({"W", false, w});
  if (effect == CovariateEffect::pooled || J == 1) {
    out.columns.push_back({"X", true, std::vector<double>(J, 1.0)});
  } else {
    for (int j = 0; j < J; ++j) out.columns.push_back({"X" + std::to_string(j + 1), true, unit(j)});
  }
  out.wx_index = out.size();
  out.columns.push_back({"WX", true, w});
  return out;
}

// ---------------------------------------------------------------------------
// Strata and information assembly
// ---------------------------------------------------------------------------

// A group of identical clusters. weight is the cluster count (fractional
// weights are allowed for normalized computations).
struct Stratum {
  std::vector<std::uint8_t> u;
  double weight = 1.0;
  long m = 1;
  BlockParams outcome;
  double sigma2 = 1.0;
  BlockParams covariate;
};

struct EngineOptions {
  CovariateEffect effect = CovariateEffect::period_specific;
  bool period_intercepts = true;
  double mu_x = 0.0;
  double sigma_x2 = 1.0;
  bool dense = false;
  long dimension_cap = kDefaultDimensionCap;
};

namespace detail {

inline double quad(const Eigen::MatrixXd& M, const std::vector<double>& v, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j] == 0.0) continue;
    for (std::size_t l = 0; l < w.size(); ++l) s += v[j] * M(j, l) * w[l];
  }
  return s;
}

inline Eigen::MatrixXd stratum_information_fast(const Stratum& st, int J, const ColumnLayout& cols,
                                                const EngineOptions& opt) {
  check_dimension(st.m, J, opt.dimension_cap);
  const double md = static_cast<double>(st.m);
  const KronForm A = inverse_form(st.outcome, st.m, J).scaled(1.0 / st.sigma2);
  const KronForm R = kron_form(st.covariate);
  Eigen::MatrixXd S(J, J), T(J, J);
  for (int j = 0; j < J; ++j) {
    for (int l = 0; l < J; ++l) {
      const auto a = A.block(j == l);
      const auto r = R.block(j == l);
      S(j, l) = md * a.diag + md * md * a.ones;
      T(j, l) = md * (a.diag * r.diag + a.diag * r.ones + a.ones * r.diag) + md * md * a.ones * r.ones;
    }
  }
  const int p = cols.size();
  Eigen::MatrixXd M(p, p);
  for (int i = 0; i < p; ++i) {
    for (int k = i; k < p; ++k) {
      const auto& ci = cols.columns[i];
      const auto& ck = cols.columns[k];
      const double s = quad(S, ci.period, ck.period);
      double v;
      if (!ci.random && !ck.random)
        v = s;
      else if (ci.random && ck.random)
        v = opt.sigma_x2 * quad(T, ci.period, ck.period) + opt.mu_x * opt.mu_x * s;
      else
        v = opt.mu_x * s;
      M(i, k) = M(k, i) = v;
    }
  }
  return M;
}

// Explicit-matrix evaluation of the same expectations; used for conformance
// testing of the fast path.
inline Eigen::MatrixXd stratum_information_dense(const Stratum& st, int J, const ColumnLayout& cols,
                                                 const EngineOptions& opt) {
  const long m = st.m;
  const long N = m * J;
  const Eigen::MatrixXd Ry = dense_matrix(st.outcome, m, J, opt.dimension_cap);
  const Eigen::MatrixXd Rx = dense_matrix(st.covariate, m, J, opt.dimension_cap);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(Ry);
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= kPsdTolerance)
    throw ValidationError("outcome correlation matrix is singular or not positive definite");
  const Eigen::MatrixXd A = ldlt.solve(Eigen::MatrixXd::Identity(N, N)) / st.sigma2;

  auto expand = [&](const std::vector<double>& v) {
    Eigen::VectorXd e(N);
    for (long i = 0; i < N; ++i) e(i) = v[i / m];
    return e;
  };
  const int p = cols.size();
  std::vector<Eigen::VectorXd> ex(p);
  for (int i = 0; i < p; ++i) ex[i] = expand(cols.columns[i].period);

  Eigen::MatrixXd M(p, p);
  for (int i = 0; i < p; ++i) {
    for (int k = i; k < p; ++k) {
      const double s = ex[i].dot(A * ex[k]);
      double v;
      if (!cols.columns[i].random && !cols.columns[k].random) {
        v = s;
      } else if (cols.columns[i].random && cols.columns[k].random) {
        // tr(D_v A D_w R_x)
        const Eigen::MatrixXd B = ex[i].asDiagonal() * A * ex[k].asDiagonal();
        v = opt.sigma_x2 * (B.cwiseProduct(Rx.transpose())).sum() + opt.mu_x * opt.mu_x * s;
      } else {
        v = opt.mu_x * s;
      }
      M(i, k) = M(k, i) = v;
    }
  }
  return M;
}

}  // namespace detail

inline Eigen::MatrixXd expected_information(const std::vector<Stratum>& strata, int J, const EngineOptions& opt) {
  if (strata.empty()) throw ValidationError("design has no sequences");
  Eigen::MatrixXd total;
  for (const auto& st : strata) {
    if (static_cast<int>(st.u.size()) != J) throw ValidationError("treatment row length differs from periods");
    if (st.weight <= 0.0) continue;
    const auto cols = cluster_design_columns(st.u, J, opt.effect, opt.period_intercepts);
    const Eigen::MatrixXd M = opt.dense ? detail::stratum_information_dense(st, J, cols, opt)
                                        : detail::stratum_information_fast(st, J, cols, opt);
    if (total.size() == 0)
      total = st.weight * M;
    else
      total += st.weight * M;
  }
  if (total.size() == 0) throw ValidationError("design has no clusters");
  return total;
}

// ---------------------------------------------------------------------------
// Inversion with estimability
// ---------------------------------------------------------------------------

struct CoordinateVariance {
  double variance = 0.0;
  bool estimable = false;
};

// Variances of the requested coordinates. A coordinate is estimable iff it
// is orthogonal to the numerical null space of the information matrix
// (eigenvalues below kEstimabilityTolerance x the largest). Estimable
// coordinates of a rank-deficient matrix are read from the pseudo-inverse.
inline std::vector<CoordinateVariance> coordinate_variances(const Eigen::MatrixXd& info,
                                                            const std::vector<int>& coords) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
  const auto& ev = es.eigenvalues();
  const auto& V = es.eigenvectors();
  const double top = std::max(ev.maxCoeff(), 0.0);
  std::vector<CoordinateVariance> out;
  for (int c : coords) {
    double null_weight = 0.0, var = 0.0;
    for (int k = 0; k < ev.size(); ++k) {
      const double v2 = V(c, k) * V(c, k);
      if (ev(k) <= kEstimabilityTolerance * top)
        null_weight += v2;
      else
        var += v2 / ev(k);
    }
    if (top <= 0.0 || null_weight > 1e-8)
      out.push_back({0.0, false});
    else
      out.push_back({var, true});
  }
  // Full-rank case: prefer the direct solve for accuracy.
  if (ev.minCoeff() > kEstimabilityTolerance * top && top > 0.0) {
    const Eigen::MatrixXd inv = info.ldlt().solve(Eigen::MatrixXd::Identity(info.rows(), info.cols()));
    for (std::size_t i = 0; i < coords.size(); ++i) out[i].variance = inv(coords[i], coords[i]);
  }
  return out;
}

struct VarianceReport {
  double var_hte_total = 0.0;
  double var_ate_total = 0.0;
  double sigma2_hte_norm = 0.0;  // n Var(beta3)
  double sigma2_ate_norm = 0.0;  // n Var(beta1)
  double design_effect_hte = 0.0;
  bool estimable_ate = false;
  bool estimable_hte = false;
  double n = 0.0;
};

// ATE variance does not carry the covariate variance, so the design effect
// rescales: DE = sigma2_hte * sigma_x^2 / sigma2_ate.
inline VarianceReport report_from_information(const Eigen::MatrixXd& info, int w_index, int wx_index,
                                              double n, double sigma_x2) {
  const auto cv = coordinate_variances(info, {w_index, wx_index});
  if (!cv[1].estimable)
    throw InestimableError("design cannot identify requested effect: interaction coefficient (WX) is not estimable",
                           "beta3");
  VarianceReport r;
  r.n = n;
  r.estimable_ate = cv[0].estimable;
  r.estimable_hte = true;
  r.var_hte_total = cv[1].variance;
  r.sigma2_hte_norm = n * cv[1].variance;
  if (cv[0].estimable) {
    r.var_ate_total = cv[0].variance;
    r.sigma2_ate_norm = n * cv[0].variance;
    r.design_effect_hte = r.sigma2_hte_norm * sigma_x2 / r.sigma2_ate_norm;
  }
  return r;
}

inline VarianceReport variance_report(const std::vector<Stratum>& strata, int J, const EngineOptions& opt) {
  const auto info = expected_information(strata, J, opt);
  const auto cols = cluster_design_columns(strata.front().u, J, opt.effect, opt.period_intercepts);
  double n = 0.0;
  for (const auto& s : strata) n += s.weight;
  return report_from_information(info, cols.w_index, cols.wx_index, n, opt.sigma_x2);
}

// Strata for a treatment matrix with common m, outcome and covariate models.
inline std::vector<Stratum> strata_for(const TreatmentMatrix& tm, long m, const OutcomeModel& outcome,
                                       const CovariateModel& covariate) {
  std::vector<Stratum> out;
  const double s2 = outcome.sigma_yx * outcome.sigma_yx;
  for (int s = 0; s < tm.sequences(); ++s) {
    const bool treated_any = std::any_of(tm.rows[s].begin(), tm.rows[s].end(), [](auto v) { return v != 0; });
    out.push_back({tm.rows[s], static_cast<double>(tm.clusters_per_sequence[s]), m,
                   outcome.correlation.params_for_arm(treated_any), s2, covariate.correlation.params()});
  }
  return out;
}

inline VarianceReport variance_report(const TreatmentMatrix& tm, long m, const OutcomeModel& outcome,
                                      const CovariateModel& covariate, CovariateEffect effect,
                                      bool dense = false) {
  if (!(outcome.sigma_yx > 0.0)) throw ValidationError("outcome SD must be positive", "outcome.sd");
  EngineOptions opt;
  opt.effect = effect;
  opt.sigma_x2 = covariate.variance();
  opt.dense = dense;
  return variance_report(strata_for(tm, m, outcome, covariate), tm.periods(), opt);
}

}  // namespace crthte
