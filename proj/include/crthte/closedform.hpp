#pragma once

// Closed-form HTE/ATE variances and their registration against the engine.
//
// All functions return per-cluster normalized variances (n Var). Eigenvalue
// helpers:
//   lambda: nested outcome spectrum (within alpha1, between alpha2)
//   zeta:   nested covariate spectrum (within rho1, between rho2)
//   tau:    block outcome spectrum, canonical order of correlation.hpp
//   eta:    time-invariant cohort covariate pair (1 - rho0, 1 + (m-1) rho0)
//
// Reference expressions name these eigenvalues by index only. Registration
// evaluates each template under every assignment of canonical eigenvalues to
// the printed labels and keeps the assignment that matches the engine to
// 1e-8 relative on a 200-point grid. The frozen assignments below are what
// that search produced; tests re-run it.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crthte/correlation.hpp"
#include "crthte/errors.hpp"
#include "crthte/scenario.hpp"

namespace crthte {

namespace detail {

inline void check_common(long m, double pi, double sigma_yx, double sigma_x) {
  if (m < 1) throw ValidationError("cluster size must be >= 1", "m");
  if (!(pi > 0.0 && pi < 1.0)) throw ValidationError("pi must lie in (0, 1)", "pi");
  if (!(sigma_yx > 0.0)) throw ValidationError("outcome SD must be positive", "sigma_yx");
  if (!(sigma_x > 0.0)) throw ValidationError("covariate SD must be positive", "sigma_x");
}

inline double positive(double d, const char* what) {
  if (!(d > 0.0) || !std::isfinite(d)) throw ValidationError(std::string("degenerate parameters: ") + what + " <= 0");
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Two-level parallel
// ---------------------------------------------------------------------------

inline double ate_var_two_level(long m, double alpha1, double pi, double sigma_yx, double sigma_x) {
  detail::check_common(m, pi, sigma_yx, sigma_x);
  const double md = static_cast<double>(m);
  return sigma_yx * sigma_yx * (1.0 + (md - 1.0) * alpha1) / (md * pi * (1.0 - pi) * sigma_x * sigma_x);
}

// Inline form: sigma2_ATE (1 - a1) / {1 + (m-2) a1 - (m-1) rho1 a1}.
inline double hte_var_two_level(long m, double alpha1, double rho1, double pi, double sigma_yx, double sigma_x) {
  detail::check_common(m, pi, sigma_yx, sigma_x);
  const double md = static_cast<double>(m);
  const double den = detail::positive(1.0 + (md - 2.0) * alpha1 - (md - 1.0) * rho1 * alpha1, "HTE design-effect denominator");
  return ate_var_two_level(m, alpha1, pi, sigma_yx, sigma_x) * (1.0 - alpha1) / den;
}

// Tabulated form with {1 + (m-2) a1} in the numerator. Kept for the
// conformance record only; the engine rejects it.
inline double hte_var_two_level_tabulated(long m, double alpha1, double rho1, double pi, double sigma_yx,
                                          double sigma_x) {
  detail::check_common(m, pi, sigma_yx, sigma_x);
  const double md = static_cast<double>(m);
  const double den = detail::positive(1.0 + (md - 2.0) * alpha1 - (md - 1.0) * rho1 * alpha1, "HTE design-effect denominator");
  return sigma_yx * sigma_yx / (pi * (1.0 - pi) * sigma_x * sigma_x) * (1.0 - alpha1) * (1.0 + (md - 2.0) * alpha1) /
         (md * den);
}

inline double design_effect_hte(double sigma2_hte_norm, double sigma2_ate_norm) {
  if (!(sigma2_hte_norm > 0.0) || !(sigma2_ate_norm > 0.0))
    throw ValidationError("design effect needs positive variances");
  return sigma2_hte_norm / sigma2_ate_norm;
}

// ---------------------------------------------------------------------------
// Label bindings
// ---------------------------------------------------------------------------

struct Labels {
  std::array<double, 3> lambda{};
  std::array<double, 3> zeta{};
  std::array<double, 4> tau{};
  std::array<double, 2> eta{};
};

// Printed label i reads canonical eigenvalue perm[i].
struct LabelMap {
  std::array<int, 3> lambda{0, 1, 2};
  std::array<int, 3> zeta{0, 1, 2};
  std::array<int, 4> tau{0, 1, 2, 3};
  std::array<int, 2> eta{0, 1};

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline Labels bind(const Labels& canonical, const LabelMap& map) {
  Labels out;
  for (int i = 0; i < 3; ++i) out.lambda[i] = canonical.lambda[map.lambda[i]];
  for (int i = 0; i < 3; ++i) out.zeta[i] = canonical.zeta[map.zeta[i]];
  for (int i = 0; i < 4; ++i) out.tau[i] = canonical.tau[map.tau[i]];
  for (int i = 0; i < 2; ++i) out.eta[i] = canonical.eta[map.eta[i]];
  return out;
}

inline std::array<double, 2> eta_values(double rho0, long m) {
  return {1.0 - rho0, 1.0 + (static_cast<double>(m) - 1.0) * rho0};
}

// ---------------------------------------------------------------------------
// Templates. Each evaluates a normalized variance given bound labels.
// ---------------------------------------------------------------------------

struct Point {
  long m = 2;
  long J = 1;  // periods, or subclusters per cluster for three-level rows
  long k = 0;  // treated periods / subclusters where relevant
  double a0 = 0, a1 = 0, a2 = 0;
  double r0 = 0, r1 = 0, r2 = 0;
  double pi = 0.5;
  double sigma = 1.0;
  double sigma_x = 1.0;
  // IRGT arms
  long m1 = 1, m0 = 1;
  double a11 = 0, a10 = 0, s1 = 1, s0 = 1;
};

namespace tmpl {

inline double scale(const Point& p) {
  return p.sigma * p.sigma / (p.pi * (1.0 - p.pi) * p.sigma_x * p.sigma_x);
}

inline double three_level_cluster(const Point& p, const Labels& L) {
  const double ns = static_cast<double>(p.J), md = static_cast<double>(p.m);
  return scale(p) * ns * md /
         (L.zeta[2] / L.lambda[2] + (ns - 1.0) * L.zeta[1] / L.lambda[1] + ns * (md - 1.0) * L.zeta[0] / L.lambda[0]);
}

inline double three_level_subcluster_printed(const Point& p, const Labels& L) {
  const double md = static_cast<double>(p.m);
  return scale(p) * md / (md / L.lambda[0] - (1.0 + (md - 1.0) * p.r1) * (1.0 / L.lambda[0] - 1.0 / L.lambda[1]));
}

inline double three_level_subcluster_exact(const Point& p, const Labels& L) {
  const double ns = static_cast<double>(p.J), md = static_cast<double>(p.m);
  const double t1 = (md - 1.0) * L.zeta[0] / L.lambda[0] + ((ns - 2.0) * L.zeta[1] + L.zeta[2]) / (ns * L.lambda[1]) +
                    L.zeta[1] / (ns * L.lambda[2]);
  return scale(p) / (ns * t1);
}

inline double crxo_cs_printed(const Point& p, const Labels& L) {
  const double jd = static_cast<double>(p.J);
  return scale(p) / (2.0 * (jd - 1.0) * L.zeta[0] / L.lambda[0] + L.zeta[2] / L.lambda[1] + L.zeta[1] / L.lambda[2]);
}

// Printed form with the leading (J - 1) read as (m - 1); two-period grid.
inline double crxo_cs_printed_m(const Point& p, const Labels& L) {
  const double md = static_cast<double>(p.m);
  return scale(p) / (2.0 * (md - 1.0) * L.zeta[0] / L.lambda[0] + L.zeta[2] / L.lambda[1] + L.zeta[1] / L.lambda[2]);
}

// General two-sequence form; d = 2k - J where the first sequence is treated in
// k periods and the second in the other J - k.
inline double crxo_cs_general(const Point& p, const Labels& L) {
  const double jd = static_cast<double>(p.J), md = static_cast<double>(p.m);
  const double d = 2.0 * static_cast<double>(p.k) - jd;
  const double t1 = (md - 1.0) * L.zeta[0] / L.lambda[0] + ((jd - 2.0) * L.zeta[1] + L.zeta[2]) / (jd * L.lambda[1]) +
                    L.zeta[1] / (jd * L.lambda[2]);
  const double t2 = (1.0 / L.lambda[2] - 1.0 / L.lambda[1]) * (L.zeta[2] - L.zeta[1]) / (jd * jd);
  return scale(p) / (jd * t1 + d * d * t2);
}

inline double crxo_cohort_printed(const Point& p, const Labels& L) {
  const double jd = static_cast<double>(p.J);
  return scale(p) / (2.0 * ((jd - 1.0) * L.eta[0] / L.tau[0] + L.eta[1] / L.tau[2]));
}

inline double crxo_cohort_printed_m(const Point& p, const Labels& L) {
  const double md = static_cast<double>(p.m);
  return scale(p) / (2.0 * ((md - 1.0) * L.eta[0] / L.tau[0] + L.eta[1] / L.tau[2]));
}

inline double crxo_cohort_general(const Point& p, const Labels& L) {
  const double jd = static_cast<double>(p.J), md = static_cast<double>(p.m);
  const double d = 2.0 * static_cast<double>(p.k) - jd;
  const double t1 = (md - 1.0) * L.eta[0] / L.tau[0] + L.eta[1] / L.tau[1];
  const double t2 =
      ((md - 1.0) * L.eta[0] * (1.0 / L.tau[2] - 1.0 / L.tau[0]) + L.eta[1] * (1.0 / L.tau[3] - 1.0 / L.tau[1])) / jd;
  return scale(p) / (jd * t1 + d * d * t2);
}

inline double irgt_individual(const Point& p, const Labels&) {
  auto arm = [](double s, double a, long m, double w) {
    const double md = static_cast<double>(m);
    return s * s * (1.0 - a) * (1.0 + (md - 1.0) * a) / (w * md * (1.0 + (md - 2.0) * a));
  };
  return (arm(p.s1, p.a11, p.m1, p.pi) + arm(p.s0, p.a10, p.m0, 1.0 - p.pi)) / (p.sigma_x * p.sigma_x);
}

inline double irgt_cluster(const Point& p, const Labels&) {
  auto arm = [](double s, double a, long m, double w) {
    const double md = static_cast<double>(m);
    return s * s * (1.0 + (md - 1.0) * a) / (w * md);
  };
  return (arm(p.s1, p.a11, p.m1, p.pi) + arm(p.s0, p.a10, p.m0, 1.0 - p.pi)) / (p.sigma_x * p.sigma_x);
}

inline double two_level_inline(const Point& p, const Labels&) {
  return hte_var_two_level(p.m, p.a1, p.r1, p.pi, p.sigma, p.sigma_x);
}
inline double two_level_tabulated(const Point& p, const Labels&) {
  return hte_var_two_level_tabulated(p.m, p.a1, p.r1, p.pi, p.sigma, p.sigma_x);
}
// ATE carries sigma_x^2 in its denominator; the engine's ATE does not.
inline double two_level_ate(const Point& p, const Labels&) {
  return ate_var_two_level(p.m, p.a1, p.pi, p.sigma, p.sigma_x) * p.sigma_x * p.sigma_x;
}

}  // namespace tmpl

inline Labels canonical_labels(const Point& p) {
  Labels L;
  const auto lam = eigenvalues_nested(p.a1, p.a2, p.m, p.J);
  const auto zet = eigenvalues_nested(p.r1, p.r2, p.m, p.J);
  const auto tau = eigenvalues_block(p.a0, p.a1, p.a2, p.m, p.J);
  std::copy(lam.begin(), lam.end(), L.lambda.begin());
  std::copy(zet.begin(), zet.end(), L.zeta.begin());
  std::copy(tau.begin(), tau.end(), L.tau.begin());
  L.eta = eta_values(p.r0, p.m);
  return L;
}

// ---------------------------------------------------------------------------
// Frozen mappings (output of registration)
// ---------------------------------------------------------------------------

inline const LabelMap kIdentityMap{};
// The cohort reference labels its second term tau3; it reads canonical tau2.
inline const LabelMap kCrxoCohortPrintedMap{{0, 1, 2}, {0, 1, 2}, {0, 2, 1, 3}, {0, 1}};

// ---------------------------------------------------------------------------
// Public closed forms (frozen mappings)
// ---------------------------------------------------------------------------

inline double hte_var_three_level(long m, long n_sub, double alpha1, double alpha2, double rho1, double rho2, double pi,
                                  double sigma_yx, double sigma_x, RandomizationLevel level) {
  detail::check_common(m, pi, sigma_yx, sigma_x);
  if (n_sub < 1) throw ValidationError("subclusters per cluster must be >= 1", "n_sub");
  Point p;
  p.m = m;
  p.J = n_sub;
  p.a1 = alpha1;
  p.a2 = alpha2;
  p.r1 = rho1;
  p.r2 = rho2;
  p.pi = pi;
  p.sigma = sigma_yx;
  p.sigma_x = sigma_x;
  const Labels L = bind(canonical_labels(p), kIdentityMap);
  if (level == RandomizationLevel::subcluster) {
    if (n_sub < 2) throw ValidationError("subcluster randomization needs >= 2 subclusters", "n_sub");
    return tmpl::three_level_subcluster_exact(p, L);
  }
  // The reference expression is per individual; divide by n_s m for n Var.
  return tmpl::three_level_cluster(p, L) / static_cast<double>(n_sub * m);
}

// treated_periods: periods in which the treatment-first sequence is treated
// (default: alternating pattern, ceil(J / 2)).
inline double hte_var_crxo_cross_sectional(long m, long J, double alpha1, double alpha2, double rho1, double rho2,
                                           double pi, double sigma_yx, double sigma_x, long treated_periods = -1) {
  detail::check_common(m, pi, sigma_yx, sigma_x);
  if (J < 2) throw ValidationError("CRXO needs >= 2 periods", "J");
  Point p;
  p.m = m;
  p.J = J;
  p.k = treated_periods < 0 ? (J + 1) / 2 : treated_periods;
  p.a1 = alpha1;
  p.a2 = alpha2;
  p.r1 = rho1;
  p.r2 = rho2;
  p.pi = pi;
  p.sigma = sigma_yx;
  p.sigma_x = sigma_x;
  return tmpl::crxo_cs_general(p, canonical_labels(p));
}

inline double hte_var_crxo_cohort(long m, long J, double alpha0, double alpha1, double alpha2, double rho0, double pi,
                                  double sigma_yx, double sigma_x, long treated_periods = -1) {
  detail::check_common(m, pi, sigma_yx, sigma_x);
  if (J < 2) throw ValidationError("CRXO needs >= 2 periods", "J");
  Point p;
  p.m = m;
  p.J = J;
  p.k = treated_periods < 0 ? (J + 1) / 2 : treated_periods;
  p.a0 = alpha0;
  p.a1 = alpha1;
  p.a2 = alpha2;
  p.r0 = rho0;
  p.pi = pi;
  p.sigma = sigma_yx;
  p.sigma_x = sigma_x;
  return tmpl::crxo_cohort_general(p, canonical_labels(p));
}

// Normalized per total randomized groups.
inline double irgt_variance(const ArmParams& arms, double pi, double sigma_x, CovariateLevel level) {
  detail::check_common(std::min(arms.m_treatment, arms.m_control), pi, std::min(arms.sd_treatment, arms.sd_control),
                       sigma_x);
  Point p;
  p.m1 = arms.m_treatment;
  p.m0 = arms.m_control;
  p.a11 = arms.icc_treatment;
  p.a10 = arms.icc_control;
  p.s1 = arms.sd_treatment;
  p.s0 = arms.sd_control;
  p.pi = pi;
  p.sigma_x = sigma_x;
  return level == CovariateLevel::cluster ? tmpl::irgt_cluster(p, {}) : tmpl::irgt_individual(p, {});
}

// ---------------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------------

enum class LabelFamily { none, lambda_zeta, tau_eta };

struct FormulaRow {
  std::string id;
  std::string title;
  std::function<double(const Point&, const Labels&)> formula;
  LabelFamily labels = LabelFamily::none;
  std::function<Point(std::mt19937_64&)> sample;
  std::function<double(const Point&)> engine;
  std::string grid_note;
  bool expect_registered = true;
};

struct Registration {
  std::string id;
  std::string title;
  bool registered = false;
  LabelMap mapping;
  int matching_mappings = 0;
  int candidates = 0;
  double max_rel_error = 0.0;  // for the chosen (or best) mapping
  int points = 0;
  std::string grid_note;
};

inline constexpr double kConformanceTolerance = 1e-8;
inline constexpr int kConformancePoints = 200;

inline std::vector<LabelMap> candidate_maps(LabelFamily f) {
  std::vector<LabelMap> out;
  if (f == LabelFamily::none) return {LabelMap{}};
  if (f == LabelFamily::lambda_zeta) {
    std::array<int, 3> a{0, 1, 2};
    do {
      std::array<int, 3> b{0, 1, 2};
      do {
        LabelMap m;
        m.lambda = a;
        m.zeta = b;
        out.push_back(m);
      } while (std::next_permutation(b.begin(), b.end()));
    } while (std::next_permutation(a.begin(), a.end()));
    return out;
  }
  std::array<int, 4> t{0, 1, 2, 3};
  do {
    std::array<int, 2> e{0, 1};
    do {
      LabelMap m;
      m.tau = t;
      m.eta = e;
      out.push_back(m);
    } while (std::next_permutation(e.begin(), e.end()));
  } while (std::next_permutation(t.begin(), t.end()));
  return out;
}

namespace detail {

inline double uni(std::mt19937_64& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}
inline long uni_int(std::mt19937_64& g, long lo, long hi) {
  return std::uniform_int_distribution<long>(lo, hi)(g);
}

inline Point sample_common(std::mt19937_64& g) {
  Point p;
  p.m = uni_int(g, 2, 40);
  p.a1 = uni(g, 0.0, 0.3);
  p.a2 = uni(g, 0.0, 1.0) * p.a1;
  p.a0 = uni(g, p.a2, std::min(0.9, p.a2 + 0.6));
  p.r1 = uni(g, 0.0, 0.8);
  p.r2 = uni(g, 0.0, 1.0) * p.r1;
  p.r0 = uni(g, 0.0, 0.8);
  p.pi = uni(g, 0.2, 0.8);
  p.sigma = uni(g, 0.5, 2.0);
  p.sigma_x = uni(g, 0.3, 1.5);
  return p;
}

inline Scenario base_scenario(const Point& p, DesignFamily f) {
  Scenario sc;
  sc.design.family = f;
  sc.design.pi = p.pi;
  sc.outcome.sigma_yx = p.sigma;
  sc.covariate = CovariateModel::continuous(0.0, p.sigma_x, CovariateCorrelation::nested(p.r1, p.r2));
  sc.outcome.correlation = OutcomeCorrelation::nested(p.a1, p.a2);
  return sc;
}

inline double engine_two_level(const Point& p) {
  auto sc = base_scenario(p, DesignFamily::parallel_two_level);
  sc.outcome.correlation = OutcomeCorrelation::exchangeable(p.a1);
  sc.covariate.correlation = CovariateCorrelation::exchangeable(p.r1);
  return evaluate_normalized(sc, p.m).sigma2_hte_norm;
}

inline double engine_two_level_ate(const Point& p) {
  auto sc = base_scenario(p, DesignFamily::parallel_two_level);
  sc.outcome.correlation = OutcomeCorrelation::exchangeable(p.a1);
  sc.covariate.correlation = CovariateCorrelation::exchangeable(p.r1);
  return evaluate_normalized(sc, p.m).sigma2_ate_norm;
}

inline double engine_three_level(const Point& p, RandomizationLevel level) {
  auto sc = base_scenario(p, DesignFamily::parallel_three_level);
  sc.design.n_sub = static_cast<int>(p.J);
  sc.design.randomization_level = level;
  if (level == RandomizationLevel::subcluster) return evaluate(sc, p.m, 1).sigma2_hte_norm;
  return evaluate_normalized(sc, p.m).sigma2_hte_norm;
}

inline Scenario crxo_scenario(const Point& p) {
  Scenario sc = base_scenario(p, DesignFamily::custom);
  TreatmentMatrix tm;
  std::vector<std::uint8_t> a(p.J, 0), b(p.J, 0);
  for (long j = 0; j < p.J; ++j) (j < p.k ? a : b)[j] = 1;
  tm.rows = {a, b};
  tm.clusters_per_sequence = {1, 1};
  sc.custom = tm;
  return sc;
}

inline double engine_crxo(const Scenario& sc0, const Point& p) {
  auto setup = build_setup(sc0, p.m, 1.0, true);
  setup.strata[0].weight = p.pi;
  setup.strata[1].weight = 1.0 - p.pi;
  return variance_report(setup.strata, setup.periods, setup.options).sigma2_hte_norm;
}

inline double engine_crxo_cs(const Point& p) { return engine_crxo(crxo_scenario(p), p); }

inline double engine_crxo_cohort(const Point& p) {
  auto sc = crxo_scenario(p);
  sc.outcome.correlation = OutcomeCorrelation::block(p.a0, p.a1, p.a2);
  sc.covariate.correlation = CovariateCorrelation::cohort_time_invariant(p.r0);
  return engine_crxo(sc, p);
}

inline double engine_irgt(const Point& p, CovariateLevel level) {
  Scenario sc;
  sc.design.family = DesignFamily::irgt;
  sc.design.pi = p.pi;
  sc.design.arm_params = ArmParams{p.m1, p.m0, p.a11, p.a10, p.s1, p.s0};
  sc.covariate = CovariateModel::continuous(
      0.0, p.sigma_x,
      level == CovariateLevel::cluster ? CovariateCorrelation::cluster_level_constant() : CovariateCorrelation::independent());
  return evaluate_normalized(sc, 0).sigma2_hte_norm;
}

inline Point sample_irgt(std::mt19937_64& g) {
  Point p = sample_common(g);
  p.m1 = uni_int(g, 2, 30);
  p.m0 = uni(g, 0, 1) < 0.5 ? 1 : uni_int(g, 2, 30);
  p.a11 = uni(g, 0.0, 0.3);
  p.a10 = p.m0 == 1 ? 0.0 : uni(g, 0.0, 0.3);
  p.s1 = uni(g, 0.5, 2.0);
  p.s0 = uni(g, 0.5, 2.0);
  return p;
}

}  // namespace detail

inline std::vector<FormulaRow> formula_rows() {
  using namespace detail;
  std::vector<FormulaRow> rows;
  auto two_level_sample = [](std::mt19937_64& g) {
    Point p = sample_common(g);
    p.m = uni_int(g, 1, 60);
    p.J = 1;
    return p;
  };
  rows.push_back({"two-level-ate", "Parallel two-level, ATE", tmpl::two_level_ate, LabelFamily::none,
                  two_level_sample, engine_two_level_ate, "m in [1, 60]", true});
  rows.push_back({"two-level-inline", "Parallel two-level, HTE (inline design-effect form)", tmpl::two_level_inline,
                  LabelFamily::none, two_level_sample, engine_two_level, "m in [1, 60]", true});
  rows.push_back({"two-level-tabulated", "Parallel two-level, HTE (tabulated form, {1+(m-2)a1} numerator)",
                  tmpl::two_level_tabulated, LabelFamily::none, two_level_sample, engine_two_level, "m in [1, 60]",
                  false});

  auto three_level_sample = [](std::mt19937_64& g) {
    Point p = sample_common(g);
    p.J = uni_int(g, 2, 8);
    return p;
  };
  auto subcluster_sample = [](std::mt19937_64& g) {
    Point p = sample_common(g);
    p.J = uni_int(g, 2, 8);
    p.k = uni_int(g, 1, p.J - 1);
    p.pi = static_cast<double>(p.k) / static_cast<double>(p.J);
    return p;
  };
  rows.push_back({"three-level-cluster", "Three-level, cluster randomization (divided by n_s m)",
                  [](const Point& p, const Labels& L) {
                    return tmpl::three_level_cluster(p, L) / static_cast<double>(p.J * p.m);
                  },
                  LabelFamily::lambda_zeta, three_level_sample,
                  [](const Point& p) { return engine_three_level(p, RandomizationLevel::cluster); }, "n_s in [2, 8]",
                  true});
  rows.push_back({"three-level-subcluster", "Three-level, subcluster randomization (exact)",
                  tmpl::three_level_subcluster_exact, LabelFamily::lambda_zeta, subcluster_sample,
                  [](const Point& p) { return engine_three_level(p, RandomizationLevel::subcluster); },
                  "n_s in [2, 8], pi = k / n_s", true});
  rows.push_back({"three-level-subcluster-reference",
                  "Three-level, subcluster randomization (reference form, divided by n_s)",
                  [](const Point& p, const Labels& L) {
                    return tmpl::three_level_subcluster_printed(p, L) / static_cast<double>(p.J);
                  },
                  LabelFamily::lambda_zeta, subcluster_sample,
                  [](const Point& p) { return engine_three_level(p, RandomizationLevel::subcluster); },
                  "n_s in [2, 8], pi = k / n_s", false});

  auto crxo_sample = [](std::mt19937_64& g) {
    Point p = sample_common(g);
    p.J = uni_int(g, 2, 8);
    p.k = uni_int(g, 1, p.J - 1);
    return p;
  };
  auto crxo2_sample = [](std::mt19937_64& g) {
    Point p = sample_common(g);
    p.J = 2;
    p.k = 1;
    return p;
  };
  rows.push_back({"crxo-cs", "CRXO cross-sectional, two sequences (general)", tmpl::crxo_cs_general,
                  LabelFamily::lambda_zeta, crxo_sample, engine_crxo_cs, "J in [2, 8], any treated count k", true});
  rows.push_back({"crxo-cs-reference", "CRXO cross-sectional (reference form, literal)", tmpl::crxo_cs_printed,
                  LabelFamily::lambda_zeta, crxo_sample, engine_crxo_cs, "J in [2, 8]", false});
  rows.push_back({"crxo-cs-reference-m", "CRXO cross-sectional (reference form, J-1 read as m-1)",
                  tmpl::crxo_cs_printed_m, LabelFamily::lambda_zeta, crxo2_sample, engine_crxo_cs, "J = 2", true});
  rows.push_back({"crxo-cohort", "CRXO closed cohort, time-invariant covariate (general)", tmpl::crxo_cohort_general,
                  LabelFamily::tau_eta, crxo_sample, engine_crxo_cohort, "J in [2, 8], any treated count k", true});
  rows.push_back({"crxo-cohort-reference", "CRXO closed cohort (reference form, literal)", tmpl::crxo_cohort_printed,
                  LabelFamily::tau_eta, crxo_sample, engine_crxo_cohort, "J in [2, 8]", false});
  rows.push_back({"crxo-cohort-reference-m", "CRXO closed cohort (reference form, J-1 read as m-1)",
                  tmpl::crxo_cohort_printed_m, LabelFamily::tau_eta, crxo2_sample, engine_crxo_cohort, "J = 2", true});

  rows.push_back({"irgt-individual", "IRGT, individual-level covariate", tmpl::irgt_individual, LabelFamily::none,
                  sample_irgt, [](const Point& p) { return engine_irgt(p, CovariateLevel::individual); },
                  "m1 in [2, 30], m0 = 1 or [2, 30]", true});
  rows.push_back({"irgt-cluster", "IRGT, cluster-level covariate", tmpl::irgt_cluster, LabelFamily::none, sample_irgt,
                  [](const Point& p) { return engine_irgt(p, CovariateLevel::cluster); },
                  "m1 in [2, 30], m0 = 1 or [2, 30]", true});
  return rows;
}

inline Registration register_row(const FormulaRow& row, std::uint64_t seed = 20240611) {
  std::mt19937_64 g(seed);
  std::vector<Point> pts;
  std::vector<double> ref;
  pts.reserve(kConformancePoints);
  for (int attempt = 0; static_cast<int>(pts.size()) < kConformancePoints; ++attempt) {
    if (attempt > 50 * kConformancePoints)
      throw Error("conformance grid for '" + row.id + "' produced too few valid points");
    Point p = row.sample(g);
    try {
      const double e = row.engine(p);
      if (!std::isfinite(e) || e <= 0.0) continue;
      pts.push_back(p);
      ref.push_back(e);
    } catch (const Error&) {
      continue;  // invalid draw (non-PSD); resample
    }
  }
  Registration r;
  r.id = row.id;
  r.title = row.title;
  r.points = kConformancePoints;
  r.grid_note = row.grid_note;
  double best = INFINITY;
  const auto maps = candidate_maps(row.labels);
  r.candidates = static_cast<int>(maps.size());
  for (const auto& map : maps) {
    double worst = 0.0;
    for (std::size_t i = 0; i < pts.size() && worst <= best; ++i) {
      const double v = row.formula(pts[i], bind(canonical_labels(pts[i]), map));
      const double rel = std::isfinite(v) ? std::abs(v - ref[i]) / std::abs(ref[i]) : INFINITY;
      worst = std::max(worst, rel);
    }
    if (worst <= kConformanceTolerance) {
      if (r.matching_mappings == 0) r.mapping = map;
      ++r.matching_mappings;
    }
    if (worst < best) {
      best = worst;
      if (r.matching_mappings == 0) r.mapping = map;
    }
  }
  r.max_rel_error = best;
  r.registered = r.matching_mappings > 0;
  return r;
}

inline std::vector<Registration> register_all() {
  std::vector<Registration> out;
  for (const auto& row : formula_rows()) out.push_back(register_row(row));
  return out;
}

inline std::string describe(const LabelMap& m, LabelFamily f) {
  std::ostringstream os;
  if (f == LabelFamily::none) return "-";
  if (f == LabelFamily::lambda_zeta) {
    for (int i = 0; i < 3; ++i) os << (i ? ", " : "") << "lambda" << i + 1 << "->lambda" << m.lambda[i] + 1;
    for (int i = 0; i < 3; ++i) os << ", zeta" << i + 1 << "->zeta" << m.zeta[i] + 1;
  } else {
    for (int i = 0; i < 4; ++i) os << (i ? ", " : "") << "tau" << i + 1 << "->tau" << m.tau[i] + 1;
    for (int i = 0; i < 2; ++i) os << ", eta" << i + 1 << "->eta" << m.eta[i] + 1;
  }
  return os.str();
}

// Markdown conformance table; docs/conformance.md is this text.
inline std::string conformance_markdown() {
  const auto rows = formula_rows();
  std::ostringstream os;
  os << "# Closed-form conformance\n\n"
     << "Generated by `crthte conformance`. Each closed form is evaluated against the expected-information engine\n"
     << "on " << kConformancePoints << " pseudo-random valid parameter points (seed 20240611). A form is registered\n"
     << "when some assignment of canonical eigenvalues to its labels agrees with the engine to "
     << kConformanceTolerance << " relative\n"
     << "at every point. All values are per-cluster normalized variances (n Var).\n\n"
     << "Canonical eigenvalues:\n\n"
     << "- lambda1 = 1-a1, lambda2 = 1+(m-1)a1-m a2, lambda3 = 1+(m-1)a1+(J-1)m a2 (outcome, nested)\n"
     << "- zeta1..zeta3: the same with (rho1, rho2) (covariate, nested)\n"
     << "- tau1 = 1-a1-a0+a2, tau2 = 1+(m-1)a1-a0-(m-1)a2, tau3 = 1-a1+(J-1)(a0-a2),\n"
     << "  tau4 = 1+(m-1)a1+(J-1)a0+(J-1)(m-1)a2 (outcome, block)\n"
     << "- eta1 = 1-rho0, eta2 = 1+(m-1)rho0 (covariate, time-invariant cohort)\n\n"
     << "| id | form | grid | candidates | matching | mapping | max rel. error | status |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    const auto r = register_row(row);
    std::ostringstream err;
    err << std::scientific << std::setprecision(2) << r.max_rel_error;
    os << "| " << r.id << " | " << r.title << " | " << r.grid_note << " | " << r.candidates << " | "
       << r.matching_mappings << " | " << (r.registered ? describe(r.mapping, row.labels) : "none") << " | "
       << err.str() << " | " << (r.registered ? "registered" : "rejected") << " |\n";
  }
  os << "\n## Notes\n\n"
     << "- Two-level HTE: the inline form sigma2_ATE (1-a1)/{1+(m-2)a1-(m-1)rho1 a1} matches the engine; the tabulated\n"
     << "  form with {1+(m-2)a1} in the numerator does not and is rejected. The inline form is the one served.\n"
     << "- Three-level, cluster randomization: the reference expression is per individual (N Var); dividing by n_s m\n"
     << "  gives n Var exactly.\n"
     << "- Three-level, subcluster randomization: the reference expression is the n_s -> infinity limit with no\n"
     << "  between-subcluster covariate correlation; it is exact only when a2 = rho2 = 0. The registered exact form is\n"
     << "  sigma2/(sigma_x^2 pi(1-pi) n_s t1), t1 = (m-1)zeta1/lambda1 + ((n_s-2)zeta2 + zeta3)/(n_s lambda2)\n"
     << "  + zeta2/(n_s lambda3), with pi = k/n_s treated subclusters per cluster.\n"
     << "- CRXO cross-sectional: with period-specific covariate slopes and k treated periods in the first sequence,\n"
     << "  n Var = sigma2/(sigma_x^2 pi(1-pi)) / (J t1 + d^2 t2), d = 2k-J,\n"
     << "  t1 = (m-1)zeta1/lambda1 + ((J-2)zeta2 + zeta3)/(J lambda2) + zeta2/(J lambda3),\n"
     << "  t2 = (1/lambda3 - 1/lambda2)(zeta3 - zeta2)/J^2. The reference form matches at J = 2 once its leading\n"
     << "  (J-1) is read as (m-1); its crossed pairing zeta3/lambda2 + zeta2/lambda3 is then correct as printed.\n"
     << "- CRXO cohort: with eta as above, t1 = (m-1)eta1/tau1 + eta2/tau2 and\n"
     << "  t2 = ((m-1)eta1(1/tau3 - 1/tau1) + eta2(1/tau4 - 1/tau2))/J. At J = 2 the reference form matches with\n"
     << "  (J-1) read as (m-1) and its tau3 label bound to canonical tau2.\n"
     << "- Stepped-wedge variances are served by the engine only.\n";
  return os.str();
}

}  // namespace crthte
