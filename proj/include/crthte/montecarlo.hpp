#pragma once

// Monte Carlo check of the analytic variances: simulate trials from the
// random-effects model, fit GLS with the true covariance, count Wald
// rejections for the interaction.

#include <Eigen/Dense>
#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/beta_distribution.hpp>
#include <boost/random/normal_distribution.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "crthte/engine.hpp"
#include "crthte/errors.hpp"
#include "crthte/scenario.hpp"
#include "crthte/solver.hpp"

namespace crthte {

struct VarianceComponents {
  double sigma_gamma2 = 0.0;  // cluster
  double sigma_eta2 = 0.0;    // cluster-period
  double sigma_s2 = 0.0;      // cluster-individual
  double sigma_eps2 = 0.0;    // residual
};

inline VarianceComponents icc_to_components(const BlockParams& p, double total) {
  VarianceComponents v;
  v.sigma_gamma2 = p.c2 * total;
  v.sigma_eta2 = (p.c1 - p.c2) * total;
  v.sigma_s2 = (p.c0 - p.c2) * total;
  v.sigma_eps2 = total - v.sigma_gamma2 - v.sigma_eta2 - v.sigma_s2;
  const double tol = 1e-12 * std::max(1.0, std::abs(total));
  for (double c : {v.sigma_gamma2, v.sigma_eta2, v.sigma_s2, v.sigma_eps2})
    if (c < -tol) throw ValidationError("ICCs outside the random-effects-representable cone");
  v.sigma_gamma2 = std::max(0.0, v.sigma_gamma2);
  v.sigma_eta2 = std::max(0.0, v.sigma_eta2);
  v.sigma_s2 = std::max(0.0, v.sigma_s2);
  v.sigma_eps2 = std::max(0.0, v.sigma_eps2);
  return v;
}

inline VarianceComponents icc_to_components(const OutcomeModel& outcome) {
  return icc_to_components(outcome.correlation.params(), outcome.sigma_yx * outcome.sigma_yx);
}

struct Observation {
  long cluster;
  int period;
  long individual;
  int w;
  double x;
  double y;
};

struct SimulatedTrial {
  std::vector<Observation> records;
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;
  std::vector<double> beta;  // beta0_1..J (or beta0), beta1, beta2 (or beta2_1..J), beta3
  std::vector<std::string> names;
};

struct SimulationConfig {
  Scenario scenario;
  long n = 0;
  long m = 0;
  double delta = 0.0;  // true beta3
};

namespace detail {

using Rng = std::mt19937_64;

inline Rng replicate_rng(std::uint64_t master, std::uint64_t rep) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(rep), static_cast<std::uint32_t>(rep >> 32)};
  return Rng(seq);
}

inline double draw_normal(Rng& g, double var) {
  if (var <= 0.0) return 0.0;
  return boost::random::normal_distribution<double>(0.0, std::sqrt(var))(g);
}

// Block-exchangeable random-effects draw over J x m (period-major).
inline void draw_block(Rng& g, const VarianceComponents& v, int J, long m, double mean, std::vector<double>& out) {
  out.assign(static_cast<std::size_t>(J * m), mean);
  const double gamma = draw_normal(g, v.sigma_gamma2);
  std::vector<double> s(m);
  for (long k = 0; k < m; ++k) s[k] = draw_normal(g, v.sigma_s2);
  for (int j = 0; j < J; ++j) {
    const double eta = draw_normal(g, v.sigma_eta2);
    for (long k = 0; k < m; ++k) out[j * m + k] += gamma + eta + s[k] + draw_normal(g, v.sigma_eps2);
  }
}

struct CovariateSampler {
  CovariateModel model;
  BlockParams params;
  VarianceComponents comps;

  CovariateSampler(const CovariateModel& cm, const BlockParams& p) : model(cm), params(p) {
    if (cm.dtype == CovariateType::continuous) {
      comps = icc_to_components(p, cm.variance());
      return;
    }
    const bool exchangeable = p.c0 == p.c1 && p.c1 == p.c2;
    const bool invariant = p.c0 == 1.0 && p.c1 == p.c2;
    if (!exchangeable && !invariant)
      throw ValidationError("unsupported binary-covariate structure for simulation (nested with rho1 != rho2)",
                            "covariate.structure");
    if (p.c1 < 0.0) throw ValidationError("binary covariate simulation needs a nonnegative ICC", "covariate.icc");
  }

  void draw(Rng& g, int J, long m, std::vector<double>& out) const {
    if (model.dtype == CovariateType::continuous) {
      draw_block(g, comps, J, m, model.mu_x, out);
      return;
    }
    out.assign(static_cast<std::size_t>(J * m), 0.0);
    const double p = model.prevalence;
    const double rho = params.c1;
    double prob = p;
    if (rho >= 1.0) {
      prob = boost::random::bernoulli_distribution<double>(p)(g) ? 1.0 : 0.0;
    } else if (rho > 0.0) {
      const double k = 1.0 / rho - 1.0;
      prob = boost::random::beta_distribution<double>(p * k, (1.0 - p) * k)(g);
    }
    boost::random::bernoulli_distribution<double> bern(prob);
    const bool invariant = params.c0 == 1.0;
    std::vector<double> person(m);
    if (invariant)
      for (long k = 0; k < m; ++k) person[k] = bern(g) ? 1.0 : 0.0;
    for (int j = 0; j < J; ++j)
      for (long k = 0; k < m; ++k) out[j * m + k] = invariant ? person[k] : (bern(g) ? 1.0 : 0.0);
  }
};

// v -> A v for A on the Kronecker basis, period-major layout.
inline void kron_apply(const KronForm& A, int J, long m, const double* v, double* out) {
  std::vector<double> per_period(J, 0.0), per_person(m, 0.0);
  double total = 0.0;
  for (int j = 0; j < J; ++j)
    for (long k = 0; k < m; ++k) {
      const double x = v[j * m + k];
      per_period[j] += x;
      per_person[k] += x;
      total += x;
    }
  for (int j = 0; j < J; ++j)
    for (long k = 0; k < m; ++k)
      out[j * m + k] = A.ii * v[j * m + k] + A.ji * per_person[k] + A.ij * per_period[j] + A.jj * total;
}

struct PreparedStratum {
  Stratum stratum;
  long clusters;
  ColumnLayout cols;
  VarianceComponents outcome;
  KronForm inverse;
  CovariateSampler covariate;
};

struct Prepared {
  std::vector<PreparedStratum> strata;
  int periods = 1;
  int p = 0;
  int wx = 0;
  std::vector<std::string> names;
};

inline Prepared prepare(const SimulationConfig& cfg) {
  const auto setup = build_setup(cfg.scenario, cfg.m, static_cast<double>(cfg.n));
  Prepared out;
  out.periods = setup.periods;
  for (const auto& st : setup.strata) {
    const long count = std::llround(st.weight);
    if (count <= 0) continue;
    check_dimension(st.m, setup.periods, cfg.scenario.dimension_cap);
    auto cols = cluster_design_columns(st.u, setup.periods, setup.options.effect, setup.options.period_intercepts);
    out.strata.push_back({st, count, cols, icc_to_components(st.outcome, st.sigma2),
                          inverse_form(st.outcome, st.m, setup.periods).scaled(1.0 / st.sigma2),
                          CovariateSampler(cfg.scenario.covariate, st.covariate)});
  }
  if (out.strata.empty()) throw ValidationError("design has no clusters");
  out.p = out.strata.front().cols.size();
  out.wx = out.strata.front().cols.wx_index;
  for (const auto& c : out.strata.front().cols.columns) out.names.push_back(c.name);
  return out;
}

// Visits every cluster of one replicate: (stratum, cluster id, X, Y).
inline void generate_replicate(const Prepared& prep, double delta, Rng& g,
                               const std::function<void(const PreparedStratum&, long, const std::vector<double>&,
                                                        const std::vector<double>&)>& visit) {
  long cluster = 0;
  std::vector<double> x, y;
  for (const auto& ps : prep.strata) {
    const int J = prep.periods;
    const long m = ps.stratum.m;
    for (long c = 0; c < ps.clusters; ++c, ++cluster) {
      ps.covariate.draw(g, J, m, x);
      draw_block(g, ps.outcome, J, m, 0.0, y);
      for (int j = 0; j < J; ++j)
        for (long k = 0; k < m; ++k) y[j * m + k] += delta * ps.stratum.u[j] * x[j * m + k];
      visit(ps, cluster, x, y);
    }
  }
}

inline double column_value(const Column& c, int j, double x) { return c.period[j] * (c.random ? x : 1.0); }

}  // namespace detail

inline SimulatedTrial simulate(const SimulationConfig& cfg, std::uint64_t seed, std::uint64_t replicate = 0) {
  const auto prep = detail::prepare(cfg);
  auto g = detail::replicate_rng(seed, replicate);
  SimulatedTrial t;
  t.seed = seed;
  t.replicate = replicate;
  t.names = prep.names;
  t.beta.assign(prep.p, 0.0);
  t.beta[prep.wx] = cfg.delta;
  detail::generate_replicate(prep, cfg.delta, g,
                             [&](const detail::PreparedStratum& ps, long cluster, const std::vector<double>& x,
                                 const std::vector<double>& y) {
                               const long m = ps.stratum.m;
                               for (int j = 0; j < prep.periods; ++j)
                                 for (long k = 0; k < m; ++k)
                                   t.records.push_back({cluster, j, k, ps.stratum.u[j], x[j * m + k], y[j * m + k]});
                             });
  return t;
}

struct ReplicateResult {
  std::uint64_t index = 0;
  double beta3 = 0.0;
  double z = 0.0;
  bool reject = false;
};

struct EmpiricalPower {
  double rate = 0.0;
  double mc_se = 0.0;
  long reps = 0;
  long rejections = 0;
  double analytic_power = 0.0;
  std::vector<ReplicateResult> replicates;
};

// GLS with known V per replicate; two-sided Wald z-test on beta3.
inline EmpiricalPower empirical_power(const SimulationConfig& cfg, double alpha_level, long reps, std::uint64_t seed,
                                      bool keep_replicates = false) {
  if (reps < 100) throw ValidationError("reps must be >= 100", "reps");
  if (!(alpha_level > 0.0 && alpha_level < 1.0)) throw ValidationError("alpha_level must lie in (0, 1)", "alpha_level");
  const auto prep = detail::prepare(cfg);
  const double zcrit = normal_quantile(1.0 - alpha_level / 2.0);
  const int p = prep.p;
  std::vector<ReplicateResult> res(reps);
  std::vector<std::string> failures(reps);

  parallel_for(static_cast<std::size_t>(reps), [&](std::size_t r) {
    auto g = detail::replicate_rng(seed, r);
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd score = Eigen::VectorXd::Zero(p);
    std::vector<double> col, acol;
    std::vector<std::vector<double>> design(p), adesign(p);
    std::vector<double> ay;
    detail::generate_replicate(prep, cfg.delta, g,
                               [&](const detail::PreparedStratum& ps, long, const std::vector<double>& x,
                                   const std::vector<double>& y) {
                                 const int J = prep.periods;
                                 const long m = ps.stratum.m;
                                 const std::size_t N = static_cast<std::size_t>(J * m);
                                 ay.resize(N);
                                 detail::kron_apply(ps.inverse, J, m, y.data(), ay.data());
                                 for (int a = 0; a < p; ++a) {
                                   design[a].resize(N);
                                   adesign[a].resize(N);
                                   const auto& c = ps.cols.columns[a];
                                   for (int j = 0; j < J; ++j)
                                     for (long k = 0; k < m; ++k)
                                       design[a][j * m + k] = detail::column_value(c, j, x[j * m + k]);
                                   detail::kron_apply(ps.inverse, J, m, design[a].data(), adesign[a].data());
                                 }
                                 for (int a = 0; a < p; ++a) {
                                   double sc = 0.0;
                                   for (std::size_t i = 0; i < N; ++i) sc += adesign[a][i] * y[i];
                                   score(a) += sc;
                                   for (int b = a; b < p; ++b) {
                                     double s = 0.0;
                                     for (std::size_t i = 0; i < N; ++i) s += design[a][i] * adesign[b][i];
                                     info(a, b) += s;
                                     if (b != a) info(b, a) += s;
                                   }
                                 }
                               });
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    const double dmin = ldlt.vectorD().cwiseAbs().minCoeff();
    const double dmax = ldlt.vectorD().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !(dmin > kEstimabilityTolerance * dmax)) {
      failures[r] = "interaction coefficient is not estimable in replicate " + std::to_string(r);
      return;
    }
    const Eigen::VectorXd beta = ldlt.solve(score);
    Eigen::VectorXd e = Eigen::VectorXd::Zero(p);
    e(prep.wx) = 1.0;
    const double var = ldlt.solve(e)(prep.wx);
    const double z = beta(prep.wx) / std::sqrt(var);
    res[r] = {r, beta(prep.wx), z, std::abs(z) > zcrit};
  });
  for (const auto& f : failures)
    if (!f.empty()) throw InestimableError(f, "beta3");

  EmpiricalPower out;
  out.reps = reps;
  for (const auto& r : res) out.rejections += r.reject ? 1 : 0;
  out.rate = static_cast<double>(out.rejections) / static_cast<double>(reps);
  out.mc_se = std::sqrt(out.rate * (1.0 - out.rate) / static_cast<double>(reps));
  const auto v = evaluate(cfg.scenario, cfg.m, cfg.n);
  out.analytic_power = power_from_variance(cfg.delta, v.var_hte_total, alpha_level);
  if (keep_replicates) out.replicates = std::move(res);
  return out;
}

inline void write_replicates_csv(std::ostream& os, const std::vector<ReplicateResult>& reps) {
  os << "replicate,beta3_hat,z,reject\n";
  os.precision(10);
  for (const auto& r : reps) os << r.index << ',' << r.beta3 << ',' << r.z << ',' << (r.reject ? 1 : 0) << '\n';
}

}  // namespace crthte
