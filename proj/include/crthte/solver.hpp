#pragma once

// Power, the four solve targets, and plot sweeps.

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "crthte/engine.hpp"
#include "crthte/errors.hpp"
#include "crthte/scenario.hpp"

namespace crthte {

inline constexpr long kDefaultClusterCap = 1000000;
inline constexpr long kMaxSweepPoints = 2000;

enum class DfMode { normal, t_n_minus_2 };
enum class Target { power, n, m, delta };

inline std::string_view target_name(Target t) {
  switch (t) {
    case Target::power: return "power";
    case Target::n: return "n";
    case Target::m: return "m";
    case Target::delta: return "delta";
  }
  return "?";
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}
inline double normal_cdf(double x) { return boost::math::cdf(boost::math::normal_distribution<double>(), x); }

// Two-sided Wald power. The t mode shifts the central-t critical value by the
// standardized effect (df = n - 2) rather than using the noncentral t.
inline double power_from_variance(double delta, double var_total, double alpha_level, DfMode df_mode = DfMode::normal,
                                  long n = 0) {
  if (!(var_total > 0.0)) throw ValidationError("variance must be positive");
  if (!(alpha_level > 0.0 && alpha_level < 1.0)) throw ValidationError("alpha_level must lie in (0, 1)", "alpha_level");
  const double ncp = std::abs(delta) / std::sqrt(var_total);
  if (df_mode == DfMode::normal) return normal_cdf(ncp - normal_quantile(1.0 - alpha_level / 2.0));
  const long df = n - 2;
  if (df <= 0) throw ValidationError("t correction needs more than 2 clusters (df = n - 2)", "df");
  const boost::math::students_t_distribution<double> t(static_cast<double>(df));
  return boost::math::cdf(t, ncp - boost::math::quantile(t, 1.0 - alpha_level / 2.0));
}

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

struct Band {
  std::string param;  // outcome_icc, outcome_cac, covariate_icc, covariate_cac
  double lo = 0.0;
  double hi = 0.0;
};

struct SolveRequest {
  Scenario scenario;
  Target target = Target::power;
  double delta = 0.0;
  double alpha_level = 0.05;
  double power = 0.9;
  std::optional<long> n;
  std::optional<long> m;
  DfMode df_mode = DfMode::normal;
  std::vector<Band> bands;
  long n_cap = kDefaultClusterCap;
};

struct SolveResult {
  Target target = Target::power;
  double solved_value = 0.0;
  double achieved_power = 0.0;
  long n = 0;
  long m = 0;
  double delta = 0.0;
  VarianceReport variance;
};

namespace detail {

inline void check_request(const SolveRequest& r) {
  if (!(r.alpha_level > 0.0 && r.alpha_level < 1.0))
    throw ValidationError("alpha_level must lie in (0, 1)", "alpha_level");
  if (r.target != Target::power && !(r.power > 0.0 && r.power < 1.0))
    throw ValidationError("power must lie in (0, 1)", "power");
  if ((r.target == Target::n || r.target == Target::m) && r.delta == 0.0)
    throw ValidationError("delta must be nonzero to solve for a sample size", "delta");
  if (!std::isfinite(r.delta)) throw ValidationError("delta must be finite", "delta");
  if (r.target != Target::n && !r.n) throw ValidationError("number of clusters is required", "design.clusters");
  if (r.target != Target::m && !r.m) {
    const auto f = r.scenario.design.family;
    if (f != DesignFamily::irgt && f != DesignFamily::parallel_two_level_by_arm)
      throw ValidationError("cluster-period size is required", "design.cluster_size");
  }
  if (r.n && *r.n < 1) throw ValidationError("number of clusters must be >= 1", "design.clusters");
  if (r.m && *r.m < 1) throw ValidationError("cluster-period size must be >= 1", "design.cluster_size");
}

inline long m_value(const SolveRequest& r) { return r.m ? *r.m : 0; }

}  // namespace detail

inline double power_at(const SolveRequest& r, long n, long m, VarianceReport* report = nullptr) {
  const auto v = evaluate(r.scenario, m, n);
  if (report) *report = v;
  return power_from_variance(r.delta, v.var_hte_total, r.alpha_level, r.df_mode, n);
}

inline SolveResult solve_power(const SolveRequest& r) {
  detail::check_request(r);
  SolveResult out;
  out.target = Target::power;
  out.n = *r.n;
  out.m = detail::m_value(r);
  out.delta = r.delta;
  out.achieved_power = power_at(r, out.n, out.m, &out.variance);
  out.solved_value = out.achieved_power;
  return out;
}

inline SolveResult solve_n(const SolveRequest& r) {
  detail::check_request(r);
  const Scenario& sc = r.scenario;
  const long m = detail::m_value(r);
  const long step = n_step(sc);
  long lo = minimum_n(sc);
  if (r.df_mode == DfMode::t_n_minus_2) lo = std::max(lo, 3L);
  lo = ((lo + step - 1) / step) * step;

  // Seed from the closed n-formula on the normalized variance.
  const double s2 = evaluate_normalized(sc, m).sigma2_hte_norm;
  const double z = normal_quantile(1.0 - r.alpha_level / 2.0) + normal_quantile(r.power);
  const double n_est = z * z * s2 / (r.delta * r.delta);
  if (!(n_est <= static_cast<double>(r.n_cap)))
    throw InfeasibleError("required number of clusters exceeds the cap of " + std::to_string(r.n_cap));
  long n = std::max(lo, static_cast<long>(std::ceil(n_est / static_cast<double>(step) - 1e-9)) * step);

  auto meets = [&](long k) {
    try {
      return power_at(r, k, m) >= r.power;
    } catch (const ValidationError&) {
      return false;  // infeasible allocation at this n
    }
  };
  while (!meets(n)) {
    n += step;
    if (n > r.n_cap)
      throw InfeasibleError("required number of clusters exceeds the cap of " + std::to_string(r.n_cap));
  }
  while (n - step >= lo && meets(n - step)) n -= step;

  SolveResult out;
  out.target = Target::n;
  out.n = n;
  out.m = m;
  out.delta = r.delta;
  out.achieved_power = power_at(r, n, m, &out.variance);
  out.solved_value = static_cast<double>(n);
  return out;
}

// Periods (or subclusters) multiplying m in the correlation dimension.
inline long dimension_factor(const Scenario& sc) {
  const DesignSpec spec = normalized(sc.design);
  if (spec.family == DesignFamily::parallel_three_level) return spec.n_sub;
  if (spec.family == DesignFamily::custom) return sc.custom ? sc.custom->periods() : 1;
  return spec.periods;
}

inline double asymptotic_power_in_m(const SolveRequest& r) {
  SolveRequest big = r;
  big.scenario.dimension_cap = std::numeric_limits<long>::max();
  return power_at(big, *r.n, 10000000);
}

inline SolveResult solve_m(const SolveRequest& r) {
  detail::check_request(r);
  const long n = *r.n;
  const long m_hi = std::max(1L, r.scenario.dimension_cap / dimension_factor(r.scenario));
  auto pw = [&](long m) { return power_at(r, n, m); };
  if (pw(m_hi) < r.power) {
    const double ap = asymptotic_power_in_m(r);
    throw InfeasibleError("target power is unreachable by increasing the cluster-period size (asymptotic power " +
                              std::to_string(ap) + ")",
                          ap);
  }
  long m = 1;
  if (pw(1) < r.power) {
    long lo = 1, hi = m_hi;  // pw(lo) < target <= pw(hi)
    while (hi - lo > 1) {
      const long mid = lo + (hi - lo) / 2;
      (pw(mid) >= r.power ? hi : lo) = mid;
    }
    m = hi;
    // Guard against non-monotone power: probe below the bisection result.
    bool monotone = true;
    for (long probe = m / 2; probe >= 1 && monotone; probe /= 2)
      if (pw(probe) >= r.power) monotone = false;
    if (!monotone) {
      for (long k = 1; k <= m; ++k)
        if (pw(k) >= r.power) {
          m = k;
          break;
        }
    }
  }
  SolveResult out;
  out.target = Target::m;
  out.n = n;
  out.m = m;
  out.delta = r.delta;
  out.achieved_power = power_at(r, n, m, &out.variance);
  out.solved_value = static_cast<double>(m);
  return out;
}

inline SolveResult solve_delta(const SolveRequest& r) {
  detail::check_request(r);
  SolveResult out;
  out.target = Target::delta;
  out.n = *r.n;
  out.m = detail::m_value(r);
  out.variance = evaluate(r.scenario, out.m, out.n);
  const double sd = std::sqrt(out.variance.var_hte_total);
  double mult;
  if (r.df_mode == DfMode::normal) {
    mult = normal_quantile(1.0 - r.alpha_level / 2.0) + normal_quantile(r.power);
  } else {
    if (out.n <= 2) throw ValidationError("t correction needs more than 2 clusters (df = n - 2)", "df");
    const boost::math::students_t_distribution<double> t(static_cast<double>(out.n - 2));
    mult = boost::math::quantile(t, 1.0 - r.alpha_level / 2.0) + boost::math::quantile(t, r.power);
  }
  const double mag = std::max(0.0, mult) * sd;
  out.delta = r.delta < 0.0 ? -mag : mag;
  out.solved_value = out.delta;
  out.achieved_power = power_from_variance(out.delta, out.variance.var_hte_total, r.alpha_level, r.df_mode, out.n);
  return out;
}

inline SolveResult solve(const SolveRequest& r) {
  switch (r.target) {
    case Target::power: return solve_power(r);
    case Target::n: return solve_n(r);
    case Target::m: return solve_m(r);
    case Target::delta: return solve_delta(r);
  }
  throw ValidationError("unknown target", "target");
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class Axis { m_vs_power, n_vs_power, m_vs_n, delta_vs_power };

inline std::string_view axis_name(Axis a) {
  switch (a) {
    case Axis::m_vs_power: return "m_vs_power";
    case Axis::n_vs_power: return "n_vs_power";
    case Axis::m_vs_n: return "m_vs_n";
    case Axis::delta_vs_power: return "delta_vs_power";
  }
  return "?";
}

inline Axis parse_axis(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  for (auto a : {Axis::m_vs_power, Axis::n_vs_power, Axis::m_vs_n, Axis::delta_vs_power})
    if (axis_name(a) == s) return a;
  throw ValidationError("unknown sweep axis '" + s + "'", "axis");
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double step = 1.0;
};

struct SeriesPoint {
  double x = 0.0;
  std::optional<double> y;  // empty when the point is infeasible
};

struct Series {
  std::string label;
  std::vector<SeriesPoint> points;

  friend bool operator==(const Series& a, const Series& b) {
    if (a.label != b.label || a.points.size() != b.points.size()) return false;
    for (std::size_t i = 0; i < a.points.size(); ++i)
      if (a.points[i].x != b.points[i].x || a.points[i].y != b.points[i].y) return false;
    return true;
  }
};

// Runs fn(i) for i in [0, count) on a few threads; callers write results by
// index so output order never depends on scheduling.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>({hw, count, 8});
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<double> range_values(const Range& r, bool integer) {
  if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || !std::isfinite(r.step))
    throw ValidationError("range values must be finite", "range");
  if (r.hi < r.lo) throw ValidationError("range upper bound is below the lower bound", "range");
  if (!(r.step > 0.0)) throw ValidationError("range step must be positive", "range");
  const double count = std::floor((r.hi - r.lo) / r.step + 1e-9) + 1.0;
  if (count > static_cast<double>(kMaxSweepPoints))
    throw ValidationError("sweep has more than " + std::to_string(kMaxSweepPoints) + " points", "range");
  std::vector<double> xs;
  for (long i = 0; i < static_cast<long>(count); ++i) {
    double x = r.lo + static_cast<double>(i) * r.step;
    if (integer) {
      x = std::round(x);
      if (x < 1.0) throw ValidationError("sweep over a count must start at >= 1", "range");
      if (!xs.empty() && xs.back() == x) continue;
    }
    xs.push_back(x);
  }
  return xs;
}

// Scenario with one ICC parameter replaced. CAC-mode between-period ICCs
// follow the within-period ICC.
inline Scenario with_parameter(Scenario sc, const std::string& param, double value) {
  auto& oc = sc.outcome.correlation;
  auto& cc = sc.covariate.correlation;
  if (param == "outcome_icc") {
    if (oc.kind == OutcomeKind::arm_specific_exchangeable)
      throw ValidationError("ICC bands are not available for arm-specific outcome correlation", "bands");
    if (oc.kind == OutcomeKind::exchangeable) {
      oc = OutcomeCorrelation::exchangeable(value);
    } else {
      const double cac = oc.cac();
      oc.alpha1 = value;
      if (oc.cac_mode) oc.alpha2 = cac * value;
      if (oc.kind == OutcomeKind::nested_exchangeable) oc.alpha0 = oc.alpha2;
    }
  } else if (param == "outcome_cac") {
    if (oc.kind == OutcomeKind::exchangeable || oc.kind == OutcomeKind::arm_specific_exchangeable)
      throw ValidationError("outcome CAC band needs a multi-period outcome structure", "bands");
    oc.alpha2 = value * oc.alpha1;
    oc.cac_mode = true;
    if (oc.kind == OutcomeKind::nested_exchangeable) oc.alpha0 = oc.alpha2;
  } else if (param == "covariate_icc") {
    switch (cc.kind) {
      case CovariateKind::exchangeable: cc = CovariateCorrelation::exchangeable(value); break;
      case CovariateKind::nested_exchangeable: {
        const double cac = cc.rho1 == 0.0 ? 0.0 : cc.rho2 / cc.rho1;
        cc.rho1 = value;
        if (cc.cac_mode) cc.rho2 = cac * value;
        cc.rho0 = cc.rho2;
        break;
      }
      case CovariateKind::cohort_time_invariant: cc = CovariateCorrelation::cohort_time_invariant(value); break;
      default: throw ValidationError("covariate ICC band needs a correlated covariate structure", "bands");
    }
  } else if (param == "covariate_cac") {
    if (cc.kind != CovariateKind::nested_exchangeable)
      throw ValidationError("covariate CAC band needs a nested covariate structure", "bands");
    cc.rho2 = value * cc.rho1;
    cc.rho0 = cc.rho2;
    cc.cac_mode = true;
  } else {
    throw ValidationError("unknown band parameter '" + param + "'", "bands");
  }
  return sc;
}

inline Series sweep_one(const SolveRequest& r, Axis axis, const Range& range, const std::string& label) {
  const bool integer = axis != Axis::delta_vs_power;
  const auto xs = range_values(range, integer);
  Series s;
  s.label = label;
  s.points.resize(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) {
    const double x = xs[i];
    s.points[i].x = x;
    SolveRequest q = r;
    try {
      switch (axis) {
        case Axis::m_vs_power:
          s.points[i].y = power_at(q, *q.n, static_cast<long>(x));
          break;
        case Axis::n_vs_power:
          if (static_cast<long>(x) % n_step(q.scenario) != 0) return;
          s.points[i].y = power_at(q, static_cast<long>(x), detail::m_value(q));
          break;
        case Axis::m_vs_n:
          q.m = static_cast<long>(x);
          q.target = Target::n;
          s.points[i].y = static_cast<double>(solve_n(q).n);
          break;
        case Axis::delta_vs_power:
          q.delta = x;
          s.points[i].y = power_at(q, *q.n, detail::m_value(q));
          break;
      }
    } catch (const InfeasibleError&) {
    } catch (const ValidationError&) {
      if (axis == Axis::m_vs_power || axis == Axis::delta_vs_power) throw;
    } catch (const ResourceError&) {
      if (axis != Axis::m_vs_n) throw;
    }
  });
  return s;
}

// One "assumed" series, then "<param>:min" and "<param>:max" per band.
inline std::vector<Series> sweep(const SolveRequest& r, Axis axis, const Range& range) {
  SolveRequest base = r;
  switch (axis) {
    case Axis::m_vs_power:
    case Axis::delta_vs_power:
      if (!base.n) throw ValidationError("number of clusters is required", "design.clusters");
      break;
    case Axis::n_vs_power:
      if (!base.m && base.scenario.design.family != DesignFamily::irgt &&
          base.scenario.design.family != DesignFamily::parallel_two_level_by_arm)
        throw ValidationError("cluster-period size is required", "design.cluster_size");
      break;
    case Axis::m_vs_n:
      if (!(base.power > 0.0 && base.power < 1.0)) throw ValidationError("power must lie in (0, 1)", "power");
      if (base.delta == 0.0) throw ValidationError("delta must be nonzero to solve for a sample size", "delta");
      break;
  }
  if (!(base.alpha_level > 0.0 && base.alpha_level < 1.0))
    throw ValidationError("alpha_level must lie in (0, 1)", "alpha_level");
  std::vector<Series> out;
  out.push_back(sweep_one(base, axis, range, "assumed"));
  for (const auto& b : r.bands) {
    if (b.hi < b.lo) throw ValidationError("band upper bound is below the lower bound", "bands");
    for (const auto& [tag, v] : {std::pair{"min", b.lo}, std::pair{"max", b.hi}}) {
      SolveRequest q = base;
      q.scenario = with_parameter(base.scenario, b.param, v);
      out.push_back(sweep_one(q, axis, range, b.param + ":" + tag));
    }
  }
  return out;
}

}  // namespace crthte
