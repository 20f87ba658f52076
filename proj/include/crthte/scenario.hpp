#pragma once

// A fully specified design problem minus the unknowns (n, m): maps every
// design family onto engine strata.

#include <optional>
#include <vector>

#include "crthte/correlation.hpp"
#include "crthte/designs.hpp"
#include "crthte/engine.hpp"
#include "crthte/errors.hpp"

namespace crthte {

struct Scenario {
  DesignSpec design;
  std::optional<TreatmentMatrix> custom;  // custom family only
  bool custom_has_counts = false;         // counts fixed by the CSV
  OutcomeModel outcome;
  CovariateModel covariate;
  std::optional<CovariateEffect> effect;
  long dimension_cap = kDefaultDimensionCap;
};

struct EngineSetup {
  std::vector<Stratum> strata;
  int periods = 1;
  EngineOptions options;
};

// Period-specific covariate slopes for multi-period designs, one pooled slope
// otherwise.
inline CovariateEffect effective_effect(const Scenario& sc) {
  if (sc.effect) return *sc.effect;
  if (sc.design.family == DesignFamily::custom)
    return sc.custom && sc.custom->periods() > 1 ? CovariateEffect::period_specific : CovariateEffect::pooled;
  return is_multi_period(sc.design.family) ? CovariateEffect::period_specific : CovariateEffect::pooled;
}

// Cluster-count step between feasible designs.
inline long n_step(const Scenario& sc) {
  if (sc.design.family == DesignFamily::stepped_wedge) return normalized(sc.design).sequences;
  return 1;
}

inline long minimum_n(const Scenario& sc) {
  if (sc.design.family == DesignFamily::stepped_wedge) return normalized(sc.design).sequences;
  if (sc.design.family == DesignFamily::custom) return sc.custom ? sc.custom->sequences() : 1;
  if (sc.design.family == DesignFamily::parallel_three_level &&
      sc.design.randomization_level == RandomizationLevel::subcluster)
    return 1;
  return 2;
}

namespace detail {

// Custom allocation: largest remainder over the CSV row weights. Ties go to
// rows with more treated cells, then to the lower index.
inline std::vector<long> allocate_custom(long n, const TreatmentMatrix& tm) {
  const int S = tm.sequences();
  std::vector<int> order(S);
  for (int s = 0; s < S; ++s) order[s] = s;
  auto treated = [&](int s) { return std::count(tm.rows[s].begin(), tm.rows[s].end(), 1); };
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return treated(a) > treated(b); });
  std::vector<double> w;
  for (int s : order) w.push_back(static_cast<double>(tm.clusters_per_sequence[s]));
  const auto c = allocate(n, w);
  std::vector<long> out(S);
  for (int k = 0; k < S; ++k) out[order[k]] = c[k];
  return out;
}

inline void require_arms(const Scenario& sc) {
  if (!sc.design.arm_params)
    throw ValidationError("per-arm parameters are required for " + std::string(family_name(sc.design.family)),
                          "design.arms");
}

}  // namespace detail

// Engine setup for n clusters of size m. With `fractional` the strata carry
// allocation proportions summing to n instead of integer counts (used to
// seed the n search).
inline EngineSetup build_setup(const Scenario& sc, long m, double n, bool fractional = false) {
  const DesignSpec spec = normalized(sc.design);
  EngineSetup out;
  out.options.effect = effective_effect(sc);
  out.options.sigma_x2 = sc.covariate.variance();
  out.options.dimension_cap = sc.dimension_cap;
  const double s2 = sc.outcome.sigma_yx * sc.outcome.sigma_yx;
  if (!(s2 > 0.0)) throw ValidationError("outcome SD must be positive", "outcome.sd");
  const long ni = static_cast<long>(std::llround(n));

  switch (spec.family) {
    case DesignFamily::parallel_two_level_by_arm:
    case DesignFamily::irgt: {
      detail::require_arms(sc);
      const ArmParams& a = *spec.arm_params;
      const long m1 = m > 0 ? m : a.m_treatment;
      const long m0 = a.m_control;
      if (m1 < 1 || m0 < 1) throw ValidationError("group sizes must be >= 1", "design.arms");
      BlockParams x1 = sc.covariate.correlation.params(), x0 = x1;
      if (spec.family == DesignFamily::irgt) {
        x1 = x0 = sc.covariate.level == CovariateLevel::cluster ? BlockParams{1, 1, 1} : BlockParams{0, 0, 0};
      }
      double w1 = spec.pi * n, w0 = (1.0 - spec.pi) * n;
      if (!fractional) {
        const auto c = generate([&] { auto d = spec; d.n_total = ni; return d; }()).clusters_per_sequence;
        w1 = static_cast<double>(c[0]);
        w0 = static_cast<double>(c[1]);
      }
      const double i1 = a.icc_treatment, i0 = a.icc_control;
      out.strata.push_back({{1}, w1, m1, {i1, i1, i1}, a.sd_treatment * a.sd_treatment, x1});
      out.strata.push_back({{0}, w0, m0, {i0, i0, i0}, a.sd_control * a.sd_control, x0});
      out.periods = 1;
      return out;
    }
    case DesignFamily::parallel_three_level: {
      // Subclusters play the role of periods with a common intercept.
      const int ns = spec.n_sub;
      out.periods = ns;
      out.options.period_intercepts = false;
      out.options.effect = CovariateEffect::pooled;
      const BlockParams y = sc.outcome.correlation.params();
      const BlockParams x = sc.covariate.correlation.params();
      if (spec.randomization_level == RandomizationLevel::subcluster) {
        const long k = detail::two_sequence({1}, {0}, ns, spec.pi).clusters_per_sequence[0];
        std::vector<std::uint8_t> u(ns, 0);
        for (long i = 0; i < k; ++i) u[i] = 1;
        out.strata.push_back({u, n, m, y, s2, x});
        return out;
      }
      double w1 = spec.pi * n, w0 = (1.0 - spec.pi) * n;
      if (!fractional) {
        auto d = spec;
        d.n_total = ni;
        const auto c = generate(d).clusters_per_sequence;
        w1 = static_cast<double>(c[0]);
        w0 = static_cast<double>(c[1]);
      }
      out.strata.push_back({std::vector<std::uint8_t>(ns, 1), w1, m, y, s2, x});
      out.strata.push_back({std::vector<std::uint8_t>(ns, 0), w0, m, y, s2, x});
      return out;
    }
    default:
      break;
  }

  TreatmentMatrix tm;
  if (spec.family == DesignFamily::custom) {
    if (!sc.custom) throw ValidationError("custom design requires a design CSV", "design.csv");
    tm = *sc.custom;
    if (fractional) {
      const double tot = static_cast<double>(tm.total());
      out.periods = tm.periods();
      auto strata = strata_for(tm, m, sc.outcome, sc.covariate);
      for (auto& x : strata) x.weight = x.weight / tot * n;
      out.strata = std::move(strata);
      return out;
    }
    if (!sc.custom_has_counts || ni != tm.total()) tm.clusters_per_sequence = detail::allocate_custom(ni, *sc.custom);
  } else if (fractional) {
    auto d = spec;
    d.n_total = spec.family == DesignFamily::stepped_wedge ? spec.sequences : 2;
    d.pi = 0.5;  // row shapes only; weights are set below
    tm = generate(d);
    out.periods = tm.periods();
    auto strata = strata_for(tm, m, sc.outcome, sc.covariate);
    if (spec.family == DesignFamily::stepped_wedge) {
      for (auto& x : strata) x.weight = n / spec.sequences;
    } else {
      strata[0].weight = spec.pi * n;
      strata[1].weight = (1.0 - spec.pi) * n;
    }
    out.strata = std::move(strata);
    return out;
  } else {
    auto d = spec;
    d.n_total = ni;
    tm = generate(d);
  }
  out.periods = tm.periods();
  out.strata = strata_for(tm, m, sc.outcome, sc.covariate);
  return out;
}

inline VarianceReport evaluate(const Scenario& sc, long m, long n) {
  const auto setup = build_setup(sc, m, static_cast<double>(n));
  return variance_report(setup.strata, setup.periods, setup.options);
}

// Per-cluster normalized report (n Var) from fractional allocation weights.
inline VarianceReport evaluate_normalized(const Scenario& sc, long m) {
  const auto setup = build_setup(sc, m, 1.0, true);
  return variance_report(setup.strata, setup.periods, setup.options);
}

// Total individuals N for n clusters.
inline double total_individuals(const Scenario& sc, long m, long n) {
  const DesignSpec spec = normalized(sc.design);
  switch (spec.family) {
    case DesignFamily::parallel_three_level:
      return static_cast<double>(n) * spec.n_sub * m;
    case DesignFamily::parallel_two_level_by_arm:
    case DesignFamily::irgt: {
      const auto c = generate([&] { auto d = spec; d.n_total = n; return d; }()).clusters_per_sequence;
      const long m1 = m > 0 ? m : spec.arm_params->m_treatment;
      return static_cast<double>(c[0] * m1 + c[1] * spec.arm_params->m_control);
    }
    case DesignFamily::parallel_two_level:
      return static_cast<double>(n) * m;
    case DesignFamily::custom:
      return static_cast<double>(n) * m * (sc.custom ? sc.custom->periods() : 1);
    default:
      return static_cast<double>(n) * m * spec.periods;
  }
}

}  // namespace crthte
