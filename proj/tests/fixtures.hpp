#pragma once

// Worked-example scenarios shared by the solver, Monte Carlo and acceptance
// tests.

#include "crthte/scenario.hpp"
#include "crthte/solver.hpp"

namespace fixture {

using namespace crthte;

inline Scenario umdex(double a1 = 0.02) {
  Scenario sc;
  sc.design.family = DesignFamily::parallel_two_level;
  sc.outcome.correlation = OutcomeCorrelation::exchangeable(a1);
  sc.covariate = CovariateModel::binary(0.36, CovariateCorrelation::exchangeable(0.2));
  return sc;
}

inline Scenario lire(DesignFamily f) {
  Scenario sc;
  sc.design.family = f;
  sc.design.periods = 6;
  if (f == DesignFamily::stepped_wedge) sc.design.sequences = 5;
  sc.outcome.correlation = OutcomeCorrelation::nested_cac(0.022, 0.5);
  sc.covariate = CovariateModel::binary(0.2, CovariateCorrelation::nested_cac(0.1, 0.9));
  return sc;
}

// Lower-right 2x2 baseline-period design, closed cohort.
inline Scenario umdex_custom() {
  Scenario sc = umdex(0.04);
  sc.design.family = DesignFamily::custom;
  sc.design.sampling = Sampling::closed_cohort;
  sc.custom = TreatmentMatrix{{{0, 0}, {0, 1}}, {1, 1}};
  sc.outcome.correlation = OutcomeCorrelation::block_cac(0.7, 0.04, 0.9);
  sc.covariate = CovariateModel::binary(0.36, CovariateCorrelation::cohort_time_invariant(0.2));
  return sc;
}

inline SolveRequest solve_n_request(Scenario sc, long m, double delta = 0.7) {
  SolveRequest r;
  r.scenario = std::move(sc);
  r.target = Target::n;
  r.m = m;
  r.delta = delta;
  return r;
}

inline SolveRequest solve_m_request(Scenario sc, long n, double delta = -0.05) {
  SolveRequest r;
  r.scenario = std::move(sc);
  r.target = Target::m;
  r.n = n;
  r.delta = delta;
  return r;
}

}  // namespace fixture
