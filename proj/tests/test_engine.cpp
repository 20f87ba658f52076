#include <catch_amalgamated.hpp>

#include <random>

#include "crthte/closedform.hpp"
#include "crthte/scenario.hpp"
#include "crthte/solver.hpp"
#include "oracles.hpp"

using namespace crthte;
using Catch::Approx;

namespace {

Scenario umdex(double a1 = 0.02) {
  Scenario sc;
  sc.design.family = DesignFamily::parallel_two_level;
  sc.outcome.correlation = OutcomeCorrelation::exchangeable(a1);
  sc.covariate = CovariateModel::binary(0.36, CovariateCorrelation::exchangeable(0.2));
  return sc;
}

Scenario lire(DesignFamily f) {
  Scenario sc;
  sc.design.family = f;
  sc.design.periods = 6;
  if (f == DesignFamily::stepped_wedge) sc.design.sequences = 5;
  sc.outcome.correlation = OutcomeCorrelation::nested_cac(0.022, 0.5);
  sc.covariate = CovariateModel::binary(0.2, CovariateCorrelation::nested_cac(0.1, 0.9));
  return sc;
}

oracle::Setup oracle_setup(const TreatmentMatrix& tm, long m, const BlockParams& y, const BlockParams& x,
                           double sigma2, double mu, double sx2, bool period_specific) {
  oracle::Setup s;
  for (int r = 0; r < tm.sequences(); ++r)
    s.sequences.push_back({std::vector<int>(tm.rows[r].begin(), tm.rows[r].end()),
                           static_cast<double>(tm.clusters_per_sequence[r])});
  s.m = m;
  s.J = tm.periods();
  s.a0 = y.c0;
  s.a1 = y.c1;
  s.a2 = y.c2;
  s.r0 = x.c0;
  s.r1 = x.c1;
  s.r2 = x.c2;
  s.sigma2 = sigma2;
  s.mu_x = mu;
  s.sigma_x2 = sx2;
  s.period_specific = period_specific;
  return s;
}

}  // namespace

TEST_CASE("cluster design columns", "[engine]") {
  auto one = cluster_design_columns({1}, 1, CovariateEffect::pooled);
  REQUIRE(one.size() == 4);
  REQUIRE(one.columns[0].name == "1");
  REQUIRE(one.columns[one.w_index].name == "W");
  REQUIRE(one.columns[one.wx_index].name == "WX");

  auto two = cluster_design_columns({0, 1}, 2, CovariateEffect::pooled);
  std::vector<std::string> names;
  for (const auto& c : two.columns) names.push_back(c.name);
  REQUIRE(names == std::vector<std::string>{"P1", "P2", "W", "X", "WX"});

  auto sw = cluster_design_columns({0, 0, 0, 1, 1, 1}, 6, CovariateEffect::period_specific);
  REQUIRE(sw.size() == 14);
}

TEST_CASE("fast assembly matches the dense oracle", "[engine]") {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<TreatmentMatrix> designs = {
      {{{1}, {0}}, {3, 2}},
      {{{1, 0}, {0, 1}}, {4, 3}},
      {{{0, 0, 1, 1}, {0, 1, 1, 1}, {0, 0, 0, 1}}, {2, 3, 2}},
      {{{1, 0, 1}, {0, 1, 0}}, {5, 2}},
      {{{0, 0}, {0, 1}}, {1, 1}},
  };
  for (const auto& tm : designs) {
    for (int trial = 0; trial < 4; ++trial) {
      const long m = 1 + static_cast<long>(u(g) * 5);
      const double a2 = 0.1 * u(g), a1 = a2 + 0.2 * u(g), a0 = a2 + 0.5 * u(g);
      const double r2 = 0.2 * u(g), r1 = r2 + 0.5 * u(g), r0 = 0.7 * u(g);
      const bool cohort = trial % 2 == 1;
      OutcomeModel y{0.5 + u(g), cohort ? OutcomeCorrelation::block(a0, a1, a2) : OutcomeCorrelation::nested(a1, a2)};
      const auto xc = cohort ? CovariateCorrelation::cohort_time_invariant(r0) : CovariateCorrelation::nested(r1, r2);
      const double mu = u(g) - 0.5;
      auto x = CovariateModel::continuous(mu, 0.4 + u(g), xc);
      for (auto effect : {CovariateEffect::pooled, CovariateEffect::period_specific}) {
        auto strata = strata_for(tm, m, y, x);
        EngineOptions opt;
        opt.effect = effect;
        opt.mu_x = mu;
        opt.sigma_x2 = x.variance();
        const auto fast = variance_report(strata, tm.periods(), opt);
        opt.dense = true;
        const auto dense = variance_report(strata, tm.periods(), opt);
        const auto ref = oracle::gls_variances(oracle_setup(tm, m, y.correlation.params(), xc.params(),
                                                            y.sigma_yx * y.sigma_yx, mu, x.variance(),
                                                            effect == CovariateEffect::period_specific));
        REQUIRE(fast.var_hte_total == Approx(ref.var_hte).epsilon(1e-8));
        REQUIRE(dense.var_hte_total == Approx(ref.var_hte).epsilon(1e-8));
        if (fast.estimable_ate) REQUIRE(fast.var_ate_total == Approx(ref.var_ate).epsilon(1e-8));
      }
    }
  }
}

TEST_CASE("independence reduces to the iid interaction variance", "[engine]") {
  for (long m : {1L, 4L, 9L}) {
    for (double pi : {0.5, 0.3}) {
      Scenario sc;
      sc.design.pi = pi;
      sc.outcome.sigma_yx = 1.7;
      sc.covariate = CovariateModel::continuous(0.0, 0.8, CovariateCorrelation::independent());
      const auto r = evaluate_normalized(sc, m);
      REQUIRE(r.sigma2_hte_norm == Approx(1.7 * 1.7 / (m * pi * (1 - pi) * 0.64)).epsilon(1e-10));
    }
  }
}

TEST_CASE("two-level ATE with all ICCs zero and m = 1", "[engine]") {
  Scenario sc;
  sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::independent());
  REQUIRE(evaluate_normalized(sc, 1).sigma2_ate_norm == Approx(4.0).epsilon(1e-12));
  REQUIRE(evaluate(sc, 1, 10).var_ate_total == Approx(0.4).epsilon(1e-12));
}

TEST_CASE("UMDEX two-level variance equals the inline form", "[engine]") {
  const auto r = evaluate_normalized(umdex(), 11);
  const double sx2 = 0.36 * 0.64;
  REQUIRE(r.sigma2_hte_norm == Approx(oracle::hte_two_level_inline(11, 0.02, 0.2, 0.5, 1.0, sx2)).epsilon(1e-8));
  REQUIRE(r.sigma2_hte_norm == Approx(1.628122).epsilon(1e-6));
  REQUIRE(r.sigma2_ate_norm * 1.0 / sx2 == Approx(oracle::ate_two_level(11, 0.02, 0.5, 1.0, sx2)).epsilon(1e-8));
  const double bound = (1 - 0.02) * (1 + 9 * 0.02) / (1 + 9 * 0.02 - 10 * 0.2 * 0.02);
  REQUIRE(r.design_effect_hte < bound);
  REQUIRE(r.design_effect_hte == Approx(0.98 / 1.14).epsilon(1e-10));
}

TEST_CASE("LIRE stepped wedge at m = 353 gives 90 percent power", "[engine]") {
  const auto r = evaluate(lire(DesignFamily::stepped_wedge), 353, 100);
  const double p = power_from_variance(-0.05, r.var_hte_total, 0.05);
  REQUIRE(p == Approx(0.90).margin(0.002));
  REQUIRE(p >= 0.90);
}

TEST_CASE("custom 2x2 closed-cohort design", "[engine]") {
  Scenario sc = umdex(0.04);
  sc.design.family = DesignFamily::custom;
  sc.design.sampling = Sampling::closed_cohort;
  sc.custom = TreatmentMatrix{{{0, 0}, {0, 1}}, {1, 1}};
  sc.outcome.correlation = OutcomeCorrelation::block_cac(0.7, 0.04, 0.9);
  sc.covariate = CovariateModel::binary(0.36, CovariateCorrelation::cohort_time_invariant(0.2));
  const double p32 = power_from_variance(0.7, evaluate(sc, 6, 32).var_hte_total, 0.05);
  const double p33 = power_from_variance(0.7, evaluate(sc, 6, 33).var_hte_total, 0.05);
  REQUIRE(p32 == Approx(0.90).margin(0.002));
  REQUIRE(p33 >= 0.90);
}

TEST_CASE("IRGT variance", "[engine]") {
  ArmParams equal{7, 7, 0.0, 0.0, 1.3, 1.3};
  REQUIRE(irgt_variance(equal, 0.5, 0.9, CovariateLevel::cluster) ==
          Approx(4 * 1.3 * 1.3 / (0.81 * 7)).epsilon(1e-12));

  ArmParams singles{1, 1, 0.1, 0.2, 1.0, 1.4};
  REQUIRE(irgt_variance(singles, 0.5, 1.0, CovariateLevel::individual) ==
          Approx(irgt_variance(singles, 0.5, 1.0, CovariateLevel::cluster)).epsilon(1e-12));

  ArmParams asym{10, 1, 0.05, 0.0, 1.0, 1.0};
  Scenario sc;
  sc.design.family = DesignFamily::irgt;
  sc.design.arm_params = asym;
  sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::independent());
  REQUIRE(evaluate_normalized(sc, 0).sigma2_hte_norm ==
          Approx(irgt_variance(asym, 0.5, 1.0, CovariateLevel::individual)).epsilon(1e-8));
  sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::cluster_level_constant());
  REQUIRE(evaluate_normalized(sc, 0).sigma2_hte_norm ==
          Approx(irgt_variance(asym, 0.5, 1.0, CovariateLevel::cluster)).epsilon(1e-8));
}

TEST_CASE("inestimable interaction is reported with its coordinate", "[engine]") {
  Scenario sc;
  sc.design.family = DesignFamily::custom;
  sc.custom = TreatmentMatrix{{{0, 0}, {0, 0}}, {3, 3}};
  sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::independent());
  try {
    evaluate(sc, 5, 6);
    FAIL("expected InestimableError");
  } catch (const InestimableError& e) {
    REQUIRE(e.coordinate() == "beta3");
  }
}

TEST_CASE("ATE can be inestimable while HTE is not", "[engine]") {
  // Treatment confounded with period: every cluster switches at once.
  Scenario sc;
  sc.design.family = DesignFamily::custom;
  sc.custom = TreatmentMatrix{{{0, 1}, {0, 1}}, {3, 3}};
  sc.outcome.correlation = OutcomeCorrelation::nested(0.05, 0.02);
  sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::nested(0.2, 0.1));
  sc.effect = CovariateEffect::pooled;
  const auto r = evaluate(sc, 4, 6);
  REQUIRE_FALSE(r.estimable_ate);
  REQUIRE(r.estimable_hte);
  REQUIRE(r.var_hte_total > 0.0);
}

TEST_CASE("nested with alpha2 = alpha1 equals exchangeable over m J", "[engine][properties]") {
  // One-period-equivalent: all periods treated alike, pooled slope, common intercept.
  std::vector<Stratum> nested = {{{1, 1, 1}, 4, 5, {0.08, 0.08, 0.08}, 1.0, {0.3, 0.3, 0.3}},
                                 {{0, 0, 0}, 4, 5, {0.08, 0.08, 0.08}, 1.0, {0.3, 0.3, 0.3}}};
  EngineOptions opt;
  opt.effect = CovariateEffect::pooled;
  opt.period_intercepts = false;
  const auto a = variance_report(nested, 3, opt);
  std::vector<Stratum> flat = {{{1}, 4, 15, {0.08, 0.08, 0.08}, 1.0, {0.3, 0.3, 0.3}},
                               {{0}, 4, 15, {0.08, 0.08, 0.08}, 1.0, {0.3, 0.3, 0.3}}};
  const auto b = variance_report(flat, 1, opt);
  REQUIRE(a.var_hte_total == Approx(b.var_hte_total).epsilon(1e-10));
  REQUIRE(a.var_ate_total == Approx(b.var_ate_total).epsilon(1e-10));
}

TEST_CASE("cluster-level covariate is the rho1 = 1 specialization", "[engine]") {
  for (long m : {3L, 11L, 40L})
    for (double a1 : {0.01, 0.05, 0.2}) {
      Scenario sc;
      sc.outcome.correlation = OutcomeCorrelation::exchangeable(a1);
      sc.covariate = CovariateModel::continuous(0.0, 0.7, CovariateCorrelation::cluster_level_constant());
      REQUIRE(sc.covariate.level == CovariateLevel::cluster);
      REQUIRE(evaluate_normalized(sc, m).sigma2_hte_norm ==
              Approx(oracle::hte_two_level_inline(m, a1, 1.0, 0.5, 1.0, 0.49)).epsilon(1e-8));
    }
}

TEST_CASE("two-level HTE variance monotone in covariate variance and ICC", "[engine][properties]") {
  for (long m : {2L, 5L, 20L})
    for (double a1 : {0.0, 0.02, 0.1, 0.3}) {
      double prev = std::numeric_limits<double>::infinity();
      for (double sx : {0.2, 0.5, 1.0, 2.0}) {
        Scenario sc;
        sc.outcome.correlation = OutcomeCorrelation::exchangeable(a1);
        sc.covariate = CovariateModel::continuous(0.0, sx, CovariateCorrelation::exchangeable(0.3));
        const double v = evaluate_normalized(sc, m).sigma2_hte_norm;
        REQUIRE(v <= prev);
        prev = v;
      }
      prev = 0.0;
      for (double r1 : {0.0, 0.1, 0.4, 0.8, 1.0}) {
        Scenario sc;
        sc.outcome.correlation = OutcomeCorrelation::exchangeable(a1);
        sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::exchangeable(r1));
        const double v = evaluate_normalized(sc, m).sigma2_hte_norm;
        REQUIRE(v >= prev * (1 - 1e-12));
        prev = v;
      }
    }
}

TEST_CASE("dimension cap applies to the engine", "[engine]") {
  Scenario sc = lire(DesignFamily::stepped_wedge);
  REQUIRE_THROWS_AS(evaluate(sc, 3334, 100), ResourceError);
  REQUIRE_NOTHROW(evaluate(sc, 3333, 100));
}
