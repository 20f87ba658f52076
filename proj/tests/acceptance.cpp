// Acceptance report: one PASS/FAIL line per primary criterion. Exits non-zero
// when any criterion fails.

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "crthte/api.hpp"
#include "crthte/cli.hpp"
#include "crthte/closedform.hpp"
#include "crthte/montecarlo.hpp"
#include "crthte/service.hpp"
#include "fixtures.hpp"
#include "golden_cases.hpp"
#include "oracles.hpp"

using namespace crthte;
using json = nlohmann::ordered_json;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << (detail.tellp() > 0 ? "; " : "") << what;
    }
  }
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<void(Check&)>& body) {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.require(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.require(secs < budget_s, "runtime over " + std::to_string(budget_s) + " s");
  if (!c.ok) ++failures;
  std::printf("%s  %-28s %8.3f s  %s\n", c.ok ? "PASS" : "FAIL", name.c_str(), secs, c.detail.str().c_str());
  std::fflush(stdout);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool close_rel(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b)); }

Scenario gaussian(Scenario sc, double mu = 0.0) {
  sc.covariate = CovariateModel::continuous(mu, 1.0, sc.covariate.correlation);
  return sc;
}

// ---------------------------------------------------------------------------

void umdex(Check& c) {
  const std::pair<double, long> inputs[] = {{0.02, 11}, {0.02, 8}, {0.04, 10}, {0.04, 7}};
  const long expect[] = {35, 48, 39, 55};
  for (int i = 0; i < 4; ++i) {
    const long n = solve(fixture::solve_n_request(fixture::umdex(inputs[i].first), inputs[i].second)).n;
    c.require(std::abs(n - expect[i]) <= 1, "m=" + std::to_string(inputs[i].second) + " gave n=" + std::to_string(n));
    c.detail << (i ? " " : "") << "n=" << n;
  }
}

void lire(Check& c) {
  const std::pair<DesignFamily, long> rows[] = {{DesignFamily::stepped_wedge, 353},
                                                {DesignFamily::multi_period_parallel, 190},
                                                {DesignFamily::crxo_multi_period, 185}};
  for (const auto& [fam, expect] : rows) {
    const long m = solve(fixture::solve_m_request(fixture::lire(fam), 100)).m;
    c.require(std::abs(m - expect) <= 0.01 * expect,
              std::string(family_name(fam)) + " gave m=" + std::to_string(m));
    c.detail << "m=" << m << " ";
  }
}

void custom(Check& c) {
  for (auto [m, expect] : {std::pair{6L, 32L}, std::pair{11L, 18L}}) {
    auto r = fixture::solve_n_request(fixture::umdex_custom(), m);
    const auto s = solve(r);
    c.require(std::abs(s.n - expect) <= 1, "m=" + std::to_string(m) + " gave n=" + std::to_string(s.n));
    const double p = power_at(r, expect, m);
    c.require(p >= 0.895, "power at n=" + std::to_string(expect) + " is " + std::to_string(p));
    c.detail << "n=" << s.n << " (power at " << expect << ": " << p << ") ";
  }
}

void conformance(Check& c) {
  int registered = 0;
  for (const auto& row : formula_rows()) {
    const auto r = register_row(row);
    c.require(r.points == kConformancePoints, row.id + " used " + std::to_string(r.points) + " points");
    c.require(r.registered == row.expect_registered, row.id + " registration outcome changed");
    if (r.registered) {
      ++registered;
      c.require(r.max_rel_error <= kConformanceTolerance, row.id + " error " + std::to_string(r.max_rel_error));
    }
  }
  c.require(slurp(std::string(CRTHTE_SOURCE_DIR) + "/docs/conformance.md") == conformance_markdown(),
            "docs/conformance.md is stale");
  c.detail << registered << " registered forms";
}

void properties(Check& c) {
  // Centering invariance.
  for (auto sc : {fixture::umdex(), fixture::lire(DesignFamily::stepped_wedge),
                  fixture::lire(DesignFamily::crxo_multi_period), fixture::umdex_custom()}) {
    const double a = evaluate(gaussian(sc, 0.0), 7, 10).var_hte_total;
    const double b = evaluate(gaussian(sc, 2.5), 7, 10).var_hte_total;
    c.require(close_rel(a, b, 1e-8), "centering " + std::string(family_name(sc.design.family)));
  }
  // Zero-ICC reductions.
  for (long m : {1L, 7L, 30L}) {
    const double iid = 4.0 / m;
    c.require(close_rel(hte_var_two_level(m, 0, 0, 0.5, 1, 1), iid, 1e-12), "two-level iid");
    c.require(close_rel(hte_var_crxo_cross_sectional(m, 4, 0, 0, 0, 0, 0.5, 1, 1), iid / 4, 1e-12), "crxo iid");
    Scenario sc;
    sc.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::independent());
    c.require(close_rel(evaluate_normalized(sc, m).sigma2_hte_norm, iid, 1e-10), "engine iid");
  }
  // Collapses.
  c.require(build_outcome_matrix(OutcomeCorrelation::nested(0.07, 0.07), 4, 3) ==
                build_outcome_matrix(OutcomeCorrelation::exchangeable(0.07), 12, 1),
            "nested -> exchangeable");
  c.require(build_outcome_matrix(OutcomeCorrelation::block(0.03, 0.08, 0.03), 5, 3) ==
                build_outcome_matrix(OutcomeCorrelation::nested(0.08, 0.03), 5, 3),
            "block -> nested");
  // Analytic and numeric spectra with multiplicities.
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const long m = 1 + static_cast<long>(u(g) * 6), J = 1 + static_cast<long>(u(g) * 4);
    const double a2 = 0.2 * u(g), a1 = a2 + 0.3 * u(g), a0 = a2 + 0.6 * u(g);
    if (min_eigenvalue({a0, a1, a2}, m, J) <= 0.0) continue;
    const auto t = eigenvalues_block(a0, a1, a2, m, J);
    const auto k = multiplicities_block(m, J);
    std::vector<double> analytic;
    for (int i = 0; i < 4; ++i) analytic.insert(analytic.end(), k[i], t[i]);
    std::sort(analytic.begin(), analytic.end());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(oracle::corr_matrix(a0, a1, a2, m, J));
    std::vector<double> numeric(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
    std::sort(numeric.begin(), numeric.end());
    bool same = numeric.size() == analytic.size();
    for (std::size_t i = 0; same && i < numeric.size(); ++i)
      same = std::abs(numeric[i] - analytic[i]) <= 1e-10 * std::max(1.0, std::abs(numeric[i]));
    c.require(same, "spectrum mismatch");
  }
  // pi symmetry.
  for (double pi : {0.2, 0.35}) {
    auto a = fixture::lire(DesignFamily::multi_period_parallel), b = a;
    a.design.pi = pi;
    b.design.pi = 1 - pi;
    c.require(close_rel(evaluate_normalized(a, 20).sigma2_hte_norm, evaluate_normalized(b, 20).sigma2_hte_norm, 1e-10),
              "pi symmetry");
  }
  // Solver minimality.
  for (double a1 : {0.01, 0.05})
    for (long m : {4L, 12L}) {
      auto r = fixture::solve_n_request(fixture::umdex(a1), m, 0.8);
      const auto s = solve(r);
      c.require(s.achieved_power >= r.power && (s.n <= 2 || power_at(r, s.n - 1, m) < r.power), "minimality");
    }
  // t power never above normal power.
  for (long n : {3L, 10L, 100L})
    for (double ncp : {0.5, 2.0, 4.0})
      c.require(power_from_variance(ncp, 1.0, 0.05, DfMode::t_n_minus_2, n) <=
                    power_from_variance(ncp, 1.0, 0.05, DfMode::normal, n) + 1e-15,
                "t power above normal");
  // Two-level ceiling: for rho1 > 0 sigma2_HTE peaks inside (0, 1) in alpha1 (slope at 0 is
  // (m - 1) rho1), for rho1 = 0 it peaks at the origin; the HTE/ATE ratio stays <= 1.
  for (long m : {5L, 50L})
    for (double r1 : {0.0, 0.5, 0.9}) {
      std::vector<double> hte;
      double de_max = 0.0;
      for (int i = 0; i <= 200; ++i) {
        const double a1 = i / 200.0 * 0.99;
        hte.push_back(hte_var_two_level(m, a1, r1, 0.5, 1, 1));
        de_max = std::max(de_max, design_effect_hte(hte.back(), ate_var_two_level(m, a1, 0.5, 1, 1)));
      }
      const auto peak = std::max_element(hte.begin(), hte.end()) - hte.begin();
      if (r1 > 0.0)
        c.require(peak > 0 && peak < static_cast<long>(hte.size()) - 1, "no interior maximum");
      else
        c.require(peak == 0, "rho1 = 0 maximum away from the origin");
      c.require(de_max <= 1.0 + 1e-12, "design effect above its ceiling");
    }
}

// Monte Carlo -----------------------------------------------------------------

std::vector<std::pair<std::string, SimulationConfig>> size_configs() {
  std::vector<std::pair<std::string, SimulationConfig>> out;
  const auto x_nested = CovariateCorrelation::nested(0.2, 0.1);
  Scenario two = gaussian(fixture::umdex());
  out.push_back({"parallel", {two, 20, 8, 0.0}});
  Scenario arm;
  arm.design.family = DesignFamily::parallel_two_level_by_arm;
  arm.design.arm_params = ArmParams{8, 4, 0.05, 0.1, 1.0, 1.3};
  arm.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::exchangeable(0.2));
  out.push_back({"parallel-by-arm", {arm, 20, 8, 0.0}});
  Scenario three;
  three.design.family = DesignFamily::parallel_three_level;
  three.design.n_sub = 3;
  three.outcome.correlation = OutcomeCorrelation::nested(0.05, 0.02);
  three.covariate = CovariateModel::continuous(0.0, 1.0, x_nested);
  out.push_back({"three-level", {three, 12, 5, 0.0}});
  out.push_back({"multi-period-parallel", {gaussian(fixture::lire(DesignFamily::multi_period_parallel)), 10, 5, 0.0}});
  Scenario crxo2 = gaussian(fixture::lire(DesignFamily::crxo_two_period));
  crxo2.design.periods = 2;
  out.push_back({"crxo-two-period", {crxo2, 10, 8, 0.0}});
  out.push_back({"crxo-multi-period", {gaussian(fixture::lire(DesignFamily::crxo_multi_period)), 10, 5, 0.0}});
  out.push_back({"stepped-wedge", {gaussian(fixture::lire(DesignFamily::stepped_wedge)), 10, 5, 0.0}});
  Scenario irgt;
  irgt.design.family = DesignFamily::irgt;
  irgt.design.arm_params = ArmParams{10, 1, 0.05, 0.0, 1.0, 1.0};
  irgt.covariate = CovariateModel::continuous(0.0, 1.0, CovariateCorrelation::independent());
  out.push_back({"irgt", {irgt, 40, 10, 0.0}});
  Scenario cust = gaussian(fixture::umdex_custom());
  out.push_back({"custom", {cust, 20, 6, 0.0}});
  return out;
}

void mc_size(Check& c) {
  const long reps = 2000;
  const double se = std::sqrt(0.05 * 0.95 / reps);
  std::uint64_t seed = 1000;
  for (const auto& [name, cfg] : size_configs()) {
    const auto r = empirical_power(cfg, 0.05, reps, seed++);
    c.require(std::abs(r.rate - 0.05) <= 3 * se, name + " size " + std::to_string(r.rate));
    c.detail << name << "=" << r.rate << " ";
  }
}

void mc_umdex(Check& c) {
  SimulationConfig cfg{fixture::umdex(), 35, 11, 0.7};
  const auto r = empirical_power(cfg, 0.05, 5000, 2024);
  c.require(std::abs(r.rate - 0.90) <= 0.025, "rate " + std::to_string(r.rate));
  c.detail << "rate=" << r.rate << " analytic=" << r.analytic_power;
}

void mc_stepped_wedge(Check& c) {
  Scenario sc = gaussian(fixture::lire(DesignFamily::stepped_wedge));
  sc.design.sequences = 5;
  const long n = 20, m = 30;
  // Effect size that gives analytic power 0.80.
  const double var = evaluate(sc, m, n).var_hte_total;
  const double delta = (normal_quantile(0.975) + normal_quantile(0.80)) * std::sqrt(var);
  SimulationConfig cfg{sc, n, m, delta};
  const auto r = empirical_power(cfg, 0.05, 3000, 77);
  c.require(std::abs(r.analytic_power - 0.80) < 1e-9, "analytic " + std::to_string(r.analytic_power));
  c.require(std::abs(r.rate - r.analytic_power) <= 0.025, "rate " + std::to_string(r.rate));
  c.detail << "delta=" << delta << " rate=" << r.rate << " analytic=" << r.analytic_power;
}

// Interfaces --------------------------------------------------------------------

void parity(Check& c) {
  const std::string src = CRTHTE_SOURCE_DIR;
  for (const auto& g : golden::cases(src)) {
    std::ostringstream out, err;
    const int code = cli::run(g.args, out, err);
    c.require(code == 0, g.name + " exit " + std::to_string(code));
    if (code != 0) continue;
    auto cli_doc = json::parse(out.str());
    const auto body = json::parse(slurp(src + "/samples/" + g.sample + ".json"));
    const auto api_result = api::solve_json(body).dump();
    const auto http = service::handle("POST", "/api/v1/solve", body.dump());
    c.require(cli_doc["result"].dump() == api_result, g.name + " CLI != API");
    c.require(http.status == 200 && json::parse(http.body)["result"].dump() == api_result, g.name + " service != API");
    auto golden_doc = json::parse(slurp(src + "/tests/golden/" + g.name + ".json"));
    golden_doc.erase("version");
    cli_doc.erase("version");
    c.require(golden_doc.dump() == cli_doc.dump(), g.name + " differs from golden");
  }
}

}  // namespace

int main() {
  std::printf("crthte acceptance (version %s)\n", std::string(kVersion).c_str());
  criterion("umdex-two-level", 0.1, umdex);
  criterion("lire-design-comparison", 5.0, lire);
  criterion("umdex-custom-2x2", 1.0, custom);
  criterion("closed-form-conformance", 30.0, conformance);
  criterion("property-suite", 60.0, properties);
  const auto mc0 = std::chrono::steady_clock::now();
  criterion("mc-size-calibration", 600.0, mc_size);
  criterion("mc-umdex-power", 600.0, mc_umdex);
  criterion("mc-stepped-wedge-power", 600.0, mc_stepped_wedge);
  const double mc_total = std::chrono::duration<double>(std::chrono::steady_clock::now() - mc0).count();
  criterion("mc-total-runtime", 1.0, [&](Check& c) {
    c.require(mc_total < 600.0, "Monte Carlo total " + std::to_string(mc_total) + " s");
    c.detail << mc_total << " s total";
  });
  criterion("cli-service-parity", 30.0, parity);
  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
