#pragma once

// JSON request/response layer shared by the CLI and the HTTP service. Both
// front ends build the same request object and call these functions, so
// their result payloads are identical by construction.
//
// Request schema (all keys optional unless noted):
//
//   target          "power" | "n" | "m" | "delta"            (solve only)
//   design          { family (required), periods, sequences, clusters,
//                     cluster_size, pi, sampling, subclusters,
//                     randomization_level, csv, covariate_effect,
//                     arms { m_treatment, m_control, icc_treatment,
//                            icc_control, sd_treatment, sd_control } }
//   outcome         { type, sd, prevalence, icc, cac, icc_between, icc0,
//                     structure, icc_treatment, icc_control }
//   covariate       { type, level, mean, sd, prevalence, icc, cac,
//                     icc_between, structure }
//   delta, standardized, alpha_level, power, df ("normal" | "t")
//   bands           [ { param, min, max } ]
//   axis, range     { lo, hi, step }                          (sweep only)

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "crthte/closedform.hpp"
#include "crthte/correlation.hpp"
#include "crthte/designs.hpp"
#include "crthte/engine.hpp"
#include "crthte/errors.hpp"
#include "crthte/scenario.hpp"
#include "crthte/solver.hpp"
#include "crthte/version.hpp"

namespace crthte::api {

using json = nlohmann::ordered_json;

inline constexpr int kSignificantDigits = 10;

inline double round_sig(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", kSignificantDigits, v);
  return std::strtod(buf, nullptr);
}

// Rounds every floating-point number in place.
inline void round_numbers(json& j) {
  if (j.is_number_float()) {
    j = round_sig(j.get<double>());
  } else if (j.is_structured()) {
    for (auto& v : j) round_numbers(v);
  }
}

// ---------------------------------------------------------------------------
// Field access with path-qualified errors
// ---------------------------------------------------------------------------

namespace detail {

inline std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

inline void allow_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ValidationError((path.empty() ? "request" : path) + " must be an object", path);
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) throw ValidationError("unknown field '" + join(path, k) + "'", join(path, k));
}

inline const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return nullptr;
  return &*it;
}

inline std::optional<double> number(const json& obj, const std::string& path, const char* key) {
  const json* v = find(obj, key);
  if (!v) return std::nullopt;
  if (!v->is_number()) throw ValidationError(join(path, key) + " must be a number", join(path, key));
  const double d = v->get<double>();
  if (!std::isfinite(d)) throw ValidationError(join(path, key) + " must be finite", join(path, key));
  return d;
}

inline std::optional<long> integer(const json& obj, const std::string& path, const char* key) {
  const json* v = find(obj, key);
  if (!v) return std::nullopt;
  const std::string p = join(path, key);
  if (v->is_number_integer()) return v->get<long>();
  if (v->is_number_float()) {
    const double d = v->get<double>();
    if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 1e15) return static_cast<long>(d);
  }
  throw ValidationError(p + " must be an integer", p);
}

inline std::optional<std::string> string(const json& obj, const std::string& path, const char* key) {
  const json* v = find(obj, key);
  if (!v) return std::nullopt;
  if (!v->is_string()) throw ValidationError(join(path, key) + " must be a string", join(path, key));
  return v->get<std::string>();
}

inline std::optional<bool> boolean(const json& obj, const std::string& path, const char* key) {
  const json* v = find(obj, key);
  if (!v) return std::nullopt;
  if (!v->is_boolean()) throw ValidationError(join(path, key) + " must be true or false", join(path, key));
  return v->get<bool>();
}

inline std::string canonical(std::string s) {
  for (auto& c : s) c = c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

template <class T>
T choose(const std::string& value, const std::string& path,
         std::initializer_list<std::pair<const char*, T>> options) {
  const std::string v = canonical(value);
  std::string names;
  for (const auto& [name, t] : options) {
    if (v == name) return t;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ValidationError(path + " must be one of: " + names, path);
}

inline const json& object_or_empty(const json& req, const char* key) {
  static const json empty = json::object();
  const json* v = find(req, key);
  return v ? *v : empty;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Request parsing
// ---------------------------------------------------------------------------

struct ParsedRequest {
  SolveRequest solve;
  std::vector<Finding> advisories;
  std::optional<Axis> axis;
  std::optional<Range> range;
  bool has_target = false;
};

namespace detail {

inline void check_probability(double v, const std::string& path, bool open = true) {
  if (open ? !(v > 0.0 && v < 1.0) : !(v >= 0.0 && v <= 1.0))
    throw ValidationError(path + " must lie in " + (open ? "(0, 1)" : "[0, 1]"), path);
}

inline DesignSpec parse_design(const json& d, Scenario& sc, std::optional<long>& n, std::optional<long>& m) {
  const std::string P = "design";
  allow_keys(d, P,
             {"family", "periods", "sequences", "clusters", "cluster_size", "pi", "sampling", "subclusters",
              "randomization_level", "csv", "covariate_effect", "arms"});
  DesignSpec spec;
  const auto fam = string(d, P, "family");
  if (!fam) throw ValidationError("design.family is required", "design.family");
  spec.family = parse_family(canonical(*fam));
  if (auto v = integer(d, P, "periods")) {
    if (*v < 1 || *v > 1000) throw ValidationError("design.periods must lie in [1, 1000]", "design.periods");
    spec.periods = static_cast<int>(*v);
  }
  if (auto v = integer(d, P, "sequences")) {
    if (*v < 1 || *v > 1000) throw ValidationError("design.sequences must lie in [1, 1000]", "design.sequences");
    spec.sequences = static_cast<int>(*v);
  }
  n = integer(d, P, "clusters");
  m = integer(d, P, "cluster_size");
  if (auto v = number(d, P, "pi")) {
    check_probability(*v, "design.pi");
    spec.pi = *v;
  }
  if (auto v = string(d, P, "sampling"))
    spec.sampling = choose<Sampling>(*v, "design.sampling",
                                     {{"cross-sectional", Sampling::cross_sectional},
                                      {"closed-cohort", Sampling::closed_cohort},
                                      {"cohort", Sampling::closed_cohort}});
  if (auto v = integer(d, P, "subclusters")) {
    if (*v < 1 || *v > 1000) throw ValidationError("design.subclusters must lie in [1, 1000]", "design.subclusters");
    spec.n_sub = static_cast<int>(*v);
  } else if (spec.family == DesignFamily::parallel_three_level) {
    throw ValidationError("design.subclusters is required for three-level designs", "design.subclusters");
  }
  if (auto v = string(d, P, "randomization_level"))
    spec.randomization_level = choose<RandomizationLevel>(
        *v, "design.randomization_level",
        {{"cluster", RandomizationLevel::cluster}, {"subcluster", RandomizationLevel::subcluster}});
  if (auto v = string(d, P, "covariate_effect"))
    sc.effect = choose<CovariateEffect>(
        *v, "design.covariate_effect",
        {{"pooled", CovariateEffect::pooled}, {"period-specific", CovariateEffect::period_specific}});
  if (const json* a = find(d, "arms")) {
    const std::string AP = "design.arms";
    allow_keys(*a, AP, {"m_treatment", "m_control", "icc_treatment", "icc_control", "sd_treatment", "sd_control"});
    ArmParams arms;
    arms.m_treatment = integer(*a, AP, "m_treatment").value_or(0);
    arms.m_control = integer(*a, AP, "m_control").value_or(0);
    arms.icc_treatment = number(*a, AP, "icc_treatment").value_or(0.0);
    arms.icc_control = number(*a, AP, "icc_control").value_or(0.0);
    arms.sd_treatment = number(*a, AP, "sd_treatment").value_or(-1.0);
    arms.sd_control = number(*a, AP, "sd_control").value_or(-1.0);
    spec.arm_params = arms;
  }
  if (spec.family == DesignFamily::custom) {
    const auto csv = string(d, P, "csv");
    if (!csv) throw ValidationError("design.csv is required for custom designs", "design.csv");
    const auto parsed = parse_csv(*csv);
    sc.custom = parsed.matrix;
    sc.custom_has_counts = parsed.has_counts;
    if (!n && parsed.has_counts) n = parsed.matrix.total();
  } else if (find(d, "csv")) {
    throw ValidationError("design.csv is only used with the custom family", "design.csv");
  }
  return normalized(spec);
}

inline bool multi_period(const DesignSpec& spec, const Scenario& sc) {
  if (spec.family == DesignFamily::custom) return sc.custom && sc.custom->periods() > 1;
  return is_multi_period(spec.family);
}

inline OutcomeCorrelation parse_outcome_corr(const json& o, const DesignSpec& spec, const Scenario& sc) {
  const std::string P = "outcome";
  const double icc = number(o, P, "icc").value_or(0.0);
  const auto cac = number(o, P, "cac");
  const auto between = number(o, P, "icc_between");
  const auto icc0 = number(o, P, "icc0");
  if (cac && between) throw ValidationError("give either outcome.cac or outcome.icc_between, not both", "outcome.cac");
  if (cac) check_probability(*cac, "outcome.cac", false);
  auto alpha2 = [&] { return cac ? *cac * icc : between.value_or(icc); };

  std::string structure;
  if (auto s = string(o, P, "structure")) {
    structure = canonical(*s);
  } else if (find(o, "icc_treatment") || find(o, "icc_control")) {
    structure = "arm-specific";
  } else if (spec.family == DesignFamily::parallel_three_level) {
    structure = "nested";
  } else if (multi_period(spec, sc)) {
    structure = spec.sampling == Sampling::closed_cohort ? "block" : "nested";
  } else {
    structure = "exchangeable";
  }
  if (structure == "exchangeable") return OutcomeCorrelation::exchangeable(icc);
  if (structure == "nested" || structure == "nested-exchangeable") {
    if (cac) return OutcomeCorrelation::nested_cac(icc, *cac);
    return OutcomeCorrelation::nested(icc, alpha2());
  }
  if (structure == "block" || structure == "block-exchangeable") {
    const double a2 = alpha2();
    if (cac) return OutcomeCorrelation::block_cac(icc0.value_or(a2), icc, *cac);
    return OutcomeCorrelation::block(icc0.value_or(a2), icc, a2);
  }
  if (structure == "arm-specific" || structure == "arm-specific-exchangeable") {
    return OutcomeCorrelation::arm_specific(number(o, P, "icc_control").value_or(icc),
                                            number(o, P, "icc_treatment").value_or(icc));
  }
  throw ValidationError("outcome.structure must be one of: exchangeable, nested, block, arm-specific",
                        "outcome.structure");
}

inline CovariateCorrelation parse_covariate_corr(const json& c, const DesignSpec& spec, const Scenario& sc,
                                                 CovariateLevel level) {
  const std::string P = "covariate";
  const double icc = number(c, P, "icc").value_or(0.0);
  const auto cac = number(c, P, "cac");
  const auto between = number(c, P, "icc_between");
  if (cac && between)
    throw ValidationError("give either covariate.cac or covariate.icc_between, not both", "covariate.cac");
  if (cac) check_probability(*cac, "covariate.cac", false);

  std::string structure;
  if (auto s = string(c, P, "structure")) {
    structure = canonical(*s);
  } else if (level == CovariateLevel::cluster) {
    structure = "cluster-constant";
  } else if (spec.family == DesignFamily::irgt) {
    structure = "independent";
  } else if (spec.family == DesignFamily::parallel_three_level) {
    structure = "nested";
  } else if (multi_period(spec, sc)) {
    structure = spec.sampling == Sampling::closed_cohort ? "cohort-time-invariant" : "nested";
  } else {
    structure = "exchangeable";
  }
  if (level == CovariateLevel::cluster && structure != "cluster-constant")
    throw ValidationError("a cluster-level covariate has the cluster-constant structure", "covariate.structure");
  if (structure == "independent") return CovariateCorrelation::independent();
  if (structure == "exchangeable") return CovariateCorrelation::exchangeable(icc);
  if (structure == "nested" || structure == "nested-exchangeable") {
    if (cac) return CovariateCorrelation::nested_cac(icc, *cac);
    return CovariateCorrelation::nested(icc, between.value_or(icc));
  }
  if (structure == "cluster-constant" || structure == "cluster-level-constant")
    return CovariateCorrelation::cluster_level_constant();
  if (structure == "cohort-time-invariant" || structure == "time-invariant")
    return CovariateCorrelation::cohort_time_invariant(icc);
  throw ValidationError(
      "covariate.structure must be one of: independent, exchangeable, nested, cluster-constant, cohort-time-invariant",
      "covariate.structure");
}

inline void check_findings(const std::vector<Finding>& findings, const std::string& field,
                           std::vector<Finding>& advisories) {
  for (const auto& f : findings) {
    if (f.severity == Severity::hard) throw ValidationError(f.message, field);
    advisories.push_back(f);
  }
}

}  // namespace detail

// Builds the solve request; `for_sweep` relaxes the target requirement.
inline ParsedRequest parse_request(const json& req, bool for_sweep = false) {
  using namespace detail;
  allow_keys(req, "",
             {"target", "design", "outcome", "covariate", "delta", "standardized", "alpha_level", "power", "df",
              "bands", "axis", "range", "schema_version"});
  if (auto v = integer(req, "", "schema_version"); v && *v != kSchemaVersion)
    throw ValidationError("unsupported schema_version " + std::to_string(*v), "schema_version");

  ParsedRequest out;
  SolveRequest& r = out.solve;
  Scenario& sc = r.scenario;

  if (auto t = string(req, "", "target")) {
    r.target = choose<Target>(*t, "target",
                              {{"power", Target::power}, {"n", Target::n}, {"m", Target::m}, {"delta", Target::delta}});
    out.has_target = true;
  } else if (!for_sweep) {
    throw ValidationError("target is required (power, n, m or delta)", "target");
  }

  const json* design = find(req, "design");
  if (!design) throw ValidationError("design is required", "design");
  std::optional<long> n, m;
  sc.design = parse_design(*design, sc, n, m);
  const DesignSpec& spec = sc.design;
  r.n = n;
  r.m = m;

  // Outcome scale.
  const json& o = object_or_empty(req, "outcome");
  allow_keys(o, "outcome",
             {"type", "sd", "prevalence", "icc", "cac", "icc_between", "icc0", "structure", "icc_treatment",
              "icc_control"});
  const bool standardized = boolean(req, "", "standardized").value_or(false);
  const auto otype = string(o, "outcome", "type").value_or("continuous");
  const bool binary_outcome =
      choose<bool>(otype, "outcome.type", {{"continuous", false}, {"binary", true}});
  double sigma = 1.0;
  if (binary_outcome) {
    const auto p = number(o, "outcome", "prevalence");
    if (!p) throw ValidationError("outcome.prevalence is required for a binary outcome", "outcome.prevalence");
    check_probability(*p, "outcome.prevalence");
    sigma = std::sqrt(*p * (1.0 - *p));
  } else if (auto sd = number(o, "outcome", "sd")) {
    if (!(*sd > 0.0)) throw ValidationError("outcome.sd must be positive", "outcome.sd");
    sigma = *sd;
  }
  if (standardized) sigma = 1.0;
  sc.outcome.sigma_yx = sigma;
  sc.outcome.correlation = parse_outcome_corr(o, spec, sc);

  if (sc.design.arm_params) {
    auto& a = *sc.design.arm_params;
    if (a.sd_treatment < 0.0) a.sd_treatment = sigma;
    if (a.sd_control < 0.0) a.sd_control = sigma;
    if (!(a.sd_treatment > 0.0)) throw ValidationError("design.arms.sd_treatment must be positive", "design.arms.sd_treatment");
    if (!(a.sd_control > 0.0)) throw ValidationError("design.arms.sd_control must be positive", "design.arms.sd_control");
    if (a.m_treatment == 0) a.m_treatment = m.value_or(0);
    if (a.m_control == 0) a.m_control = spec.family == DesignFamily::irgt ? 1 : a.m_treatment;
    if (r.target != Target::m && a.m_treatment < 1)
      throw ValidationError("treatment-arm group size is required", "design.arms.m_treatment");
    if (a.m_control < 1 && r.target != Target::m)
      throw ValidationError("control-arm group size must be >= 1", "design.arms.m_control");
    if (!m && a.m_treatment > 0) r.m = a.m_treatment;
  } else if (spec.family == DesignFamily::irgt || spec.family == DesignFamily::parallel_two_level_by_arm) {
    throw ValidationError("design.arms is required for " + std::string(family_name(spec.family)), "design.arms");
  }

  // Covariate.
  const json& c = object_or_empty(req, "covariate");
  allow_keys(c, "covariate", {"type", "level", "mean", "sd", "prevalence", "icc", "cac", "icc_between", "structure"});
  const auto level = choose<CovariateLevel>(string(c, "covariate", "level").value_or("individual"), "covariate.level",
                                            {{"individual", CovariateLevel::individual},
                                             {"cluster", CovariateLevel::cluster}});
  const auto corr = parse_covariate_corr(c, spec, sc, level);
  const auto ctype = string(c, "covariate", "type").value_or("continuous");
  if (choose<bool>(ctype, "covariate.type", {{"continuous", false}, {"binary", true}})) {
    const auto p = number(c, "covariate", "prevalence");
    if (!p) throw ValidationError("covariate.prevalence is required for a binary covariate", "covariate.prevalence");
    check_probability(*p, "covariate.prevalence");
    sc.covariate = CovariateModel::binary(*p, corr);
  } else {
    const double sd = number(c, "covariate", "sd").value_or(1.0);
    if (!(sd > 0.0)) throw ValidationError("covariate.sd must be positive", "covariate.sd");
    sc.covariate = CovariateModel::continuous(number(c, "covariate", "mean").value_or(0.0), sd, corr);
  }
  sc.covariate.level = level;

  // Targets and test settings.
  const auto delta = number(req, "", "delta");
  if (delta) r.delta = *delta;
  if (auto v = number(req, "", "alpha_level")) {
    check_probability(*v, "alpha_level");
    r.alpha_level = *v;
  }
  if (auto v = number(req, "", "power")) {
    check_probability(*v, "power");
    r.power = *v;
  }
  if (auto v = string(req, "", "df"))
    r.df_mode = choose<DfMode>(*v, "df", {{"normal", DfMode::normal}, {"t", DfMode::t_n_minus_2}});

  if (const json* b = find(req, "bands")) {
    if (!b->is_array()) throw ValidationError("bands must be an array", "bands");
    for (std::size_t i = 0; i < b->size(); ++i) {
      const std::string BP = "bands[" + std::to_string(i) + "]";
      allow_keys((*b)[i], BP, {"param", "min", "max"});
      Band band;
      band.param = string((*b)[i], BP, "param").value_or("");
      std::replace(band.param.begin(), band.param.end(), '-', '_');
      const auto lo = number((*b)[i], BP, "min");
      const auto hi = number((*b)[i], BP, "max");
      if (!lo || !hi) throw ValidationError(BP + " needs min and max", BP);
      band.lo = *lo;
      band.hi = *hi;
      with_parameter(sc, band.param, band.lo);  // validates the parameter name
      r.bands.push_back(band);
    }
  }

  if (auto a = string(req, "", "axis")) out.axis = parse_axis(*a);
  if (const json* rg = find(req, "range")) {
    allow_keys(*rg, "range", {"lo", "hi", "step"});
    Range range;
    const auto lo = number(*rg, "range", "lo");
    const auto hi = number(*rg, "range", "hi");
    if (!lo || !hi) throw ValidationError("range needs lo and hi", "range");
    range.lo = *lo;
    range.hi = *hi;
    range.step = number(*rg, "range", "step").value_or(1.0);
    out.range = range;
  }

  const bool delta_free = for_sweep ? out.axis == Axis::delta_vs_power : r.target == Target::delta;
  if (!delta && !delta_free) throw ValidationError("delta is required", "delta");

  // Correlation validity over the cluster sizes this request can touch.
  const long J = std::max<long>(1, dimension_factor(sc));
  long m_lo = 1, m_hi = std::max(1L, sc.dimension_cap / J);
  const bool m_free = r.target == Target::m || (for_sweep && out.axis &&
                                                 (*out.axis == Axis::m_vs_power || *out.axis == Axis::m_vs_n));
  if (!m_free && r.m) m_lo = m_hi = *r.m;
  if (m_free && out.range && for_sweep) {
    m_lo = std::max(1L, static_cast<long>(std::floor(out.range->lo)));
    m_hi = std::max(m_lo, static_cast<long>(std::ceil(out.range->hi)));
  }
  if (sc.outcome.correlation.kind != OutcomeKind::arm_specific_exchangeable || !sc.design.arm_params) {
    if (spec.family != DesignFamily::irgt && spec.family != DesignFamily::parallel_two_level_by_arm)
      check_findings(validate(sc.outcome.correlation, m_lo, m_hi, J), "outcome.icc", out.advisories);
  }
  if (sc.design.arm_params) {
    const auto& a = *sc.design.arm_params;
    const long m1 = r.target == Target::m ? m_hi : std::max(1L, a.m_treatment);
    check_findings(validate(OutcomeCorrelation::exchangeable(a.icc_treatment), 1, m1, 1), "design.arms.icc_treatment",
                   out.advisories);
    check_findings(validate(OutcomeCorrelation::exchangeable(a.icc_control), 1, std::max(1L, a.m_control), 1),
                   "design.arms.icc_control", out.advisories);
  }
  check_findings(validate(sc.covariate.correlation, m_lo, m_hi, J), "covariate.icc", out.advisories);
  return out;
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

inline json variance_json(const VarianceReport& v) {
  json j;
  j["var_hte_total"] = v.var_hte_total;
  j["sigma2_hte_norm"] = v.sigma2_hte_norm;
  if (v.estimable_ate) {
    j["var_ate_total"] = v.var_ate_total;
    j["sigma2_ate_norm"] = v.sigma2_ate_norm;
    j["design_effect_hte"] = v.design_effect_hte;
  } else {
    j["var_ate_total"] = nullptr;
    j["sigma2_ate_norm"] = nullptr;
    j["design_effect_hte"] = nullptr;
  }
  j["estimable"] = {{"ate", v.estimable_ate}, {"hte", v.estimable_hte}};
  return j;
}

inline json matrix_json(const TreatmentMatrix& tm) {
  json rows = json::array();
  for (const auto& row : tm.rows) {
    json r = json::array();
    for (auto w : row) r.push_back(static_cast<int>(w));
    rows.push_back(r);
  }
  return {{"sequences", tm.sequences()},
          {"periods", tm.periods()},
          {"matrix", rows},
          {"clusters_per_sequence", tm.clusters_per_sequence}};
}

// The treatment matrix realized at n clusters.
inline TreatmentMatrix realized_matrix(const Scenario& sc, long n) {
  if (sc.design.family == DesignFamily::custom) {
    TreatmentMatrix tm = *sc.custom;
    if (!sc.custom_has_counts || n != tm.total()) tm.clusters_per_sequence = crthte::detail::allocate_custom(n, *sc.custom);
    return tm;
  }
  auto d = sc.design;
  d.n_total = n;
  return generate(d);
}

inline json findings_json(const std::vector<Finding>& findings) {
  json a = json::array();
  for (const auto& f : findings)
    a.push_back({{"severity", f.severity == Severity::hard ? "hard" : "advisory"}, {"code", f.code}, {"message", f.message}});
  return a;
}

inline json result_json(const ParsedRequest& pr, const SolveResult& res) {
  const Scenario& sc = pr.solve.scenario;
  json j;
  j["target"] = std::string(target_name(res.target));
  if (res.target == Target::n || res.target == Target::m)
    j["solved_value"] = static_cast<long>(res.solved_value);
  else
    j["solved_value"] = res.solved_value;
  if (res.target == Target::power) j["power"] = res.achieved_power;
  j["achieved_power"] = res.achieved_power;
  j["n"] = res.n;
  j["m"] = res.m;
  j["delta"] = res.delta;
  j["alpha_level"] = pr.solve.alpha_level;
  j["df"] = pr.solve.df_mode == DfMode::normal ? "normal" : "t";
  if (res.target != Target::power) j["target_power"] = pr.solve.power;
  j["total_individuals"] = static_cast<long>(std::llround(total_individuals(sc, res.m, res.n)));
  j["variance"] = variance_json(res.variance);
  json design = {{"family", std::string(family_name(sc.design.family))},
                 {"sampling", sc.design.sampling == Sampling::closed_cohort ? "closed-cohort" : "cross-sectional"},
                 {"pi", sc.design.pi},
                 {"covariate_effect",
                  effective_effect(sc) == CovariateEffect::pooled ? "pooled" : "period-specific"}};
  if (sc.design.family == DesignFamily::parallel_three_level) {
    design["subclusters"] = sc.design.n_sub;
    design["randomization_level"] =
        sc.design.randomization_level == RandomizationLevel::subcluster ? "subcluster" : "cluster";
  }
  design["treatment"] = matrix_json(realized_matrix(sc, res.n));
  j["design"] = design;
  j["warnings"] = findings_json(pr.advisories);
  round_numbers(j);
  return j;
}

inline json solve_json(const json& req) {
  const auto pr = parse_request(req);
  return result_json(pr, solve(pr.solve));
}

inline json series_json(const std::vector<Series>& series) {
  json out = json::array();
  for (const auto& s : series) {
    json pts = json::array();
    for (const auto& p : s.points) pts.push_back({{"x", p.x}, {"y", p.y ? json(*p.y) : json(nullptr)}});
    out.push_back({{"label", s.label}, {"points", pts}});
  }
  return out;
}

inline std::vector<Series> series_from_json(const json& j) {
  std::vector<Series> out;
  for (const auto& s : j) {
    Series series;
    series.label = s.at("label").get<std::string>();
    for (const auto& p : s.at("points"))
      series.points.push_back({p.at("x").get<double>(),
                               p.at("y").is_null() ? std::nullopt : std::optional<double>(p.at("y").get<double>())});
    out.push_back(std::move(series));
  }
  return out;
}

inline json sweep_json(const json& req) {
  auto pr = parse_request(req, true);
  if (!pr.axis) throw ValidationError("axis is required", "axis");
  if (!pr.range) throw ValidationError("range is required", "range");
  const auto series = sweep(pr.solve, *pr.axis, *pr.range);
  json j;
  j["axis"] = std::string(axis_name(*pr.axis));
  j["x"] = *pr.axis == Axis::m_vs_power || *pr.axis == Axis::m_vs_n ? "m"
           : *pr.axis == Axis::n_vs_power                          ? "n"
                                                                   : "delta";
  j["y"] = *pr.axis == Axis::m_vs_n ? "n" : "power";
  j["series"] = series_json(series);
  j["warnings"] = findings_json(pr.advisories);
  round_numbers(j);
  return j;
}

// CSV form of a sweep: x,y,band_label; infeasible points leave y empty.
inline std::string series_csv(const json& sweep_result) {
  std::string out = "x,y,band_label\n";
  char buf[64];
  auto num = [&](const json& v) {
    if (v.is_null()) return std::string();
    if (v.is_number_integer()) return std::to_string(v.get<long>());
    std::snprintf(buf, sizeof buf, "%.*g", kSignificantDigits, v.get<double>());
    return std::string(buf);
  };
  for (const auto& s : sweep_result.at("series"))
    for (const auto& p : s.at("points"))
      out += num(p.at("x")) + "," + num(p.at("y")) + "," + s.at("label").get<std::string>() + "\n";
  return out;
}

// Runs every check and returns findings instead of throwing on hard ones.
inline json validate_json(const json& req) {
  json j;
  try {
    const auto pr = parse_request(req, true);
    j["valid"] = true;
    j["findings"] = findings_json(pr.advisories);
  } catch (const ValidationError& e) {
    j["valid"] = false;
    j["findings"] = json::array({{{"severity", "hard"}, {"code", "validation"}, {"message", e.what()}, {"field", e.field()}}});
  }
  return j;
}

inline json design_parse_json(const std::string& csv) {
  const auto parsed = parse_csv(csv);
  json j = matrix_json(parsed.matrix);
  j["has_counts"] = parsed.has_counts;
  j["lines"] = parsed.lines;
  j["csv"] = emit_csv(parsed.matrix);
  return j;
}

// ---------------------------------------------------------------------------
// Envelopes
// ---------------------------------------------------------------------------

inline json envelope_ok(json result) {
  json j;
  j["status"] = "ok";
  j["schema_version"] = kSchemaVersion;
  j["api_version"] = kApiVersion;
  j["version"] = kVersion;
  j["result"] = std::move(result);
  return j;
}

struct ErrorInfo {
  std::string code;
  int http_status = 500;
  int exit_code = 1;
  json body;
};

inline ErrorInfo describe_error(const std::exception& ex) {
  ErrorInfo info;
  json err;
  if (auto* v = dynamic_cast<const ValidationError*>(&ex)) {
    info = {"validation_error", 422, 2, {}};
    err["field"] = v->field();
  } else if (auto* p = dynamic_cast<const ParseError*>(&ex)) {
    info = {"parse_error", 400, 4, {}};
    err["line"] = p->line();
    err["column"] = p->column();
  } else if (auto* f = dynamic_cast<const InfeasibleError*>(&ex)) {
    info = {"infeasible", 409, 3, {}};
    if (f->asymptotic_power() >= 0.0) err["asymptotic_power"] = round_sig(f->asymptotic_power());
  } else if (auto* i = dynamic_cast<const InestimableError*>(&ex)) {
    info = {"inestimable", 422, 2, {}};
    err["field"] = "design";
    err["coordinate"] = i->coordinate();
  } else if (dynamic_cast<const ResourceError*>(&ex)) {
    info = {"resource_limit", 422, 2, {}};
  } else if (dynamic_cast<const json::exception*>(&ex)) {
    info = {"parse_error", 400, 4, {}};
  } else {
    info = {"internal_error", 500, 1, {}};
  }
  json body;
  body["status"] = "error";
  body["schema_version"] = kSchemaVersion;
  body["api_version"] = kApiVersion;
  body["version"] = kVersion;
  json e;
  e["code"] = info.code;
  e["message"] = ex.what();
  for (auto& [k, v] : err.items()) e[k] = v;
  body["error"] = e;
  info.body = body;
  return info;
}

}  // namespace crthte::api
