#pragma once

// Command-line front end. Flags are translated into the same JSON request the
// HTTP service accepts, then evaluated through the shared api layer.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crthte/api.hpp"
#include "crthte/closedform.hpp"
#include "crthte/montecarlo.hpp"

namespace crthte::cli {

using json = api::json;

enum class Kind { number, integer, text, flag, range, band, file };

struct FlagDef {
  const char* name;  // without leading dashes
  const char* path;  // request path, band parameter, or file target
  Kind kind;
  const char* help;
};

inline const std::vector<FlagDef>& flag_table() {
  static const std::vector<FlagDef> table = {
      {"design", "design.family", Kind::text,
       "parallel, parallel-by-arm, three-level, multi-period-parallel, crxo-two-period, crxo-multi-period, "
       "stepped-wedge, irgt, custom"},
      {"periods", "design.periods", Kind::integer, "number of periods J"},
      {"sequences", "design.sequences", Kind::integer, "number of sequences S"},
      {"clusters", "design.clusters", Kind::integer, "number of clusters n"},
      {"cluster-size", "design.cluster_size", Kind::integer, "cluster-period size m"},
      {"pi", "design.pi", Kind::number, "proportion of clusters in the first sequence"},
      {"sampling", "design.sampling", Kind::text, "cross-sectional or closed-cohort"},
      {"subclusters", "design.subclusters", Kind::integer, "subclusters per cluster (three-level)"},
      {"randomization-level", "design.randomization_level", Kind::text, "cluster or subcluster (three-level)"},
      {"covariate-effect", "design.covariate_effect", Kind::text, "pooled or period-specific covariate slope"},
      {"m-treatment", "design.arms.m_treatment", Kind::integer, "treatment-arm cluster size"},
      {"m-control", "design.arms.m_control", Kind::integer, "control-arm cluster size"},
      {"icc-treatment", "design.arms.icc_treatment", Kind::number, "treatment-arm outcome ICC"},
      {"icc-control", "design.arms.icc_control", Kind::number, "control-arm outcome ICC"},
      {"sd-treatment", "design.arms.sd_treatment", Kind::number, "treatment-arm outcome SD"},
      {"sd-control", "design.arms.sd_control", Kind::number, "control-arm outcome SD"},
      {"design-csv", "design.csv", Kind::file, "treatment-matrix CSV for a custom design"},
      {"outcome-type", "outcome.type", Kind::text, "continuous or binary"},
      {"outcome-sd", "outcome.sd", Kind::number, "outcome SD (conditional on the covariate)"},
      {"outcome-prevalence", "outcome.prevalence", Kind::number, "binary outcome prevalence"},
      {"outcome-structure", "outcome.structure", Kind::text, "exchangeable, nested, block or arm-specific"},
      {"icc-outcome", "outcome.icc", Kind::number, "within-period outcome ICC"},
      {"cac-outcome", "outcome.cac", Kind::number, "outcome cluster autocorrelation"},
      {"icc0-outcome", "outcome.icc0", Kind::number, "within-individual outcome correlation (closed cohort)"},
      {"icc-between-outcome", "outcome.icc_between", Kind::number, "between-period outcome ICC"},
      {"covariate-type", "covariate.type", Kind::text, "continuous or binary"},
      {"covariate-level", "covariate.level", Kind::text, "individual or cluster"},
      {"covariate-structure", "covariate.structure", Kind::text,
       "independent, exchangeable, nested, cluster-constant or cohort-time-invariant"},
      {"prevalence", "covariate.prevalence", Kind::number, "binary covariate prevalence"},
      {"covariate-sd", "covariate.sd", Kind::number, "continuous covariate SD"},
      {"covariate-mean", "covariate.mean", Kind::number, "continuous covariate mean"},
      {"icc-covariate", "covariate.icc", Kind::number, "within-period covariate ICC"},
      {"cac-covariate", "covariate.cac", Kind::number, "covariate cluster autocorrelation"},
      {"icc-between-covariate", "covariate.icc_between", Kind::number, "between-period covariate ICC"},
      {"delta", "delta", Kind::number, "HTE effect size"},
      {"standardized", "standardized", Kind::flag, "treat delta as standardized (outcome SD 1)"},
      {"alpha", "alpha_level", Kind::number, "two-sided significance level"},
      {"power", "power", Kind::number, "target power"},
      {"df", "df", Kind::text, "normal or t (n - 2 degrees of freedom)"},
      {"axis", "axis", Kind::text, "m_vs_power, n_vs_power, m_vs_n or delta_vs_power"},
      {"range", "range", Kind::range, "sweep range lo,hi[,step]"},
      {"icc-outcome-range", "outcome_icc", Kind::band, "outcome ICC band lo,hi"},
      {"cac-outcome-range", "outcome_cac", Kind::band, "outcome CAC band lo,hi"},
      {"icc-covariate-range", "covariate_icc", Kind::band, "covariate ICC band lo,hi"},
      {"cac-covariate-range", "covariate_cac", Kind::band, "covariate CAC band lo,hi"},
  };
  return table;
}

// Flag name for a request field path, for error messages.
inline std::string flag_for(const std::string& field) {
  if (field.empty()) return {};
  for (const auto& f : flag_table())
    if (field == f.path) return std::string("--") + f.name;
  if (field.rfind("bands", 0) == 0) return "--icc-outcome-range";
  if (field == "target") return "subcommand";
  if (field == "design.arms") return "--m-treatment";
  return field;
}

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double to_number(const std::string& text, const std::string& flag) {
  const char* b = text.c_str();
  char* end = nullptr;
  const double v = std::strtod(b, &end);
  if (text.empty() || end == b || *end != '\0' || !std::isfinite(v))
    throw ValidationError(flag + ": expected a number, got '" + text + "'", "");
  return v;
}

inline long to_integer(const std::string& text, const std::string& flag) {
  const double v = to_number(text, flag);
  if (v != std::floor(v) || std::abs(v) > 1e15)
    throw ValidationError(flag + ": expected an integer, got '" + text + "'", "");
  return static_cast<long>(v);
}

inline void set_path(json& root, const std::string& path, json value) {
  json* node = &root;
  std::size_t start = 0;
  for (std::size_t dot = path.find('.'); dot != std::string::npos; dot = path.find('.', start)) {
    node = &(*node)[path.substr(start, dot - start)];
    start = dot + 1;
  }
  (*node)[path.substr(start)] = std::move(value);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

// Builds the request body from raw flag values (keyed by flag name). Flags
// are visited in table order so the body is independent of argv order.
inline json build_request(const std::map<std::string, std::string>& values, const std::string& target) {
  json req = json::object();
  if (!target.empty()) req["target"] = target;
  for (const auto& f : flag_table()) {
    auto it = values.find(f.name);
    if (it == values.end()) continue;
    const std::string flag = std::string("--") + f.name;
    const std::string& v = it->second;
    switch (f.kind) {
      case Kind::number: detail::set_path(req, f.path, detail::to_number(v, flag)); break;
      case Kind::integer: detail::set_path(req, f.path, detail::to_integer(v, flag)); break;
      case Kind::text: detail::set_path(req, f.path, v); break;
      case Kind::flag: detail::set_path(req, f.path, true); break;
      case Kind::file: detail::set_path(req, f.path, detail::read_file(v)); break;
      case Kind::range: {
        const auto parts = detail::split(v, ',');
        if (parts.size() != 2 && parts.size() != 3)
          throw ValidationError(flag + ": expected lo,hi[,step], got '" + v + "'", "range");
        json r = {{"lo", detail::to_number(parts[0], flag)}, {"hi", detail::to_number(parts[1], flag)}};
        if (parts.size() == 3) r["step"] = detail::to_number(parts[2], flag);
        req["range"] = r;
        break;
      }
      case Kind::band: {
        const auto parts = detail::split(v, ',');
        if (parts.size() != 2) throw ValidationError(flag + ": expected lo,hi, got '" + v + "'", "bands");
        req["bands"].push_back({{"param", f.path},
                                {"min", detail::to_number(parts[0], flag)},
                                {"max", detail::to_number(parts[1], flag)}});
        break;
      }
    }
  }
  if (values.count("design-csv") && !values.count("design")) req["design"]["family"] = "custom";
  return req;
}

// ---------------------------------------------------------------------------
// Output formatting
// ---------------------------------------------------------------------------

enum class Format { human, json, csv };

inline Format parse_format(std::string s) {
  if (s == "human") return Format::human;
  if (s == "json") return Format::json;
  if (s == "csv") return Format::csv;
  throw ValidationError("--format must be human, json or csv", "format");
}

inline std::string number_text(const json& v) {
  if (v.is_null()) return "n/a";
  if (v.is_number_integer()) return std::to_string(v.get<long>());
  if (v.is_number()) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.*g", api::kSignificantDigits, v.get<double>());
    return buf;
  }
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

inline std::string human_solve(const json& r) {
  std::ostringstream os;
  auto row = [&](const std::string& k, const json& v) { os << std::left << std::setw(26) << k << number_text(v) << "\n"; };
  const auto& d = r["design"];
  row("design", d["family"]);
  row("target", r["target"]);
  row("solved value", r["solved_value"]);
  row("power", r["achieved_power"]);
  row("clusters (n)", r["n"]);
  row("cluster-period size (m)", r["m"]);
  row("delta", r["delta"]);
  row("total individuals (N)", r["total_individuals"]);
  const auto& v = r["variance"];
  row("Var(HTE estimator)", v["var_hte_total"]);
  row("sigma2 HTE (per cluster)", v["sigma2_hte_norm"]);
  row("Var(ATE estimator)", v["var_ate_total"]);
  row("sigma2 ATE (per cluster)", v["sigma2_ate_norm"]);
  row("HTE design effect", v["design_effect_hte"]);
  os << "treatment matrix (clusters: pattern)\n";
  const auto& t = d["treatment"];
  for (std::size_t s = 0; s < t["matrix"].size(); ++s) {
    os << "  " << std::setw(6) << std::right << number_text(t["clusters_per_sequence"][s]) << ": ";
    for (const auto& w : t["matrix"][s]) os << w.get<int>();
    os << "\n";
  }
  for (const auto& w : r["warnings"]) os << "warning: " << w["message"].get<std::string>() << "\n";
  return os.str();
}

inline std::string csv_solve(const json& r) {
  const auto& v = r["variance"];
  std::vector<std::pair<std::string, json>> cols = {
      {"target", r["target"]},
      {"solved_value", r["solved_value"]},
      {"achieved_power", r["achieved_power"]},
      {"n", r["n"]},
      {"m", r["m"]},
      {"delta", r["delta"]},
      {"total_individuals", r["total_individuals"]},
      {"var_hte_total", v["var_hte_total"]},
      {"sigma2_hte_norm", v["sigma2_hte_norm"]},
      {"var_ate_total", v["var_ate_total"]},
      {"sigma2_ate_norm", v["sigma2_ate_norm"]},
      {"design_effect_hte", v["design_effect_hte"]},
  };
  std::string head, body;
  for (const auto& [k, val] : cols) {
    head += (head.empty() ? "" : ",") + k;
    body += (body.empty() ? "" : ",") + (val.is_null() ? std::string() : number_text(val));
  }
  return head + "\n" + body + "\n";
}

inline std::string human_sweep(const json& r) {
  std::ostringstream os;
  os << "axis " << r["axis"].get<std::string>() << " (" << r["x"].get<std::string>() << " vs "
     << r["y"].get<std::string>() << ")\n";
  for (const auto& s : r["series"]) {
    os << "[" << s["label"].get<std::string>() << "]\n";
    for (const auto& p : s["points"])
      os << "  " << std::setw(12) << number_text(p["x"]) << "  " << (p["y"].is_null() ? "infeasible" : number_text(p["y"]))
         << "\n";
  }
  for (const auto& w : r["warnings"]) os << "warning: " << w["message"].get<std::string>() << "\n";
  return os.str();
}

inline std::string human_matrix(const json& r) {
  std::ostringstream os;
  os << r["sequences"].get<int>() << " sequences x " << r["periods"].get<int>() << " periods\n";
  for (std::size_t s = 0; s < r["matrix"].size(); ++s) {
    os << "  " << std::setw(6) << number_text(r["clusters_per_sequence"][s]) << ": ";
    for (const auto& w : r["matrix"][s]) os << w.get<int>();
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitInfeasible = 3;
inline constexpr int kExitParse = 4;

struct Outcome {
  int exit_code = kExitOk;
  std::string document;
};

namespace detail {

inline Outcome error_outcome(const std::exception& ex, Format format, std::ostream& err) {
  auto info = api::describe_error(ex);
  std::string msg = ex.what();
  if (auto* v = dynamic_cast<const ValidationError*>(&ex); v && !v->field().empty()) {
    const std::string flag = flag_for(v->field());
    msg = flag + ": " + msg;
    info.body["error"]["flag"] = flag;
  }
  err << "error: " << msg << "\n";
  Outcome out;
  out.exit_code = info.exit_code;
  if (format == Format::json) out.document = info.body.dump(2) + "\n";
  return out;
}

inline std::string envelope(const json& result) { return api::envelope_ok(result).dump(2) + "\n"; }

}  // namespace detail

struct Invocation {
  std::string command;     // power, solve-n, ..., design gen
  std::map<std::string, std::string> values;
  Format format = Format::human;
  std::string out_path;
  long reps = 1000;
  std::uint64_t seed = 1;
  std::string replicates_path;
};

inline Outcome execute(const Invocation& inv, std::ostream& err) {
  try {
    const std::string& c = inv.command;
    static const std::map<std::string, std::string> targets = {
        {"power", "power"}, {"solve-n", "n"}, {"solve-m", "m"}, {"solve-delta", "delta"}};
    if (auto t = targets.find(c); t != targets.end()) {
      const json result = api::solve_json(build_request(inv.values, t->second));
      switch (inv.format) {
        case Format::json: return {kExitOk, detail::envelope(result)};
        case Format::csv: return {kExitOk, csv_solve(result)};
        case Format::human: return {kExitOk, human_solve(result)};
      }
    }
    if (c == "sweep") {
      const json result = api::sweep_json(build_request(inv.values, ""));
      switch (inv.format) {
        case Format::json: return {kExitOk, detail::envelope(result)};
        case Format::csv: return {kExitOk, api::series_csv(result)};
        case Format::human: return {kExitOk, human_sweep(result)};
      }
    }
    if (c == "validate") {
      const json result = api::validate_json(build_request(inv.values, ""));
      const int code = result["valid"].get<bool>() ? kExitOk : kExitValidation;
      if (inv.format == Format::json) return {code, detail::envelope(result)};
      std::ostringstream os;
      os << (code == kExitOk ? "valid" : "invalid") << "\n";
      for (const auto& f : result["findings"]) {
        os << f["severity"].get<std::string>() << ": ";
        if (f.contains("field")) os << flag_for(f["field"].get<std::string>()) << ": ";
        os << f["message"].get<std::string>() << "\n";
      }
      return {code, os.str()};
    }
    if (c == "design gen") {
      json req = build_request(inv.values, "power");
      if (!req.contains("delta")) req["delta"] = 0.0;
      auto pr = api::parse_request(req, true);
      if (!pr.solve.n) throw ValidationError("number of clusters is required", "design.clusters");
      const auto tm = api::realized_matrix(pr.solve.scenario, *pr.solve.n);
      if (inv.format == Format::json) return {kExitOk, detail::envelope(api::matrix_json(tm))};
      return {kExitOk, emit_csv(tm) + "\n"};
    }
    if (c == "design check") {
      auto it = inv.values.find("design-csv");
      if (it == inv.values.end()) throw ValidationError("a design CSV is required", "design.csv");
      const json result = api::design_parse_json(detail::read_file(it->second));
      if (inv.format == Format::json) return {kExitOk, detail::envelope(result)};
      if (inv.format == Format::csv) return {kExitOk, result["csv"].get<std::string>() + "\n"};
      return {kExitOk, human_matrix(result)};
    }
    if (c == "simulate") {
      auto pr = api::parse_request(build_request(inv.values, "power"));
      const auto& r = pr.solve;
      if (!r.n) throw ValidationError("number of clusters is required", "design.clusters");
      SimulationConfig cfg{r.scenario, *r.n, r.m.value_or(0), r.delta};
      const auto ep = empirical_power(cfg, r.alpha_level, inv.reps, inv.seed, !inv.replicates_path.empty());
      if (!inv.replicates_path.empty()) {
        std::ofstream f(inv.replicates_path);
        if (!f) throw Error("cannot write " + inv.replicates_path);
        write_replicates_csv(f, ep.replicates);
      }
      json result = {{"rate", ep.rate},           {"mc_se", ep.mc_se}, {"reps", ep.reps},
                     {"rejections", ep.rejections}, {"analytic_power", ep.analytic_power},
                     {"n", *r.n},                 {"m", r.m.value_or(0)}, {"delta", r.delta},
                     {"alpha_level", r.alpha_level}, {"seed", inv.seed}};
      api::round_numbers(result);
      if (inv.format == Format::json) return {kExitOk, detail::envelope(result)};
      std::ostringstream os;
      if (inv.format == Format::csv) {
        os << "rate,mc_se,reps,rejections,analytic_power\n"
           << number_text(result["rate"]) << "," << number_text(result["mc_se"]) << "," << ep.reps << ","
           << ep.rejections << "," << number_text(result["analytic_power"]) << "\n";
      } else {
        os << "empirical power   " << number_text(result["rate"]) << " (MC SE " << number_text(result["mc_se"])
           << ", " << ep.rejections << "/" << ep.reps << " rejections)\n"
           << "analytic power    " << number_text(result["analytic_power"]) << "\n";
      }
      return {kExitOk, os.str()};
    }
    if (c == "conformance") {
      if (inv.format == Format::human) return {kExitOk, conformance_markdown()};
      json rows = json::array();
      for (const auto& reg : register_all())
        rows.push_back({{"id", reg.id},
                        {"registered", reg.registered},
                        {"matching_mappings", reg.matching_mappings},
                        {"candidates", reg.candidates},
                        {"max_rel_error", reg.max_rel_error},
                        {"points", reg.points}});
      api::round_numbers(rows);
      return {kExitOk, detail::envelope(rows)};
    }
    throw ValidationError("unknown command '" + c + "'", "");
  } catch (const std::exception& ex) {
    return detail::error_outcome(ex, inv.format, err);
  }
}

// Parses argv (without the program name) and runs the command. The document
// goes to `out` or to --out.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Power and sample size for heterogeneity of treatment effect analyses in cluster-randomized trials",
               "crthte"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  Invocation inv;
  std::string format;
  if (const char* env = std::getenv("CRTHTE_FORMAT")) format = env;
  std::map<std::string, std::string> raw;

  auto add_common = [&](CLI::App* sub, bool design_flags, bool sim_flags) {
    sub->add_option("--format", format, "human, json or csv (default from CRTHTE_FORMAT, else human)");
    sub->add_option("--out", inv.out_path, "write the document to this path");
    if (design_flags) {
      for (const auto& f : flag_table()) {
        const std::string name = std::string("--") + f.name;
        if (f.kind == Kind::flag) {
          sub->add_flag_callback(name, [&raw, n = std::string(f.name)] { raw[n] = "true"; }, f.help);
        } else {
          sub->add_option_function<std::string>(name, [&raw, n = std::string(f.name)](const std::string& v) {
            raw[n] = v;
          }, f.help);
        }
      }
    }
    if (sim_flags) {
      sub->add_option("--reps", inv.reps, "Monte Carlo replicates")->check(CLI::Range(100L, 10000000L));
      sub->add_option("--seed", inv.seed, "master seed");
      sub->add_option("--replicates", inv.replicates_path, "write one CSV row per replicate to this path");
    }
  };

  std::vector<std::pair<CLI::App*, std::string>> commands;
  for (const char* name : {"power", "solve-n", "solve-m", "solve-delta", "sweep", "validate", "simulate"}) {
    static const std::map<std::string, std::string> about = {
        {"power", "power at given n, m and delta"},
        {"solve-n", "smallest number of clusters reaching the target power"},
        {"solve-m", "smallest cluster-period size reaching the target power"},
        {"solve-delta", "detectable HTE effect size at the target power"},
        {"sweep", "power or sample-size series for plotting"},
        {"validate", "check inputs without solving"},
        {"simulate", "Monte Carlo empirical power"}};
    auto* sub = app.add_subcommand(name, about.at(name));
    add_common(sub, true, std::string(name) == "simulate");
    commands.emplace_back(sub, name);
  }
  auto* design = app.add_subcommand("design", "treatment-matrix generation and CSV checks");
  design->require_subcommand(1);
  auto* gen = design->add_subcommand("gen", "emit the treatment matrix for a design family");
  add_common(gen, true, false);
  commands.emplace_back(gen, "design gen");
  auto* check = design->add_subcommand("check", "parse and validate a design CSV");
  add_common(check, false, false);
  check->add_option_function<std::string>("--design-csv", [&raw](const std::string& v) { raw["design-csv"] = v; },
                                          "design CSV path")
      ->required();
  commands.emplace_back(check, "design check");
  auto* conf = app.add_subcommand("conformance", "closed-form registration report");
  add_common(conf, false, false);
  commands.emplace_back(conf, "conformance");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitParse;
  }

  for (const auto& [sub, name] : commands)
    if (sub->parsed()) inv.command = name;
  try {
    inv.format = format.empty() ? Format::human : parse_format(format);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  inv.values = raw;

  const Outcome res = execute(inv, err);
  if (inv.out_path.empty()) {
    out << res.document;
  } else if (!res.document.empty()) {
    std::ofstream f(inv.out_path, std::ios::binary);
    if (!(f << res.document)) {
      err << "error: cannot write " << inv.out_path << "\n";
      return kExitError;
    }
  }
  return res.exit_code;
}

}  // namespace crthte::cli
