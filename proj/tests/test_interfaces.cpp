#include <catch_amalgamated.hpp>

#include <fstream>
#include <sstream>
#include <thread>

#include "crthte/api.hpp"
#include "crthte/cli.hpp"
#include "crthte/service.hpp"
#include "golden_cases.hpp"

using namespace crthte;
using json = nlohmann::ordered_json;
using Catch::Approx;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json without_version(json j) {
  j.erase("version");
  return j;
}

const std::string kSource = CRTHTE_SOURCE_DIR;

}  // namespace

TEST_CASE("golden command lines reproduce their documents", "[cli]") {
  for (const auto& c : golden::cases(kSource)) {
    INFO(c.name);
    const auto r = cli_run(c.args);
    REQUIRE(r.code == 0);
    const auto expect = json::parse(slurp(kSource + "/tests/golden/" + c.name + ".json"));
    const auto got = json::parse(r.out);
    REQUIRE(without_version(got).dump(2) == without_version(expect).dump(2));
    REQUIRE(cli_run(c.args).out == r.out);  // deterministic across runs
  }
}

TEST_CASE("golden values", "[cli]") {
  const auto cases = golden::cases(kSource);
  auto result = [&](std::size_t i) { return json::parse(cli_run(cases[i].args).out)["result"]; };
  REQUIRE(result(0)["solved_value"] == 353);
  REQUIRE(result(1)["solved_value"] == 35);
  REQUIRE(result(2)["power"].get<double>() == Approx(0.025).margin(1e-10));
  REQUIRE(std::abs(result(3)["solved_value"].get<long>() - 32) <= 1);
}

TEST_CASE("CLI and API produce identical result payloads", "[cli][api]") {
  for (const auto& c : golden::cases(kSource)) {
    INFO(c.name);
    const auto cli_doc = json::parse(cli_run(c.args).out);
    const auto body = json::parse(slurp(kSource + "/samples/" + c.sample + ".json"));
    REQUIRE(cli_doc["result"].dump() == api::solve_json(body).dump());
    const auto resp = service::handle("POST", "/api/v1/solve", body.dump());
    REQUIRE(resp.status == 200);
    REQUIRE(json::parse(resp.body)["result"].dump() == cli_doc["result"].dump());
  }
}

TEST_CASE("API request validation", "[api]") {
  auto body = json::parse(slurp(kSource + "/samples/umdex_solve_n.json"));
  body["alpha_level"] = 1.5;
  try {
    api::solve_json(body);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    REQUIRE(e.field() == "alpha_level");
  }
  body = json::parse(slurp(kSource + "/samples/umdex_solve_n.json"));
  body["design"]["colour"] = "red";
  REQUIRE_THROWS_AS(api::solve_json(body), ValidationError);
  body = json::parse(slurp(kSource + "/samples/umdex_solve_n.json"));
  body.erase("target");
  REQUIRE_THROWS_AS(api::solve_json(body), ValidationError);
  body = json::parse(slurp(kSource + "/samples/umdex_solve_n.json"));
  body["outcome"]["icc"] = 1.4;
  try {
    api::solve_json(body);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    REQUIRE(e.field() == "outcome.icc");
  }
  const auto v = api::validate_json(body);
  REQUIRE_FALSE(v["valid"].get<bool>());
  REQUIRE(v["findings"][0]["field"] == "outcome.icc");
}

TEST_CASE("error descriptions map to codes", "[api]") {
  REQUIRE(api::describe_error(ValidationError("x", "f")).http_status == 422);
  REQUIRE(api::describe_error(ParseError("x", 2, 3)).body["error"]["line"] == 2);
  const auto inf = api::describe_error(InfeasibleError("x", 0.4));
  REQUIRE(inf.http_status == 409);
  REQUIRE(inf.exit_code == 3);
  REQUIRE(inf.body["error"]["asymptotic_power"] == 0.4);
  REQUIRE(api::describe_error(InestimableError("x", "beta3")).body["error"]["coordinate"] == "beta3");
  REQUIRE(api::describe_error(std::runtime_error("x")).http_status == 500);
}

TEST_CASE("series JSON round trip and CSV", "[api]") {
  std::vector<Series> s = {{"assumed", {{1, 0.5}, {2, std::nullopt}}}, {"outcome_icc:min", {{1, 0.25}, {2, 0.75}}}};
  REQUIRE(api::series_from_json(api::series_json(s)) == s);
  json doc = {{"series", api::series_json(s)}};
  REQUIRE(api::series_csv(doc) == "x,y,band_label\n1,0.5,assumed\n2,,assumed\n1,0.25,outcome_icc:min\n2,0.75,outcome_icc:min\n");
  json one = {{"series", api::series_json({{"assumed", {{353, 0.9}}}})}};
  REQUIRE(api::series_csv(one) == "x,y,band_label\n353,0.9,assumed\n");
}

TEST_CASE("service routes", "[service]") {
  const auto lire = slurp(kSource + "/samples/lire_solve_m.json");
  const auto ok = service::handle("POST", "/api/v1/solve", lire);
  REQUIRE(ok.status == 200);
  const auto j = json::parse(ok.body);
  REQUIRE(j["status"] == "ok");
  REQUIRE(j["api_version"] == kApiVersion);
  REQUIRE(j["result"]["solved_value"] == 353);

  auto bad = json::parse(lire);
  bad["alpha_level"] = 1.5;
  const auto e = service::handle("POST", "/api/v1/solve", bad.dump());
  REQUIRE(e.status == 422);
  REQUIRE(json::parse(e.body)["error"]["field"] == "alpha_level");

  auto umdex8 = json::parse(slurp(kSource + "/samples/umdex_solve_n.json"));
  umdex8["design"]["cluster_size"] = 8;
  REQUIRE(json::parse(service::handle("POST", "/api/v1/solve", umdex8.dump()).body)["result"]["solved_value"] == 48);

  const auto parsed = service::handle("POST", "/api/v1/design/parse", "0,0\n0,1\n");
  REQUIRE(parsed.status == 200);
  REQUIRE(json::parse(parsed.body)["result"]["matrix"] == json::parse("[[0,0],[0,1]]"));
  const auto wrapped = service::handle("POST", "/api/v1/design/parse", json({{"csv", "0,0\n0,1"}}).dump());
  REQUIRE(json::parse(wrapped.body)["result"]["matrix"] == json::parse("[[0,0],[0,1]]"));
  const auto ragged = service::handle("POST", "/api/v1/design/parse", "0,1\n1\n");
  REQUIRE(ragged.status == 400);
  REQUIRE(json::parse(ragged.body)["error"]["line"] == 2);

  REQUIRE(service::handle("POST", "/api/v1/solve", std::string(service::kMaxBodyBytes + 1, ' ')).status == 413);
  REQUIRE(service::handle("POST", "/api/v1/solve", "{not json").status == 400);
  REQUIRE(service::handle("GET", "/nowhere", "").status == 404);
  const auto h = service::handle("GET", "/healthz", "");
  REQUIRE(h.status == 200);
  REQUIRE(json::parse(h.body)["version"] == kVersion);

  const auto infeasible = service::handle(
      "POST", "/api/v1/solve",
      R"({"target":"m","design":{"family":"parallel","clusters":4},"outcome":{"icc":0.3},
          "covariate":{"level":"cluster"},"delta":0.1})");
  REQUIRE(infeasible.status == 409);
  REQUIRE(json::parse(infeasible.body)["error"].contains("asymptotic_power"));
}

TEST_CASE("sweep with ICC bands", "[service]") {
  const auto resp = service::handle("POST", "/api/v1/sweep", slurp(kSource + "/samples/lire_sweep.json"));
  REQUIRE(resp.status == 200);
  const auto r = json::parse(resp.body)["result"];
  REQUIRE(r["series"].size() == 3);
  REQUIRE(r["series"][0]["label"] == "assumed");
  REQUIRE(r["series"][1]["label"] == "outcome_icc:min");
  REQUIRE(r["series"][2]["label"] == "outcome_icc:max");
  bool crossed = false;
  for (const auto& p : r["series"][0]["points"]) {
    if (p["x"] == 352) REQUIRE(p["y"].get<double>() < 0.9);
    if (p["x"] == 353) {
      REQUIRE(p["y"].get<double>() >= 0.9);
      crossed = true;
    }
  }
  REQUIRE(crossed);
  // Stateless: repeating the request gives the same bytes.
  REQUIRE(service::handle("POST", "/api/v1/sweep", slurp(kSource + "/samples/lire_sweep.json")).body == resp.body);
}

TEST_CASE("HTTP server end to end", "[service]") {
  httplib::Server srv;
  service::ServerConfig cfg;
  cfg.log_requests = false;
  service::mount(srv, cfg);
  const int port = srv.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  const auto h = cli.Get("/healthz");
  REQUIRE(h);
  REQUIRE(h->status == 200);
  const auto s = cli.Post("/api/v1/solve", slurp(kSource + "/samples/umdex_solve_n.json"), "application/json");
  REQUIRE(s);
  REQUIRE(s->status == 200);
  REQUIRE(json::parse(s->body)["result"]["solved_value"] == 35);
  const auto big = cli.Post("/api/v1/solve", std::string(service::kMaxBodyBytes + 10, ' '), "application/json");
  REQUIRE(big);
  REQUIRE(big->status == 413);
  const auto nf = cli.Get("/api/v1/nothing");
  REQUIRE(nf);
  REQUIRE(nf->status == 404);
  srv.stop();
  t.join();
}

TEST_CASE("CLI exit codes and flag-named errors", "[cli]") {
  auto alpha = cli_run({"power", "--design", "parallel", "--clusters", "10", "--cluster-size", "5", "--delta", "0.5",
                        "--alpha", "1.5"});
  REQUIRE(alpha.code == 2);
  REQUIRE(alpha.err.find("--alpha") != std::string::npos);
  REQUIRE(cli_run({"power", "--bogus"}).code == 4);
  REQUIRE(cli_run({"design", "check", "--design-csv", kSource + "/tests/data/nonbinary.csv"}).code == 4);
  auto m = cli_run({"solve-m", "--design", "parallel", "--clusters", "4", "--icc-outcome", "0.3", "--covariate-level",
                    "cluster", "--delta", "0.1", "--format", "json"});
  REQUIRE(m.code == 3);
  REQUIRE(json::parse(m.out)["error"]["code"] == "infeasible");
  auto v = cli_run({"validate", "--design", "parallel", "--cluster-size", "5", "--icc-outcome", "1.4", "--delta", "1"});
  REQUIRE(v.code == 2);
  REQUIRE(v.out.find("--icc-outcome") != std::string::npos);
  REQUIRE(cli_run({"--version"}).code == 0);
}

TEST_CASE("CLI formats", "[cli]") {
  const auto cases = golden::cases(kSource);
  auto args = cases[1].args;
  args.resize(args.size() - 2);  // drop --format json
  const auto human = cli_run(args);
  REQUIRE(human.code == 0);
  REQUIRE(human.out.find("35") != std::string::npos);
  REQUIRE(human.out.find("design effect") != std::string::npos);
  args.insert(args.end(), {"--format", "csv"});
  const auto csv = cli_run(args);
  REQUIRE(csv.code == 0);
  REQUIRE(csv.out.find(',') != std::string::npos);

  const auto sweep = cli_run({"sweep", "--design", "stepped-wedge", "--sequences", "5", "--periods", "6", "--clusters",
                              "100", "--icc-outcome", "0.022", "--cac-outcome", "0.5", "--icc-covariate", "0.1",
                              "--cac-covariate", "0.9", "--covariate-type", "binary", "--prevalence", "0.2", "--delta",
                              "-0.05", "--standardized", "--axis", "m_vs_power", "--range", "353,353",
                              "--icc-outcome-range", "0.01,0.05", "--format", "csv"});
  REQUIRE(sweep.code == 0);
  REQUIRE(sweep.out.rfind("x,y,band_label\n353,", 0) == 0);
  REQUIRE(std::count(sweep.out.begin(), sweep.out.end(), '\n') == 4);

  const auto gen = cli_run({"design", "gen", "--design", "stepped-wedge", "--sequences", "5", "--periods", "6",
                            "--clusters", "100", "--format", "csv"});
  REQUIRE(gen.code == 0);
  REQUIRE(gen.out.rfind("n_clusters,p1,p2,p3,p4,p5,p6\n20,", 0) == 0);
  const auto check = cli_run({"design", "check", "--design-csv", kSource + "/tests/data/umdex_baseline.csv",
                              "--format", "json"});
  REQUIRE(check.code == 0);
  REQUIRE(json::parse(check.out)["result"]["matrix"] == json::parse("[[0,0],[0,1]]"));
}

TEST_CASE("CLI simulate", "[cli]") {
  const auto r = cli_run({"simulate", "--design", "parallel", "--clusters", "10", "--cluster-size", "5", "--delta",
                          "0", "--reps", "200", "--seed", "3", "--format", "json"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out)["result"];
  REQUIRE(j["reps"] == 200);
  REQUIRE(j["seed"] == 3);
  REQUIRE(cli_run({"simulate", "--design", "parallel", "--clusters", "10", "--cluster-size", "5", "--delta", "0",
                   "--reps", "10"})
              .code == 4);
}

TEST_CASE("flag crosswalk lists every flag with its request field", "[cli]") {
  const auto doc = slurp(kSource + "/docs/flags.md");
  for (const auto& f : cli::flag_table()) {
    INFO(f.name);
    const std::string field = f.kind == cli::Kind::band ? std::string("`bands[].param = \"") + f.path + "\"`"
                                                        : std::string("`") + f.path + "`";
    REQUIRE(doc.find(std::string("| `--") + f.name + "` | " + field + " |") != std::string::npos);
  }
}
