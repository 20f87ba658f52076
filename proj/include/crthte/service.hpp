#pragma once

// Stateless HTTP JSON API over the shared api layer.

// Eigen-based headers come first: <resolv.h>, pulled in by httplib, defines
// a `_res` macro that collides with Eigen parameter names.
#include "crthte/api.hpp"

#include <httplib.h>

#include <chrono>
#include <iostream>
#include <mutex>
#include <string>

namespace crthte::service {

using json = api::json;

inline constexpr std::size_t kMaxBodyBytes = 1 << 20;

struct Response {
  int status = 200;
  std::string body;
};

namespace detail {

inline Response error_response(const std::exception& ex) {
  const auto info = api::describe_error(ex);
  return {info.http_status, info.body.dump()};
}

inline Response too_large() {
  json body = {{"status", "error"},
               {"schema_version", kSchemaVersion},
               {"api_version", kApiVersion},
               {"version", kVersion},
               {"error",
                {{"code", "payload_too_large"},
                 {"message", "request body exceeds " + std::to_string(kMaxBodyBytes) + " bytes"}}}};
  return {413, body.dump()};
}

inline json parse_body(const std::string& body) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), 1, static_cast<int>(e.byte));
  }
}

}  // namespace detail

// Routes one request; the HTTP server and the tests both call this.
inline Response handle(const std::string& method, const std::string& path, const std::string& body) {
  if (body.size() > kMaxBodyBytes) return detail::too_large();
  try {
    if (method == "GET" && path == "/healthz") {
      return {200, json({{"status", "ok"},
                         {"version", kVersion},
                         {"api_version", kApiVersion},
                         {"schema_version", kSchemaVersion}})
                       .dump()};
    }
    if (method == "POST" && path == "/api/v1/solve")
      return {200, api::envelope_ok(api::solve_json(detail::parse_body(body))).dump()};
    if (method == "POST" && path == "/api/v1/sweep")
      return {200, api::envelope_ok(api::sweep_json(detail::parse_body(body))).dump()};
    if (method == "POST" && path == "/api/v1/validate")
      return {200, api::envelope_ok(api::validate_json(detail::parse_body(body))).dump()};
    if (method == "POST" && path == "/api/v1/design/parse") {
      // Raw CSV text, or a JSON object {"csv": "..."}.
      std::string csv = body;
      const auto first = body.find_first_not_of(" \t\r\n");
      if (first != std::string::npos && body[first] == '{') {
        const json j = detail::parse_body(body);
        if (!j.contains("csv") || !j["csv"].is_string()) throw ValidationError("csv is required", "csv");
        csv = j["csv"].get<std::string>();
      }
      return {200, api::envelope_ok(api::design_parse_json(csv)).dump()};
    }
    json nf = {{"status", "error"},
               {"schema_version", kSchemaVersion},
               {"api_version", kApiVersion},
               {"version", kVersion},
               {"error", {{"code", "not_found"}, {"message", method + " " + path + " is not a route"}}}};
    return {404, nf.dump()};
  } catch (const std::exception& ex) {
    return detail::error_response(ex);
  }
}

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;  // optional web UI bundle
  bool log_requests = true;
};

// Registers the routes on an httplib server.
inline void mount(httplib::Server& srv, const ServerConfig& cfg) {
  srv.set_payload_max_length(kMaxBodyBytes);
  auto bridge = [](const httplib::Request& req, httplib::Response& res) {
    const Response r = handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  srv.Get("/healthz", bridge);
  for (const char* p : {"/api/v1/solve", "/api/v1/sweep", "/api/v1/validate", "/api/v1/design/parse"})
    srv.Post(p, bridge);
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 413) {
      const Response r = detail::too_large();
      res.set_content(r.body, "application/json");
    } else if (res.body.empty()) {
      const Response r = handle(req.method, req.path, "");
      res.set_content(r.body, "application/json");
    }
  });
  if (!cfg.static_dir.empty()) srv.set_mount_point("/", cfg.static_dir);
  if (cfg.log_requests) {
    srv.set_logger([](const httplib::Request& req, const httplib::Response& res) {
      static std::mutex mu;
      std::lock_guard<std::mutex> lock(mu);
      std::cerr << json({{"method", req.method}, {"path", req.path}, {"status", res.status},
                         {"bytes_in", req.body.size()}, {"bytes_out", res.body.size()}})
                       .dump()
                << "\n";
    });
  }
}

}  // namespace crthte::service
