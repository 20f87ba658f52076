#include <CLI11.hpp>

#include <iostream>

#include "crthte/service.hpp"

int main(int argc, char** argv) {
  crthte::service::ServerConfig cfg;
  CLI::App app{"HTTP JSON API for the crthte calculator", "crthte-server"};
  app.add_option("--host", cfg.host, "listen address")->capture_default_str();
  app.add_option("--port", cfg.port, "listen port")->capture_default_str()->check(CLI::Range(0, 65535));
  app.add_option("--static", cfg.static_dir, "directory served at / (web UI bundle)")->check(CLI::ExistingDirectory);
  bool quiet = false;
  app.add_flag("--quiet", quiet, "disable request logs");
  CLI11_PARSE(app, argc, argv);
  cfg.log_requests = !quiet;

  httplib::Server srv;
  crthte::service::mount(srv, cfg);
  std::cerr << "crthte-server " << crthte::kVersion << " listening on " << cfg.host << ":" << cfg.port << "\n";
  if (!srv.listen(cfg.host, cfg.port)) {
    std::cerr << "error: cannot listen on " << cfg.host << ":" << cfg.port << "\n";
    return 1;
  }
  return 0;
}
