// cxlsim: run experiment suites, check calibration, list profiles.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "cxlsim/harness.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 1, kCalibration = 2, kFault = 3 };

}  // namespace

int main(int argc, char** argv) {
  using namespace cxlsim;
  CLI::App app{"cxlsim: deterministic CXL-coherent node simulator"};
  app.require_subcommand(1);

  std::string suite, config_path, out_dir, format = "csv";
  std::uint64_t seed = 0;
  bool trace_coh = false, trace_nic = false;
  auto* run = app.add_subcommand("run", "Run an experiment suite");
  run->add_option("suite", suite, "numa-latency | tier-latency | tier-bandwidth | dma-sweep | rao | rpc")
      ->required()
      ->check(CLI::IsMember(suite_names()));
  run->add_option("--config", config_path, "Config file")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Master seed (overrides [run] seed)");
  run->add_option("--out", out_dir, "Output directory (overrides [run] out)");
  run->add_option("--format", format, "Report format")->check(CLI::IsMember({"csv", "json"}));
  run->add_flag("--trace-coherence", trace_coh, "Write <suite>.coherence.trace");
  run->add_flag("--trace-nic", trace_nic, "Write <suite>.nic.trace");

  std::string profile;
  auto* cal = app.add_subcommand("calibrate-check", "Compare a profile against the golden table");
  cal->add_option("--profile", profile, "Shipped profile name")->required();

  auto* list = app.add_subcommand("list-profiles", "Print the shipped profiles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (list->parsed()) {
      std::cout << profiles_text();
      return kOk;
    }
    if (cal->parsed()) {
      const CalibrationResult r = calibrate_check(default_config(profile));
      std::cout << render_calibration(r);
      return r.pass ? kOk : kCalibration;
    }
    SimConfig cfg = load_config(config_path);
    if (*seed_opt) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    std::filesystem::create_directories(cfg.out_dir);
    const std::string base = (std::filesystem::path(cfg.out_dir) / suite).string();
    std::unique_ptr<std::ofstream> coh, nic;
    RunOptions opt;
    if (trace_coh) {
      coh = std::make_unique<std::ofstream>(base + ".coherence.trace");
      if (!*coh) throw ConfigError("cannot write '" + base + ".coherence.trace'");
      opt.coherence_trace = coh.get();
    }
    if (trace_nic) {
      nic = std::make_unique<std::ofstream>(base + ".nic.trace");
      if (!*nic) throw ConfigError("cannot write '" + base + ".nic.trace'");
      opt.nic_trace = nic.get();
    }
    const Report r = run_experiment(suite, cfg, opt);
    const std::string path = base + "." + format;
    emit_report(r, format, path);
    std::cout << (format == "csv" ? render_csv(r) : render_json(r));
    std::cerr << "wrote " << path << "\n";
    return kOk;
  } catch (const SimFault& e) {
    std::cerr << "simulation fault: " << e.what() << "\n";
    return kFault;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}
