/*
 * Copyright 2026 The flsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// flsim command line: run, replay, report, registry.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "flsim/flsim.hpp"

namespace {

int do_replay(const std::string& ledger, const std::string& archive) {
  try {
    const flsim::ReplayReport report = flsim::cmd_replay(ledger, archive);
    for (const auto& e : report.entries) {
      std::cout << e.version_id << " " << flsim::to_string(e.status);
      if (!e.detail.empty()) std::cout << " (" << e.detail << ")";
      std::cout << "\n";
    }
    std::cout << report.matched() << "/" << report.entries.size() << " versions match\n";
    return report.all_match() ? flsim::exit_code::ok : flsim::exit_code::integrity;
  } catch (const flsim::IntegrityError& e) {
    std::cerr << "error: co-versioning registry: " << e.what() << "\n";
    return flsim::exit_code::integrity;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return flsim::exit_code::failure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning reference-architecture simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", flsim::kVersion);

  std::string config, out = "runs/latest", ledger, archive, run_dir;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run an experiment and write its artifacts");
  run->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output run directory (FLSIM_OUT_DIR overrides)");
  run->add_option("--seed", seed, "Override the master seed");

  auto* rep = app.add_subcommand("replay", "Recompute every global version from the ledger and archive");
  rep->add_option("--ledger", ledger, "ledger.jsonl")->required();
  rep->add_option("--archive", archive, "archive.jsonl")->required();

  auto* report = app.add_subcommand("report", "Per-round CSV summary of a run directory");
  report->add_option("--run", run_dir, "Run directory")->required();

  auto* registry = app.add_subcommand("registry", "Print the registry snapshot of a run directory");
  registry->add_option("--run", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : flsim::exit_code::config;
  }

  if (*run) {
    if (const char* env = std::getenv("FLSIM_OUT_DIR"); env && *env) out = env;
    return flsim::cmd_run(config, out, seed, std::cerr);
  }
  if (*rep) return do_replay(ledger, archive);
  try {
    if (*report) {
      std::cout << flsim::cmd_report(run_dir);
    } else {
      for (const auto& line : flsim::read_jsonl(run_dir + "/registry.jsonl")) std::cout << line.dump() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return flsim::exit_code::failure;
  }
  return flsim::exit_code::ok;
}
