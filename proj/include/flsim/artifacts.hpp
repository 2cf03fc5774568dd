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

// Run directories and the three user-facing commands: run, replay, report.

#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "flsim/config.hpp"
#include "flsim/ledger.hpp"
#include "flsim/serialization.hpp"
#include "flsim/simulation.hpp"

namespace flsim {

inline constexpr const char* kVersion = "1.0.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int config = 2;
inline constexpr int starvation = 3;
inline constexpr int divergence = 4;
inline constexpr int integrity = 5;
}  // namespace exit_code

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace detail

/// Writes every artifact of a finished run into `dir`. Only run.json carries
/// wall-clock metadata (under "timestamps").
inline void write_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg, const RunResult& result,
                          const json& timestamps) {
  std::filesystem::create_directories(dir);
  auto path = [&](const char* name) { return (dir / name).string(); };

  json effective = cfg.source;
  effective["seed"] = cfg.seed;
  write_text(path("config.json"), effective.dump(2) + "\n");

  json run{{"run_id", run_id(cfg)},
           {"seed", cfg.seed},
           {"flsim_version", kVersion},
           {"exit_code", result.exit_code()},
           {"rounds", result.metrics.size()},
           {"failed_rounds", result.failed_rounds},
           {"versions", result.ledger.records().size()},
           {"final_version", result.final_version},
           {"timestamps", timestamps}};
  write_text(path("run.json"), run.dump(2) + "\n");

  std::vector<json> lines;
  for (const auto& m : result.metrics) lines.push_back(to_json(m));
  write_jsonl(path("metrics.jsonl"), lines);
  write_jsonl(path("events.jsonl"), result.events);
  write_jsonl(path("registry.jsonl"), registry_jsonl(result.registry));

  lines.clear();
  for (const auto& d : result.deployments) lines.push_back(to_json(d));
  write_jsonl(path("deployments.jsonl"), lines);

  if (cfg.job.has(Component::incentives)) write_jsonl(path("incentives.jsonl"), incentives_jsonl(result.incentives));
  if (cfg.job.has(Component::monitor)) {
    lines.clear();
    for (const auto& m : result.monitor) lines.push_back(to_json(m));
    write_jsonl(path("monitor.jsonl"), lines);
  }
  if (cfg.job.has(Component::co_versioning)) {
    write_jsonl(path("ledger.jsonl"), ledger_jsonl(result.ledger));
    if (cfg.archive_payloads) write_jsonl(path("archive.jsonl"), archive_jsonl(result.archive));
  }
  write_text(path("checkpoint.json"),
             checkpoint_json(result.final_version, cfg.job.arch, result.final_global).dump() + "\n");
}

/// Loads, runs and persists one experiment. Returns the process exit code.
inline int cmd_run(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
                   std::ostream& log) {
  ExperimentConfig cfg;
  try {
    json doc = load_json_file(config_path);
    if (seed) doc["seed"] = *seed;
    cfg = parse_config(doc);
  } catch (const ConfigError& e) {
    log << "error: job creator: " << e.what() << "\n";
    return exit_code::config;
  }
  try {
    const std::string started = detail::utc_now();
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult result = run_experiment(cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_dir(out_dir, cfg, result, {{"started_at", started}, {"finished_at", detail::utc_now()}, {"wall_s", wall}});
    log << "run " << run_id(cfg) << ": " << result.metrics.size() << " rounds, final " << result.final_version;
    if (!result.metrics.empty()) log << ", global accuracy " << result.metrics.back().global_acc;
    log << "\n";
    if (result.diverged) log << "warning: model trainer: at least one client diverged\n";
    if (result.starved) log << "warning: client selector: at least one round had no eligible clients\n";
    return result.exit_code();
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return exit_code::failure;
  }
}

inline ReplayReport cmd_replay(const std::string& ledger_path, const std::string& archive_path) {
  return replay(load_ledger(ledger_path), load_archive(archive_path));
}

inline const char* kReportHeader =
    "round,version_id,global_acc,global_loss,n_selected,n_received,bytes_up,bytes_down,participation,incentives";

/// One CSV row per round. Byte columns are recounted from the event log;
/// participation is n_received / n_selected; incentives are credits issued
/// in that round.
inline std::string cmd_report(const std::string& run_dir) {
  const std::filesystem::path dir(run_dir);
  if (!std::filesystem::is_directory(dir)) throw Error("report: '" + run_dir + "' is not a directory");
  const auto metrics_path = dir / "metrics.jsonl";
  const auto events_path = dir / "events.jsonl";
  if (!std::filesystem::exists(metrics_path)) throw Error("report: missing artifact metrics.jsonl in '" + run_dir + "'");
  if (!std::filesystem::exists(events_path)) throw Error("report: missing artifact events.jsonl in '" + run_dir + "'");

  std::map<std::uint32_t, std::pair<std::uint64_t, std::uint64_t>> bytes;  // round -> (up, down)
  for (const auto& ev : read_jsonl(events_path.string())) {
    if (ev.value("kind", "") != "send") continue;
    auto& b = bytes[ev.at("round").get<std::uint32_t>()];
    const std::uint64_t n = ev.at("bytes").get<std::uint64_t>();
    (ev.at("msg").get<std::string>() == "broadcast" ? b.second : b.first) += n;
  }
  std::map<std::uint32_t, double> credits;
  const auto incentives_path = dir / "incentives.jsonl";
  if (std::filesystem::exists(incentives_path)) {
    for (const auto& e : read_jsonl(incentives_path.string()))
      credits[e.at("round").get<std::uint32_t>()] += e.at("amount").get<double>();
  }

  std::ostringstream os;
  os << kReportHeader << "\n";
  for (const auto& j : read_jsonl(metrics_path.string())) {
    const RoundMetrics m = metrics_from_json(j);
    const auto b = bytes[m.round];
    const double participation =
        m.n_selected ? static_cast<double>(m.n_received) / static_cast<double>(m.n_selected) : 0.0;
    os << m.round << "," << m.version_id << "," << number(m.global_acc).dump() << "," << number(m.global_loss).dump() << "," << m.n_selected << ","
       << m.n_received << "," << b.first << "," << b.second << "," << json(participation).dump() << "," << json(credits[m.round]).dump() << "\n";
  }
  return os.str();
}

}  // namespace flsim
