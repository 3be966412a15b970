#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "flairr/session.hpp"

namespace flairr {

enum class MethodKind { simple, retrieval_only, ir_only, flairr, asp };

struct Method {
  MethodKind kind = MethodKind::flairr;
  std::string asp_name;

  // "simple", "retrieval-only", "ir-only", "flairr" or "asp:<name>".
  static Method parse(std::string_view text);
  std::string label() const;

  // Applies the method's retrieval/refinement switches to a session config.
  SessionConfig configure(SessionConfig base) const;

  friend bool operator==(const Method&, const Method&) = default;
};

// The four ablation conditions in table order.
const std::vector<Method>& ablation_methods();

struct DatasetSpec {
  std::filesystem::path path;
  std::string target = "OT";
  std::string name;
  std::string description;
  std::string timestamp_column = "date";
};

inline constexpr std::size_t kDefaultRuns = 5;
inline constexpr std::size_t kDefaultMaxTestWindows = 20;

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<std::size_t> horizons;
  std::vector<Method> methods;
  std::size_t runs = kDefaultRuns;
  double train_fraction = kDefaultTrainFraction;
  std::size_t max_test_windows = kDefaultMaxTestWindows;
  std::size_t jobs = 1;
  SessionConfig session;
  std::filesystem::path output;
  // Run directory name under `output`; a UTC timestamp when empty.
  std::string run_name;

  void validate() const;
};

// Reads a JSON experiment config. Relative dataset paths resolve against
// `base_dir`. Missing keys keep the defaults above.
ExperimentConfig experiment_config_from_json(const nlohmann::json& doc,
                                             const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Applies the "session" object of a config document over `base`.
SessionConfig session_config_from_json(const nlohmann::json& doc, SessionConfig base = {});
nlohmann::json session_config_to_json(const SessionConfig& config);

// Identifies one grid cell; backends are built per cell.
struct RunKey {
  std::size_t horizon = 0;
  Method method;
  std::size_t run = 0;
  std::uint64_t seed = 0;
};

using BackendFactory = std::function<Agents(const RunKey&)>;

struct RunOutcome {
  RunKey key;
  double test_mae = 0.0;
  std::size_t iterations = 0;
  bool early_stop = false;
  std::size_t test_windows = 0;
  std::size_t failed_windows = 0;
  TokenCounts forecaster_tokens;
  TokenCounts refiner_tokens;
  SelectedPrompt prompt_out;
};

struct ReportRow {
  std::string dataset;
  std::size_t horizon = 0;
  std::string method;
  std::vector<double> run_maes;
  double median_mae = 0.0;
  double iterations = 0.0;  // mean over runs
  double early_stop_rate = 0.0;
  std::int64_t tokens = 0;
  std::int64_t refiner_tokens = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ReportMeta {
  std::string mae_space = "scaled";
  Scaler scaler;
  double train_fraction = kDefaultTrainFraction;
  std::size_t max_test_windows = kDefaultMaxTestWindows;
  std::size_t runs = kDefaultRuns;
  std::string backend;
  std::string template_version;
  std::string retrieval_policy =
      "analogs restricted to training windows ending at or before origin - L";
  std::string run_variation;
};

struct Report {
  std::vector<ReportRow> rows;
  ReportMeta meta;
  std::filesystem::path run_dir;
};

// Median; the mean of the two middle values for even counts.
double median(std::vector<double> values);

ReportRow aggregate_runs(std::span<const RunOutcome> runs, const std::string& dataset);

// Hooks for callers that already hold the data or want the per-cell results.
struct ExperimentHooks {
  const TimeSeries* preloaded = nullptr;
  // Builtin templates when null.
  const TemplateLibrary* templates = nullptr;
  std::function<void(const RunOutcome&)> on_run;
};

// Executes every (horizon, method, run) cell and aggregates rows in
// (horizon, method) order. When `output` is set, session logs and the report
// files go to output/run_name. On failure the completed rows are written
// before the exception propagates.
Report run_experiment(const ExperimentConfig& config, const BackendFactory& factory,
                      const ExperimentHooks& hooks = {});

struct AblationTable {
  std::string dataset;
  std::size_t horizon = 0;
  std::vector<ReportRow> rows;  // simple, retrieval-only, ir-only, flairr
};

// Runs the four ablation conditions regardless of config.methods.
std::vector<AblationTable> run_ablation(ExperimentConfig config, const BackendFactory& factory,
                                        const ExperimentHooks& hooks = {});

enum class ReportFormat { csv, json };

std::string report_csv(std::span<const ReportRow> rows);
nlohmann::json report_json(const Report& report);
Report report_from_json(const nlohmann::json& doc);
std::string ablation_csv(std::span<const AblationTable> tables);

void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path);

}  // namespace flairr
