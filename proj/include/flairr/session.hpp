#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flairr/backend.hpp"
#include "flairr/errors.hpp"
#include "flairr/prompts.hpp"
#include "flairr/replies.hpp"
#include "flairr/retrieval.hpp"
#include "flairr/series.hpp"
#include "flairr/templates.hpp"

namespace flairr {

inline constexpr std::size_t kDefaultMaxIterations = 5;
inline constexpr std::size_t kDefaultSampleSize = 3;
inline constexpr int kDefaultParseRetries = 3;

// Knobs of one refinement session: 5 iterations, 5% stop threshold,
// 3 samples and 2 analogs by default.
struct SessionConfig {
  std::size_t context_length = 96;
  std::size_t horizon = 24;
  std::size_t analog_count = kDefaultAnalogCount;
  std::size_t max_iterations = kDefaultMaxIterations;
  double stop_threshold = kDefaultStopThreshold;  // percent
  std::size_t sample_size = kDefaultSampleSize;
  int precision = kDefaultPrecision;
  int parse_retries = kDefaultParseRetries;
  bool retrieval_enabled = true;
  bool refinement_enabled = true;
  std::uint64_t seed = 0;

  double forecaster_temperature = 0.2;
  double refiner_temperature = 0.7;
  double synthesis_temperature = 0.7;
  int max_tokens = kDefaultMaxTokens;
  std::size_t prompt_char_budget = kDefaultPromptCharBudget;

  // Analogs per forecast: 0 when retrieval is off.
  std::size_t effective_analog_count() const noexcept {
    return retrieval_enabled ? analog_count : 0;
  }

  // Throws ConfigError on violated invariants.
  void validate() const;
};

// The forecaster and refiner agents. The refiner backend also serves
// instruction synthesis.
struct Agents {
  std::shared_ptr<Backend> forecaster;
  std::shared_ptr<Backend> refiner;
};

inline constexpr std::string_view kCorrectiveSuffix =
    "\n\nYour previous reply violated the output format; emit exactly the specified format.";
inline constexpr std::string_view kPlaceholderCorrection =
    "\n\nYour previous reply contained template placeholders wrapped in curly braces. "
    "Write concrete instructions without any placeholders.";

struct SampleRecord {
  std::size_t origin = 0;
  std::string prompt;
  std::vector<double> predictions;
  std::vector<double> truth;
  double mae = 0.0;
  int parse_failures = 0;
  // Set when every attempt failed to parse; such samples are left out of
  // the batch MAE.
  bool skipped = false;
  std::string error;
};

struct EvaluationResult {
  double batch_mae = 0.0;
  std::vector<SampleRecord> samples;
  int parse_failures = 0;
  TokenCounts tokens;
};

struct RefinementRecord {
  std::size_t iteration = 0;  // one-based
  std::optional<InstructionBlock> instructions;
  double batch_mae = 0.0;
  std::vector<SampleRecord> per_sample;
  std::optional<RefinerReply> refiner_reply;
  int parse_failures = 0;
  // The refiner said Done on the first iteration and was overruled.
  bool done_overridden = false;
  TokenCounts forecaster_tokens;
  TokenCounts refiner_tokens;
};

struct SelectedPrompt {
  std::string base_template_id = "forecaster-base";
  std::optional<InstructionBlock> instructions;
};

struct SessionResult {
  SelectedPrompt prompt_out;
  bool early_stop = false;
  // Iteration whose instructions became prompt_out.
  std::size_t selected_iteration = 0;
  std::size_t best_iteration = 0;
  double best_mae = 0.0;
  std::vector<RefinementRecord> history;
  // Predictions of the best iteration, one vector per validation sample.
  std::vector<std::vector<double>> best_forecast;
  TokenCounts forecaster_tokens;
  TokenCounts refiner_tokens;
};

// Thrown when a session cannot continue; carries the iterations completed
// before the failure.
class SessionAborted : public Error {
 public:
  enum class Cause { backend, parse, data };

  SessionAborted(Cause cause, const std::string& what, std::vector<RefinementRecord> partial)
      : Error(what), cause_(cause), partial_(std::move(partial)) {}

  Cause cause() const noexcept { return cause_; }
  const std::vector<RefinementRecord>& partial_history() const noexcept { return partial_; }

 private:
  Cause cause_;
  std::vector<RefinementRecord> partial_;
};

// JSON-lines audit trail: a session_start line, one line per iteration, a
// session_end line.
class SessionLog {
 public:
  explicit SessionLog(const std::filesystem::path& path);

  const std::filesystem::path& path() const noexcept { return path_; }
  void start(const SessionConfig& config, const DatasetMeta& meta);
  void iteration(const RefinementRecord& record);
  void finish(const SessionResult& result);

 private:
  void write_line(const std::string& line);

  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mutex_;
};

struct SessionContext {
  const SessionConfig& config;
  const DatasetMeta& meta;
  const TemplateLibrary& templates;
  const Agents& agents;
  // Retrieval database; required when retrieval is enabled.
  const HistDB* db = nullptr;
};

// The `count` most recent non-overlapping (context, truth) windows at the end
// of `train`, chronological.
std::vector<WindowPair> validation_windows(std::span<const double> train, std::size_t context_length,
                                           std::size_t horizon, std::size_t count);

// Windows whose truths tile `values[train_size:]` with stride H, at most
// `max_windows` of them (0 means no cap).
std::vector<WindowPair> test_windows(std::span<const double> values, std::size_t train_size,
                                     std::size_t context_length, std::size_t horizon,
                                     std::size_t max_windows);

// Retrieve, render, complete and parse one forecaster prompt, re-asking with
// a corrective suffix up to parse_retries times. Throws ParseError when all
// attempts fail.
struct ForecastAttempt {
  std::string prompt;
  ForecastReply reply;
  int parse_failures = 0;
  TokenCounts tokens;
};

ForecastAttempt forecast_window(const std::optional<InstructionBlock>& instructions,
                                const WindowPair& window, const SessionContext& ctx);

EvaluationResult evaluate_prompt(const std::optional<InstructionBlock>& instructions,
                                 std::span<const WindowPair> windows, const SessionContext& ctx);

struct RefineStepOptions {
  // False on the first iteration: there is no earlier MAE to compare with.
  bool allow_done = true;
  // False on the last iteration, where next instructions would go unused.
  bool synthesize = true;
};

struct RefineStepResult {
  std::optional<InstructionBlock> next;
  bool done = false;
  bool done_overridden = false;
  RefinerReply reply;
  int parse_failures = 0;
  TokenCounts tokens;
};

RefineStepResult refine_step(std::span<const RefinementRecord> history, const SessionContext& ctx,
                             const RefineStepOptions& options = {});

struct SessionOptions {
  // P_0. Absent means the bare base prompt.
  std::optional<InstructionBlock> initial_instructions;
  SessionLog* log = nullptr;
};

SessionResult run_session(const SessionConfig& config, std::span<const double> train,
                          std::span<const WindowPair> validation, const Agents& agents,
                          const TemplateLibrary& templates, const DatasetMeta& meta,
                          const SessionOptions& options = {});

std::vector<double> forecast_with(const SelectedPrompt& prompt, const WindowPair& window,
                                  const SessionContext& ctx);

}  // namespace flairr
