#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flairr/numbers.hpp"
#include "flairr/replies.hpp"
#include "flairr/templates.hpp"

namespace flairr {

struct DatasetMeta {
  std::string name;
  std::string description;
  std::string target;
};

struct ForecasterPromptInputs {
  DatasetMeta meta;
  std::size_t horizon = 0;
  std::string history_text;
  std::optional<InstructionBlock> instructions;
  // Pre-formatted analog blocks and how many segments they hold.
  std::optional<std::string> raft_context;
  std::size_t segment_count = 0;
};

std::string render_forecaster_prompt(const TemplateLibrary& lib, const ForecasterPromptInputs& in);

// One evaluated forecast shown to the refiner.
struct RefinerSample {
  std::size_t origin = 0;
  std::string prompt;
  std::vector<double> predictions;
  std::vector<double> truth;
  double mae = 0.0;
};

// One (instructions, batch MAE) pair from earlier in the session.
struct HistoryEntry {
  std::optional<InstructionBlock> instructions;
  double batch_mae = 0.0;
};

inline constexpr double kDefaultStopThreshold = 5.0;  // percent
inline constexpr std::size_t kDefaultPromptCharBudget = 8000;

struct RefinerPromptInputs {
  std::size_t iteration = 0;  // zero-based; rendered one-based
  std::optional<InstructionBlock> current_instructions;
  double batch_mae = 0.0;
  // Every evaluated prompt so far, oldest first, including the current one.
  std::vector<HistoryEntry> history;
  std::vector<RefinerSample> samples;
  double stop_threshold = kDefaultStopThreshold;
  std::string target = "OT";
  int precision = kDefaultPrecision;
  // Per-sample prompt excerpt budget in characters; 0 keeps prompts whole.
  std::size_t prompt_char_budget = kDefaultPromptCharBudget;
};

std::string render_refiner_prompt(const TemplateLibrary& lib, const RefinerPromptInputs& in);

std::string render_synthesis_prompt(const TemplateLibrary& lib, const std::string& learnings);

// Instructions for an ASP strategy at the given horizon; empty for "simple".
std::optional<InstructionBlock> asp_instructions(const TemplateLibrary& lib,
                                                 std::string_view name, std::size_t horizon);

// Head and tail of `text` joined by an elision marker when it exceeds `budget`.
std::string truncate_middle(const std::string& text, std::size_t budget);

// Display text for absent instructions in refiner prompts and reports.
inline constexpr std::string_view kNoInstructionsText = "(none: base prompt only)";

}  // namespace flairr
