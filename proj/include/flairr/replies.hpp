#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flairr {

inline constexpr std::size_t kInstructionSoftLimit = 3;

struct ForecastReply {
  std::vector<double> values;
  std::string reasoning;
  std::optional<double> certainty;  // percent, [0, 100]
  std::optional<std::string> certainty_reasoning;
};

enum class Confidence { high, medium, low };

struct RefinerReply {
  std::string learnings;
  bool done = false;
  std::optional<Confidence> confidence;
  std::optional<std::string> rationale;
};

// The mutable "Forecasting Instructions" section appended to the base
// forecaster prompt.
struct InstructionBlock {
  std::vector<std::string> items;
  std::size_t source_iteration = 0;
  bool over_limit = false;

  // One "- item" line per entry, continuation lines indented.
  std::string text() const;

  // Splits free text into items: bullet or numbered lines start a new item;
  // without any bullets, blank-line separated paragraphs become items.
  static InstructionBlock from_text(std::string_view text, std::size_t source_iteration = 0);

  friend bool operator==(const InstructionBlock&, const InstructionBlock&) = default;
};

ForecastReply parse_forecast_reply(std::string_view text, std::size_t horizon);
RefinerReply parse_refiner_reply(std::string_view text);
InstructionBlock parse_instructions_reply(std::string_view text, std::size_t source_iteration = 0);

std::string_view to_string(Confidence c);

}  // namespace flairr
