#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flairr {

inline constexpr std::size_t kDefaultAnalogCount = 2;

// Sliding-window database of (context, outcome) pairs over a historical
// region, stride 1, chronological.
class HistDB {
 public:
  HistDB(std::vector<double> history, std::size_t context_length, std::size_t horizon);

  std::size_t source_len() const noexcept { return history_.size(); }
  std::size_t context_length() const noexcept { return context_length_; }
  std::size_t horizon() const noexcept { return horizon_; }

  // Number of windows with start + L + H <= boundary.
  std::size_t window_count(std::size_t boundary) const noexcept;
  std::size_t window_count() const noexcept { return window_count(history_.size()); }

  std::span<const double> context(std::size_t start) const;
  std::span<const double> outcome(std::size_t start) const;

 private:
  std::vector<double> history_;
  std::size_t context_length_;
  std::size_t horizon_;
};

HistDB build_hist_db(std::span<const double> history, std::size_t context_length,
                     std::size_t horizon);

// Sample Pearson correlation. Empty when either vector is constant.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

struct AnalogSegment {
  std::size_t start = 0;
  std::vector<double> context;
  std::vector<double> outcome;
  double score = 0.0;
};

struct RetrieveOptions {
  // Forecast origin of the query in the db's index space. When set, only
  // windows that end at or before origin - L are eligible, so neither the
  // query context nor its future can leak into the analogs.
  std::optional<std::size_t> query_origin;
};

struct RetrievalResult {
  // Descending by score; equal scores keep the earlier start first.
  std::vector<AnalogSegment> segments;
  std::size_t candidates = 0;
  std::size_t degenerate = 0;
  std::optional<std::string> diagnostic;
};

RetrievalResult retrieve(const HistDB& db, std::span<const double> ctx, std::size_t m,
                         const RetrieveOptions& options = {});

// Text blocks for the forecaster prompt; empty string when there are no
// segments.
std::string format_analogs(std::span<const AnalogSegment> segments, int precision);

}  // namespace flairr
