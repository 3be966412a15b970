#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace flairr {

inline constexpr double kDefaultTrainFraction = 0.7;

// Timestamped multivariate series with one designated target column.
// Immutable once constructed; the constructor enforces the invariants.
class TimeSeries {
 public:
  TimeSeries(std::string name, std::vector<std::string> column_names,
             std::vector<std::vector<double>> columns, std::string target,
             std::vector<std::string> timestamps = {});

  const std::string& name() const noexcept { return name_; }
  const std::vector<std::string>& column_names() const noexcept { return column_names_; }
  const std::vector<std::string>& timestamps() const noexcept { return timestamps_; }
  const std::string& target() const noexcept { return target_; }
  bool has_timestamps() const noexcept { return !timestamps_.empty(); }
  std::size_t size() const noexcept { return columns_.front().size(); }

  std::span<const double> column(std::string_view column_name) const;
  std::span<const double> target_values() const { return column(target_); }

  // Rows [begin, end). Throws DataError when the slice would be empty.
  TimeSeries slice(std::size_t begin, std::size_t end) const;

 private:
  std::string name_;
  std::vector<std::string> column_names_;
  std::vector<std::vector<double>> columns_;
  std::string target_;
  std::vector<std::string> timestamps_;
};

// Reads a header-first CSV. A column named `timestamp_column` (when present)
// is carried as opaque text; every other column must be numeric and finite.
TimeSeries load_csv(const std::filesystem::path& path, std::string_view target,
                    std::string_view timestamp_column = "date");

// Standard scaling with the population standard deviation (divisor n).
struct Scaler {
  double mean = 0.0;
  double std = 1.0;

  // A zero-variance fit: apply only removes the mean.
  bool degenerate() const noexcept { return std == 0.0; }
};

Scaler fit_scaler(std::span<const double> values);
std::vector<double> apply_scaler(const Scaler& scaler, std::span<const double> values);
std::vector<double> invert_scaler(const Scaler& scaler, std::span<const double> values);

// Chronological split at floor(n * train_fraction).
std::pair<TimeSeries, TimeSeries> split(const TimeSeries& series,
                                        double train_fraction = kDefaultTrainFraction);

// The target column split chronologically and standard-scaled with a scaler
// fit on the training part only. `values` holds train followed by test, so
// global indices are shared between the two parts.
struct PreparedTarget {
  std::vector<double> values;
  std::size_t train_size = 0;
  Scaler scaler;

  std::span<const double> train() const { return std::span(values).first(train_size); }
  std::span<const double> test() const { return std::span(values).subspan(train_size); }
};

PreparedTarget prepare_target(const TimeSeries& series,
                              double train_fraction = kDefaultTrainFraction);

struct WindowPair {
  std::vector<double> context;
  std::vector<double> truth;
  // Index of the first truth element in the source series.
  std::size_t origin = 0;
};

WindowPair window_at(std::span<const double> values, std::size_t t, std::size_t context_length,
                     std::size_t horizon);

// Mean absolute error over equal-length, non-empty vectors.
double mae(std::span<const double> pred, std::span<const double> truth);

}  // namespace flairr
