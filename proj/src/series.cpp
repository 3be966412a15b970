#include "flairr/series.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <string>

#include "flairr/errors.hpp"

namespace flairr {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Splits one CSV record. Double-quoted fields may contain commas; a doubled
// quote inside a quoted field is a literal quote.
std::vector<std::string> split_record(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.emplace_back(trim(cur));
  return fields;
}

bool parse_real(std::string_view text, double& out) {
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  if (text.empty()) return false;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

}  // namespace

TimeSeries::TimeSeries(std::string name, std::vector<std::string> column_names,
                       std::vector<std::vector<double>> columns, std::string target,
                       std::vector<std::string> timestamps)
    : name_(std::move(name)),
      column_names_(std::move(column_names)),
      columns_(std::move(columns)),
      target_(std::move(target)),
      timestamps_(std::move(timestamps)) {
  if (columns_.empty() || columns_.size() != column_names_.size()) {
    throw DataError("time series needs one name per column and at least one column");
  }
  const std::size_t n = columns_.front().size();
  if (n == 0) throw DataError("time series has no rows");
  for (std::size_t c = 0; c < columns_.size(); ++c) {
    if (columns_[c].size() != n) {
      throw DataError("column '" + column_names_[c] + "' has " +
                      std::to_string(columns_[c].size()) + " values, expected " +
                      std::to_string(n));
    }
  }
  if (std::find(column_names_.begin(), column_names_.end(), target_) == column_names_.end()) {
    throw DataError("unknown target column '" + target_ + "'");
  }
  if (!timestamps_.empty()) {
    if (timestamps_.size() != n) {
      throw DataError("timestamp count " + std::to_string(timestamps_.size()) +
                      " does not match row count " + std::to_string(n));
    }
    for (std::size_t i = 1; i < n; ++i) {
      if (!(timestamps_[i - 1] < timestamps_[i])) {
        throw DataError("timestamps not strictly increasing at row " + std::to_string(i + 1) +
                        " ('" + timestamps_[i - 1] + "' then '" + timestamps_[i] + "')");
      }
    }
  }
}

std::span<const double> TimeSeries::column(std::string_view column_name) const {
  for (std::size_t c = 0; c < column_names_.size(); ++c) {
    if (column_names_[c] == column_name) return columns_[c];
  }
  throw DataError("unknown column '" + std::string(column_name) + "'");
}

TimeSeries TimeSeries::slice(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > size()) {
    throw DataError("empty or out-of-range slice [" + std::to_string(begin) + ", " +
                    std::to_string(end) + ") of length " + std::to_string(size()));
  }
  std::vector<std::vector<double>> cols;
  cols.reserve(columns_.size());
  for (const auto& col : columns_) {
    cols.emplace_back(col.begin() + static_cast<std::ptrdiff_t>(begin),
                      col.begin() + static_cast<std::ptrdiff_t>(end));
  }
  std::vector<std::string> ts;
  if (!timestamps_.empty()) {
    ts.assign(timestamps_.begin() + static_cast<std::ptrdiff_t>(begin),
              timestamps_.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return TimeSeries(name_, column_names_, std::move(cols), target_, std::move(ts));
}

TimeSeries load_csv(const std::filesystem::path& path, std::string_view target,
                    std::string_view timestamp_column) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open data file '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("data file '" + path.string() + "' is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

  const std::vector<std::string> header = split_record(line);
  std::ptrdiff_t ts_index = -1;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i].empty()) throw DataError("empty column name in header at position " + std::to_string(i + 1));
    if (!timestamp_column.empty() && header[i] == timestamp_column && ts_index < 0) {
      ts_index = static_cast<std::ptrdiff_t>(i);
    } else {
      names.push_back(header[i]);
    }
  }
  if (std::find(names.begin(), names.end(), target) == names.end()) {
    throw DataError("unknown target column '" + std::string(target) + "' in '" + path.string() + "'");
  }

  std::vector<std::vector<double>> columns(names.size());
  std::vector<std::string> timestamps;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_record(line);
    if (fields.size() != header.size()) {
      throw DataError("ragged row " + std::to_string(row) + ": " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(header.size()));
    }
    std::size_t c = 0;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (static_cast<std::ptrdiff_t>(i) == ts_index) {
        timestamps.push_back(fields[i]);
        continue;
      }
      double v = 0.0;
      if (!parse_real(fields[i], v)) {
        throw DataError("non-numeric cell '" + fields[i] + "' at row " + std::to_string(row) +
                        ", column '" + header[i] + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError("non-finite cell '" + fields[i] + "' at row " + std::to_string(row) +
                        ", column '" + header[i] + "'");
      }
      columns[c++].push_back(v);
    }
  }
  if (columns.front().empty()) throw DataError("data file '" + path.string() + "' has no data rows");

  return TimeSeries(path.stem().string(), std::move(names), std::move(columns), std::string(target),
                    std::move(timestamps));
}

Scaler fit_scaler(std::span<const double> values) {
  if (values.empty()) throw DataError("cannot fit a scaler on an empty series");
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / n;
  // Constant input is detected exactly so that rounding in the mean cannot
  // produce a tiny non-zero spread.
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) return Scaler{*lo, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return Scaler{mean, std::sqrt(ss / n)};
}

std::vector<double> apply_scaler(const Scaler& scaler, std::span<const double> values) {
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) {
    out.push_back(scaler.degenerate() ? v - scaler.mean : (v - scaler.mean) / scaler.std);
  }
  return out;
}

std::vector<double> invert_scaler(const Scaler& scaler, std::span<const double> values) {
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) {
    out.push_back(scaler.degenerate() ? v + scaler.mean : v * scaler.std + scaler.mean);
  }
  return out;
}

namespace {

std::size_t split_point(std::size_t n, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw DataError("train fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  }
  const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_fraction));
  if (cut == 0 || cut >= n) {
    throw DataError("train fraction " + std::to_string(train_fraction) + " on " +
                    std::to_string(n) + " rows leaves an empty part");
  }
  return cut;
}

}  // namespace

std::pair<TimeSeries, TimeSeries> split(const TimeSeries& series, double train_fraction) {
  const std::size_t cut = split_point(series.size(), train_fraction);
  return {series.slice(0, cut), series.slice(cut, series.size())};
}

PreparedTarget prepare_target(const TimeSeries& series, double train_fraction) {
  const std::size_t cut = split_point(series.size(), train_fraction);
  const auto raw = series.target_values();
  PreparedTarget out;
  out.train_size = cut;
  out.scaler = fit_scaler(raw.first(cut));
  out.values = apply_scaler(out.scaler, raw);
  return out;
}

WindowPair window_at(std::span<const double> values, std::size_t t, std::size_t context_length,
                     std::size_t horizon) {
  if (context_length < 2 || horizon < 1) {
    throw DataError("window needs L >= 2 and H >= 1");
  }
  if (t < context_length || t + horizon > values.size()) {
    throw DataError("window at t=" + std::to_string(t) + " with L=" + std::to_string(context_length) +
                    ", H=" + std::to_string(horizon) + " is out of range for length " +
                    std::to_string(values.size()));
  }
  WindowPair w;
  w.context.assign(values.begin() + static_cast<std::ptrdiff_t>(t - context_length),
                   values.begin() + static_cast<std::ptrdiff_t>(t));
  w.truth.assign(values.begin() + static_cast<std::ptrdiff_t>(t),
                 values.begin() + static_cast<std::ptrdiff_t>(t + horizon));
  w.origin = t;
  return w;
}

double mae(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) {
    throw DataError("mae length mismatch: " + std::to_string(pred.size()) + " predictions vs " +
                    std::to_string(truth.size()) + " truths");
  }
  if (pred.empty()) throw DataError("mae of empty vectors");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred[i] - truth[i]);
  return sum / static_cast<double>(pred.size());
}

}  // namespace flairr
