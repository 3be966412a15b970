#include "flairr/retrieval.hpp"

#include <algorithm>
#include <cmath>

#include "flairr/errors.hpp"
#include "flairr/numbers.hpp"

namespace flairr {

HistDB::HistDB(std::vector<double> history, std::size_t context_length, std::size_t horizon)
    : history_(std::move(history)), context_length_(context_length), horizon_(horizon) {
  if (context_length_ < 2) throw ConfigError("retrieval context length must be >= 2");
  if (horizon_ < 1) throw ConfigError("retrieval horizon must be >= 1");
}

std::size_t HistDB::window_count(std::size_t boundary) const noexcept {
  boundary = std::min(boundary, history_.size());
  const std::size_t span = context_length_ + horizon_;
  return boundary >= span ? boundary - span + 1 : 0;
}

std::span<const double> HistDB::context(std::size_t start) const {
  return std::span(history_).subspan(start, context_length_);
}

std::span<const double> HistDB::outcome(std::size_t start) const {
  return std::span(history_).subspan(start + context_length_, horizon_);
}

HistDB build_hist_db(std::span<const double> history, std::size_t context_length,
                     std::size_t horizon) {
  return HistDB(std::vector<double>(history.begin(), history.end()), context_length, horizon);
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DataError("pearson length mismatch: " + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()));
  }
  if (a.size() < 2) throw DataError("pearson needs at least 2 points");

  const auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(a) || constant(b)) return std::nullopt;

  const double n = static_cast<double>(a.size());
  double mean_a = 0.0;
  double mean_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= n;
  mean_b /= n;

  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - mean_a;
    const double db = b[i] - mean_b;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  const double r = sab / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

RetrievalResult retrieve(const HistDB& db, std::span<const double> ctx, std::size_t m,
                         const RetrieveOptions& options) {
  if (ctx.size() != db.context_length()) {
    throw DataError("query context has length " + std::to_string(ctx.size()) +
                    ", retrieval db expects " + std::to_string(db.context_length()));
  }
  if (m == 0) throw ConfigError("retrieve needs M >= 1");

  RetrievalResult result;
  std::size_t boundary = db.source_len();
  if (options.query_origin) {
    const std::size_t origin = *options.query_origin;
    boundary = origin >= db.context_length() ? std::min(boundary, origin - db.context_length()) : 0;
  }
  const std::size_t count = db.window_count(boundary);
  result.candidates = count;

  if (std::all_of(ctx.begin(), ctx.end(), [&](double x) { return x == ctx.front(); })) {
    result.degenerate = count;
    result.diagnostic = "query context is constant; correlation undefined, no analogs retrieved";
    return result;
  }

  struct Scored {
    std::size_t start;
    double score;
  };
  std::vector<Scored> scored;
  scored.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    if (const auto r = pearson(ctx, db.context(s))) {
      scored.push_back({s, *r});
    } else {
      ++result.degenerate;
    }
  }

  const auto better = [](const Scored& x, const Scored& y) {
    return x.score > y.score || (x.score == y.score && x.start < y.start);
  };
  const std::size_t keep = std::min(m, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                    better);

  result.segments.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const auto c = db.context(scored[i].start);
    const auto o = db.outcome(scored[i].start);
    result.segments.push_back(AnalogSegment{scored[i].start, {c.begin(), c.end()},
                                            {o.begin(), o.end()}, scored[i].score});
  }
  if (count == 0) {
    result.diagnostic = "no complete historical window precedes the query";
  } else if (result.segments.empty()) {
    result.diagnostic = "every historical window is constant; no analogs retrieved";
  }
  return result;
}

std::string format_analogs(std::span<const AnalogSegment> segments, int precision) {
  std::string out;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& seg = segments[i];
    if (i > 0) out += '\n';
    out += "Segment " + std::to_string(i + 1) + " (start index " + std::to_string(seg.start) +
           ", Pearson r = " + format_number(seg.score, 4) + "):\n";
    out += "context: " + format_numbers(seg.context, precision) + '\n';
    out += "outcome: " + format_numbers(seg.outcome, precision) + '\n';
  }
  return out;
}

}  // namespace flairr
