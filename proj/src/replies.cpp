#include "flairr/replies.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include "flairr/errors.hpp"
#include "flairr/templates.hpp"

namespace flairr {

namespace {

constexpr std::string_view kWhitespace = " \t\r\n";

std::string_view trim(std::string_view s, std::string_view chars = kWhitespace) {
  const auto b = s.find_first_not_of(chars);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(chars);
  return s.substr(b, e - b + 1);
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return lines;
}

// Line with markdown emphasis, heading and quote characters removed, so that
// "**Done:** True" and "## Done: True" read like "Done: True".
std::string clean_line(std::string_view line) {
  std::string out;
  out.reserve(line.size());
  for (char c : line) {
    if (c != '*' && c != '#' && c != '`' && c != '>') out.push_back(c);
  }
  return std::string(trim(out));
}

// Remainder after `marker` when the cleaned line starts with it
// (case-insensitive).
std::optional<std::string> after_marker(std::string_view line, std::string_view marker) {
  const std::string cleaned = clean_line(line);
  if (cleaned.size() < marker.size()) return std::nullopt;
  if (lower(std::string_view(cleaned).substr(0, marker.size())) != marker) return std::nullopt;
  return std::string(trim(std::string_view(cleaned).substr(marker.size())));
}

std::optional<std::size_t> find_marker(const std::vector<std::string_view>& lines,
                                       std::string_view marker, std::size_t from = 0,
                                       bool last = false) {
  std::optional<std::size_t> hit;
  for (std::size_t i = from; i < lines.size(); ++i) {
    if (after_marker(lines[i], marker)) {
      hit = i;
      if (!last) break;
    }
  }
  return hit;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

bool parse_real(std::string_view token, double& out) {
  std::string t = replace_all(std::string(token), "\xE2\x88\x92", "-");  // U+2212 minus
  std::string_view v = t;
  if (!v.empty() && v.front() == '+') v.remove_prefix(1);
  if (v.empty()) return false;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  return ec == std::errc() && ptr == v.data() + v.size() && std::isfinite(out);
}

constexpr std::string_view kForecastMarkers[] = {"predicted values:", "reasoning:",
                                                 "certainty estimate:", "certainty reasoning:"};

bool is_forecast_marker_line(std::string_view line) {
  return std::any_of(std::begin(kForecastMarkers), std::end(kForecastMarkers),
                     [&](std::string_view m) { return after_marker(line, m).has_value(); });
}

// Text of a section: the marker line remainder plus following lines until the
// next section marker.
std::string section_text(const std::vector<std::string_view>& lines, std::size_t at,
                         std::string_view marker) {
  std::string text = *after_marker(lines[at], marker);
  for (std::size_t i = at + 1; i < lines.size() && !is_forecast_marker_line(lines[i]); ++i) {
    text += '\n';
    text += lines[i];
  }
  return std::string(trim(text));
}

bool is_bullet(std::string_view line, std::string_view& content) {
  const std::string_view t = trim(line);
  for (std::string_view b : {"- ", "* ", "+ ", "\xE2\x80\xA2 "}) {  // U+2022 bullet
    if (t.substr(0, b.size()) == b) {
      content = trim(t.substr(b.size()));
      return true;
    }
  }
  std::size_t i = 0;
  while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
  if (i > 0 && i + 1 < t.size() && (t[i] == '.' || t[i] == ')') && t[i + 1] == ' ') {
    content = trim(t.substr(i + 2));
    return true;
  }
  return false;
}

std::string strip_quotes(std::string_view s) {
  s = trim(s);
  const std::pair<std::string_view, std::string_view> pairs[] = {
      {"\"", "\""}, {"\xE2\x80\x9C", "\xE2\x80\x9D"}};  // “ ”
  for (const auto& [open, close] : pairs) {
    if (s.size() >= open.size() + close.size() && s.substr(0, open.size()) == open &&
        s.substr(s.size() - close.size()) == close) {
      return std::string(trim(s.substr(open.size(), s.size() - open.size() - close.size())));
    }
  }
  return std::string(s);
}

}  // namespace

std::string_view to_string(Confidence c) {
  switch (c) {
    case Confidence::high: return "High";
    case Confidence::medium: return "Medium";
    case Confidence::low: return "Low";
  }
  return "Unknown";
}

std::string InstructionBlock::text() const {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += '\n';
    out += "- " + replace_all(items[i], "\n", "\n  ");
  }
  return out;
}

InstructionBlock InstructionBlock::from_text(std::string_view text, std::size_t source_iteration) {
  const auto lines = split_lines(text);
  std::string_view scratch;
  const bool bulleted =
      std::any_of(lines.begin(), lines.end(), [&](std::string_view l) { return is_bullet(l, scratch); });

  InstructionBlock block;
  block.source_iteration = source_iteration;
  std::string current;
  const auto flush = [&] {
    std::string item = strip_quotes(current);
    if (!item.empty()) block.items.push_back(std::move(item));
    current.clear();
  };
  for (std::string_view line : lines) {
    std::string_view content;
    if (bulleted && is_bullet(line, content)) {
      flush();
      current = std::string(content);
    } else if (trim(line).empty()) {
      if (!bulleted) flush();
    } else {
      if (!current.empty()) current += '\n';
      current += trim(line);
    }
  }
  flush();
  block.over_limit = block.items.size() > kInstructionSoftLimit;
  return block;
}

ForecastReply parse_forecast_reply(std::string_view text, std::size_t horizon) {
  const auto lines = split_lines(text);
  const auto at = find_marker(lines, "predicted values:", 0, /*last=*/true);
  if (!at) {
    throw ParseError(ParseErrorKind::missing_marker, "reply has no 'Predicted Values:' marker",
                     std::string(text.substr(0, 200)));
  }

  // Bracketed list, possibly spanning lines.
  std::string tail = *after_marker(lines[*at], "predicted values:");
  for (std::size_t i = *at + 1; i < lines.size(); ++i) {
    tail += '\n';
    tail += lines[i];
  }
  const std::size_t open = tail.find('[');
  if (open == std::string::npos || !trim(std::string_view(tail).substr(0, open)).empty()) {
    throw ParseError(ParseErrorKind::unbalanced_bracket, "'Predicted Values:' is not followed by '['",
                     tail.substr(0, 200));
  }
  const std::size_t close = tail.find(']', open);
  if (close == std::string::npos) {
    throw ParseError(ParseErrorKind::unbalanced_bracket, "unterminated value list",
                     tail.substr(open, 200));
  }
  const std::string_view body = std::string_view(tail).substr(open + 1, close - open - 1);

  ForecastReply reply;
  if (!trim(body).empty()) {
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = body.find(',', pos);
      const std::string_view token =
          trim(body.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
      double v = 0.0;
      if (!parse_real(token, v)) {
        throw ParseError(ParseErrorKind::non_numeric,
                         "non-numeric predicted value '" + std::string(token) + "'", std::string(token));
      }
      reply.values.push_back(v);
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
  }
  if (reply.values.size() != horizon) {
    throw ParseError(ParseErrorKind::count_mismatch,
                     "expected " + std::to_string(horizon) + " predicted values, got " +
                         std::to_string(reply.values.size()),
                     std::string(body.substr(0, 200)));
  }

  if (const auto r = find_marker(lines, "reasoning:")) reply.reasoning = section_text(lines, *r, "reasoning:");
  if (const auto c = find_marker(lines, "certainty estimate:")) {
    std::string v = section_text(lines, *c, "certainty estimate:");
    v.erase(std::remove_if(v.begin(), v.end(), [](char ch) { return ch == '[' || ch == ']' || ch == '%'; }),
            v.end());
    std::string_view num = trim(v);
    const std::size_t end = num.find_first_of(" \t\n");
    double pct = 0.0;
    if (parse_real(num.substr(0, end), pct) && pct >= 0.0 && pct <= 100.0) reply.certainty = pct;
  }
  if (const auto cr = find_marker(lines, "certainty reasoning:")) {
    reply.certainty_reasoning = section_text(lines, *cr, "certainty reasoning:");
  }
  return reply;
}

RefinerReply parse_refiner_reply(std::string_view text) {
  const auto lines = split_lines(text);
  const auto done_at = find_marker(lines, "done:");
  if (!done_at) {
    throw ParseError(ParseErrorKind::missing_marker, "refiner reply has no 'Done:' marker",
                     std::string(text.substr(0, 200)));
  }
  const auto learn_at = find_marker(lines, "learnings:");
  if (learn_at && *learn_at > *done_at) {
    throw ParseError(ParseErrorKind::grammar, "'Learnings:' must precede 'Done:'",
                     std::string(lines[*learn_at]));
  }

  RefinerReply reply;
  const std::string raw_flag = *after_marker(lines[*done_at], "done:");
  const std::string flag = lower(trim(raw_flag, " \t<>.'\"_"));
  if (flag == "true") {
    reply.done = true;
  } else if (flag == "false") {
    reply.done = false;
  } else {
    throw ParseError(ParseErrorKind::bad_boolean, "'Done:' must be True or False, got '" + raw_flag + "'",
                     raw_flag);
  }

  if (learn_at) {
    std::string learnings = *after_marker(lines[*learn_at], "learnings:");
    for (std::size_t i = *learn_at + 1; i < *done_at; ++i) {
      learnings += '\n';
      learnings += lines[i];
    }
    reply.learnings = std::string(trim(learnings));
  }
  std::string token;
  if (contains_placeholder(reply.learnings, &token)) {
    throw ParseError(ParseErrorKind::placeholder, "learnings contain placeholder " + token, token);
  }
  if (!reply.done && reply.learnings.empty()) {
    throw ParseError(learn_at ? ParseErrorKind::empty_body : ParseErrorKind::missing_marker,
                     "refiner reply with 'Done: False' needs non-empty 'Learnings:'",
                     std::string(text.substr(0, 200)));
  }

  if (const auto conf_at = find_marker(lines, "confidence in output:", *done_at + 1)) {
    const std::string rest = *after_marker(lines[*conf_at], "confidence in output:");
    std::string_view v = trim(rest, " \t<>");
    std::size_t word_end = 0;
    while (word_end < v.size() && std::isalpha(static_cast<unsigned char>(v[word_end]))) ++word_end;
    const std::string word = lower(v.substr(0, word_end));
    if (word == "high") reply.confidence = Confidence::high;
    if (word == "medium") reply.confidence = Confidence::medium;
    if (word == "low") reply.confidence = Confidence::low;
    if (reply.confidence) {
      std::string_view r = v.substr(word_end);
      while (!r.empty() && std::string_view(" \t<>|:.-").find(r.front()) != std::string_view::npos) {
        r.remove_prefix(1);
      }
      r = trim(r, " \t>");
      // en and em dashes
      for (std::string_view dash : {"\xE2\x80\x93", "\xE2\x80\x94"}) {
        if (r.substr(0, dash.size()) == dash) r = trim(r.substr(dash.size()));
      }
      if (!r.empty()) reply.rationale = std::string(r);
    }
  }
  return reply;
}

InstructionBlock parse_instructions_reply(std::string_view text, std::size_t source_iteration) {
  const auto lines = split_lines(text);
  std::string body;
  if (const auto cue = find_marker(lines, "refined prompt forecasting instructions:")) {
    body = *after_marker(lines[*cue], "refined prompt forecasting instructions:");
    for (std::size_t i = *cue + 1; i < lines.size(); ++i) {
      body += '\n';
      body += lines[i];
    }
  } else {
    body = std::string(text);
  }

  std::string token;
  if (contains_placeholder(body, &token)) {
    throw ParseError(ParseErrorKind::placeholder, "instructions contain placeholder " + token, token);
  }
  if (trim(body).empty()) {
    throw ParseError(ParseErrorKind::empty_body, "instruction reply is empty", std::string(text.substr(0, 200)));
  }
  InstructionBlock block = InstructionBlock::from_text(body, source_iteration);
  if (block.items.empty()) {
    throw ParseError(ParseErrorKind::empty_body, "instruction reply has no items", std::string(text.substr(0, 200)));
  }
  return block;
}

}  // namespace flairr
