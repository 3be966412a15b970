#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "flairr/backend.hpp"
#include "flairr/errors.hpp"

namespace flairr {

ScriptEntry parse_script_line(std::string_view line) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad script line: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("reply") || !doc["reply"].is_string()) {
    throw ConfigError("script line needs a string 'reply'");
  }
  ScriptEntry entry;
  entry.reply = doc["reply"].get<std::string>();
  if (doc.contains("ordinal")) {
    if (!doc["ordinal"].is_number_unsigned() || doc["ordinal"].get<std::size_t>() == 0) {
      throw ConfigError("script 'ordinal' must be a positive integer");
    }
    entry.ordinal = doc["ordinal"].get<std::size_t>();
  }
  if (doc.contains("pattern")) entry.pattern = doc["pattern"].get<std::string>();
  if (doc.contains("prompt")) entry.prompt = doc["prompt"].get<std::string>();
  if (doc.contains("tag")) {
    const auto name = doc["tag"].get<std::string>();
    entry.tag = parse_agent_tag(name);
    if (!entry.tag) throw ConfigError("unknown script tag '" + name + "'");
  }
  return entry;
}

std::vector<ScriptEntry> load_script(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open script '" + path.string() + "'");
  std::vector<ScriptEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') {
      continue;
    }
    try {
      entries.push_back(parse_script_line(line));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return entries;
}

ScriptMode infer_script_mode(const std::vector<ScriptEntry>& entries) {
  const bool any_ordinal = std::any_of(entries.begin(), entries.end(), [](const ScriptEntry& e) {
    return e.ordinal.has_value();
  });
  const bool all_plain = std::all_of(entries.begin(), entries.end(), [](const ScriptEntry& e) {
    return !e.pattern && !e.prompt && !e.tag;
  });
  return any_ordinal || all_plain ? ScriptMode::ordinal : ScriptMode::pattern;
}

ScriptedBackend::ScriptedBackend(std::vector<ScriptEntry> entries, ScriptMode mode, std::string name)
    : entries_(std::move(entries)), mode_(mode), name_(std::move(name)) {
  if (mode_ == ScriptMode::ordinal) {
    const auto with = std::count_if(entries_.begin(), entries_.end(),
                                    [](const ScriptEntry& e) { return e.ordinal.has_value(); });
    if (with != 0) {
      if (static_cast<std::size_t>(with) != entries_.size()) {
        throw ConfigError("script mixes entries with and without 'ordinal'");
      }
      std::stable_sort(entries_.begin(), entries_.end(),
                       [](const ScriptEntry& a, const ScriptEntry& b) { return *a.ordinal < *b.ordinal; });
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (*entries_[i].ordinal != i + 1) {
          throw ConfigError("script ordinals must be exactly 1.." + std::to_string(entries_.size()));
        }
      }
    }
  }
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::filesystem::path& path,
                                                            std::optional<ScriptMode> mode) {
  auto entries = load_script(path);
  const ScriptMode m = mode.value_or(infer_script_mode(entries));
  return std::make_unique<ScriptedBackend>(std::move(entries), m, "scripted:" + path.filename().string());
}

std::size_t ScriptedBackend::consumed() const {
  std::lock_guard lock(mutex_);
  return next_;
}

namespace {

bool tag_ok(const ScriptEntry& e, AgentTag tag) { return !e.tag || *e.tag == tag; }

// One reply for a set of equally specific candidates; differing replies make
// the match ambiguous.
const std::string* unique_reply(const std::vector<const ScriptEntry*>& candidates, std::string_view kind) {
  if (candidates.empty()) return nullptr;
  for (const ScriptEntry* c : candidates) {
    if (c->reply != candidates.front()->reply) {
      throw BackendError("ambiguous script: " + std::to_string(candidates.size()) + " " +
                         std::string(kind) + " entries match with different replies");
    }
  }
  return &candidates.front()->reply;
}

}  // namespace

CompletionReply ScriptedBackend::complete(const CompletionRequest& request) {
  const auto t0 = std::chrono::steady_clock::now();
  std::string text;
  {
    std::lock_guard lock(mutex_);
    if (mode_ == ScriptMode::ordinal) {
      if (next_ >= entries_.size()) {
        throw BackendError("script exhausted: request " + std::to_string(next_ + 1) + " but only " +
                           std::to_string(entries_.size()) + " entries");
      }
      const ScriptEntry& e = entries_[next_];
      if (!tag_ok(e, request.tag)) {
        throw BackendError("script entry " + std::to_string(next_ + 1) + " is tagged " +
                           std::string(to_string(*e.tag)) + " but the request is " +
                           std::string(to_string(request.tag)));
      }
      ++next_;
      text = e.reply;
    } else {
      std::vector<const ScriptEntry*> exact;
      std::vector<const ScriptEntry*> substring;
      std::vector<const ScriptEntry*> by_tag;
      std::vector<const ScriptEntry*> fallback;
      for (const auto& e : entries_) {
        if (!tag_ok(e, request.tag)) continue;
        if (e.prompt) {
          if (*e.prompt == request.prompt) exact.push_back(&e);
        } else if (e.pattern) {
          if (request.prompt.find(*e.pattern) != std::string::npos) substring.push_back(&e);
        } else if (e.tag) {
          by_tag.push_back(&e);
        } else {
          fallback.push_back(&e);
        }
      }
      if (!exact.empty()) {
        // Recordings may hold the same prompt several times; replay them in
        // recorded order and keep answering with the last one.
        std::size_t& uses = prompt_uses_[request.prompt];
        text = exact[std::min(uses, exact.size() - 1)]->reply;
        ++uses;
      } else if (const std::string* r = unique_reply(substring, "pattern")) {
        text = *r;
      } else if (const std::string* r2 = unique_reply(by_tag, "tag")) {
        text = *r2;
      } else if (const std::string* r3 = unique_reply(fallback, "catch-all")) {
        text = *r3;
      } else {
        throw BackendError("no script entry matches " + std::string(to_string(request.tag)) +
                           " request (prompt hash " + prompt_hash(request.prompt) + ")");
      }
      ++next_;
    }
  }
  CompletionReply reply;
  reply.text = std::move(text);
  reply.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
  reply.backend_id = name_;
  reply.tokens = estimate_tokens(request.prompt, reply.text);
  return reply;
}

}  // namespace flairr
