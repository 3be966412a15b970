#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flairr {

enum class AgentTag { forecaster, refiner, synthesis };

std::string_view to_string(AgentTag tag);
std::optional<AgentTag> parse_agent_tag(std::string_view text);

inline constexpr int kDefaultMaxTokens = 4096;

struct CompletionRequest {
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = kDefaultMaxTokens;
  AgentTag tag = AgentTag::forecaster;
  std::optional<std::uint64_t> seed;
};

struct TokenCounts {
  std::int64_t input = 0;
  std::int64_t output = 0;

  std::int64_t total() const noexcept { return input + output; }
};

struct CompletionReply {
  std::string text;
  std::chrono::milliseconds latency{0};
  std::string backend_id;
  std::optional<TokenCounts> tokens;
};

// A completion source. Implementations must tolerate concurrent calls and
// must not modify the request.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual CompletionReply complete(const CompletionRequest& request) = 0;
  virtual std::string id() const = 0;
};

// Rough chars/4 token estimate used by offline backends.
TokenCounts estimate_tokens(std::string_view prompt, std::string_view reply);

// 64-bit FNV-1a of the prompt, as 16 hex digits.
std::string prompt_hash(std::string_view prompt);

// ---------------------------------------------------------------------------
// Scripted backend

struct ScriptEntry {
  std::optional<std::size_t> ordinal;
  std::optional<std::string> pattern;  // substring of the prompt
  std::optional<std::string> prompt;   // exact prompt (recordings)
  std::optional<AgentTag> tag;
  std::string reply;
};

enum class ScriptMode {
  // Entries answer requests in order; running past the end is an error.
  ordinal,
  // Each request resolves to exactly one entry by exact prompt, then
  // substring pattern, then tag.
  pattern,
};

// Ordinal when any entry carries an ordinal or every entry is match-free.
ScriptMode infer_script_mode(const std::vector<ScriptEntry>& entries);

// One JSON object per line: {"reply": ...} plus optional "ordinal", "pattern",
// "prompt", "tag". Blank lines and lines starting with '#' are skipped.
std::vector<ScriptEntry> load_script(const std::filesystem::path& path);
ScriptEntry parse_script_line(std::string_view line);

class ScriptedBackend final : public Backend {
 public:
  ScriptedBackend(std::vector<ScriptEntry> entries, ScriptMode mode, std::string name = "scripted");
  static std::unique_ptr<ScriptedBackend> from_file(const std::filesystem::path& path,
                                                    std::optional<ScriptMode> mode = std::nullopt);

  CompletionReply complete(const CompletionRequest& request) override;
  std::string id() const override { return name_; }
  ScriptMode mode() const noexcept { return mode_; }
  std::size_t consumed() const;

 private:
  std::vector<ScriptEntry> entries_;
  ScriptMode mode_;
  std::string name_;
  mutable std::mutex mutex_;
  std::size_t next_ = 0;
  std::map<std::string, std::size_t, std::less<>> prompt_uses_;
};

// Backend driven by a callable; the callable must be thread-safe if the
// backend is shared.
class CallbackBackend final : public Backend {
 public:
  using Fn = std::function<std::string(const CompletionRequest&)>;

  explicit CallbackBackend(Fn fn, std::string name = "callback");

  CompletionReply complete(const CompletionRequest& request) override;
  std::string id() const override { return name_; }

 private:
  Fn fn_;
  std::string name_;
};

// ---------------------------------------------------------------------------
// Recording

// Wraps a backend and appends one JSON line per completed request: hash, tag,
// full prompt, reply. The file is a valid script in either mode.
class RecordingBackend final : public Backend {
 public:
  RecordingBackend(std::shared_ptr<Backend> inner, const std::filesystem::path& sink);

  CompletionReply complete(const CompletionRequest& request) override;
  std::string id() const override { return inner_->id(); }

 private:
  std::shared_ptr<Backend> inner_;
  std::filesystem::path sink_;
  std::mutex mutex_;
};

std::shared_ptr<Backend> record(std::shared_ptr<Backend> inner, const std::filesystem::path& sink);

// ---------------------------------------------------------------------------
// HTTP chat-completion backend

inline constexpr std::string_view kApiKeyEnv = "FLAIRR_API_KEY";

struct RetryPolicy {
  int max_retries = 3;
  std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(1000),
                                                 std::chrono::milliseconds(2000),
                                                 std::chrono::milliseconds(4000)};

  std::chrono::milliseconds delay_for(int retry) const;
};

struct HttpConfig {
  std::string endpoint_url;
  std::string model_name;
  std::optional<std::string> api_key;  // read from FLAIRR_API_KEY when absent
  int timeout_s = 120;
  RetryPolicy retry;
};

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpConfig config);

  CompletionReply complete(const CompletionRequest& request) override;
  std::string id() const override { return "http:" + config_.model_name; }

  // Request body in the chat-completion JSON shape.
  std::string request_body(const CompletionRequest& request) const;

 private:
  HttpConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

// Extracts choices[0].message.content and usage from a chat-completion body.
CompletionReply parse_chat_completion(std::string_view body);

}  // namespace flairr
