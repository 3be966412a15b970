#include "flairr/backend.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "flairr/errors.hpp"

namespace flairr {

std::string_view to_string(AgentTag tag) {
  switch (tag) {
    case AgentTag::forecaster: return "forecaster";
    case AgentTag::refiner: return "refiner";
    case AgentTag::synthesis: return "synthesis";
  }
  return "unknown";
}

std::optional<AgentTag> parse_agent_tag(std::string_view text) {
  if (text == "forecaster") return AgentTag::forecaster;
  if (text == "refiner") return AgentTag::refiner;
  if (text == "synthesis") return AgentTag::synthesis;
  return std::nullopt;
}

TokenCounts estimate_tokens(std::string_view prompt, std::string_view reply) {
  const auto est = [](std::string_view s) { return static_cast<std::int64_t>((s.size() + 3) / 4); };
  return TokenCounts{est(prompt), est(reply)};
}

std::string prompt_hash(std::string_view prompt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : prompt) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::chrono::milliseconds RetryPolicy::delay_for(int retry) const {
  if (backoff.empty()) return std::chrono::milliseconds(0);
  const auto idx = static_cast<std::size_t>(std::max(retry, 0));
  return idx < backoff.size() ? backoff[idx] : backoff.back();
}

CallbackBackend::CallbackBackend(Fn fn, std::string name) : fn_(std::move(fn)), name_(std::move(name)) {}

CompletionReply CallbackBackend::complete(const CompletionRequest& request) {
  const auto t0 = std::chrono::steady_clock::now();
  CompletionReply reply;
  reply.text = fn_(request);
  reply.latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
  reply.backend_id = name_;
  reply.tokens = estimate_tokens(request.prompt, reply.text);
  return reply;
}

RecordingBackend::RecordingBackend(std::shared_ptr<Backend> inner, const std::filesystem::path& sink)
    : inner_(std::move(inner)), sink_(sink) {
  if (!inner_) throw ConfigError("recording backend needs an inner backend");
  std::ofstream probe(sink_, std::ios::app);
  if (!probe) throw BackendError("cannot open recording sink '" + sink_.string() + "'");
}

CompletionReply RecordingBackend::complete(const CompletionRequest& request) {
  CompletionReply reply = inner_->complete(request);
  nlohmann::json line{{"hash", prompt_hash(request.prompt)},
                      {"tag", std::string(to_string(request.tag))},
                      {"prompt", request.prompt},
                      {"reply", reply.text}};
  std::lock_guard lock(mutex_);
  std::ofstream out(sink_, std::ios::app | std::ios::binary);
  out << line.dump() << '\n';
  if (!out) throw BackendError("failed writing recording sink '" + sink_.string() + "'");
  return reply;
}

std::shared_ptr<Backend> record(std::shared_ptr<Backend> inner, const std::filesystem::path& sink) {
  return std::make_shared<RecordingBackend>(std::move(inner), sink);
}

}  // namespace flairr
