#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "flairr/backend.hpp"
#include "flairr/errors.hpp"

namespace flairr {

namespace {

std::string excerpt(const std::string& body, std::size_t max = 300) {
  return body.size() <= max ? body : body.substr(0, max) + "...";
}

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

HttpBackend::HttpBackend(HttpConfig config) : config_(std::move(config)) {
  if (config_.endpoint_url.empty()) throw ConfigError("http backend needs endpoint_url");
  if (config_.model_name.empty()) throw ConfigError("http backend needs model_name");

  const std::string& url = config_.endpoint_url;
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint_url '" + url + "' has no scheme");
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw ConfigError("endpoint_url scheme must be http or https, got '" + scheme + "'");
  }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (scheme == "https") throw ConfigError("this build has no TLS support; use an http:// endpoint");
#endif
  const std::size_t path_begin = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : url.substr(path_begin);

  if (!config_.api_key) {
    if (const char* key = std::getenv(std::string(kApiKeyEnv).c_str())) config_.api_key = key;
  }
}

std::string HttpBackend::request_body(const CompletionRequest& request) const {
  nlohmann::json body{
      {"model", config_.model_name},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})},
      {"temperature", request.temperature},
      {"max_tokens", request.max_tokens},
  };
  if (request.seed) body["seed"] = *request.seed;
  return body.dump();
}

CompletionReply parse_chat_completion(std::string_view body) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    throw BackendError("chat completion body is not JSON: " + excerpt(std::string(body)));
  }
  const auto* content = [&]() -> const nlohmann::json* {
    if (!doc.contains("choices") || !doc["choices"].is_array() || doc["choices"].empty()) return nullptr;
    const auto& choice = doc["choices"][0];
    if (!choice.contains("message") || !choice["message"].contains("content")) return nullptr;
    return &choice["message"]["content"];
  }();
  if (!content || !content->is_string()) {
    throw BackendError("chat completion body has no choices[0].message.content: " +
                       excerpt(std::string(body)));
  }
  CompletionReply reply;
  reply.text = content->get<std::string>();
  if (doc.contains("usage") && doc["usage"].is_object()) {
    const auto& usage = doc["usage"];
    reply.tokens = TokenCounts{usage.value("prompt_tokens", std::int64_t{0}),
                               usage.value("completion_tokens", std::int64_t{0})};
  }
  return reply;
}

CompletionReply HttpBackend::complete(const CompletionRequest& request) {
  if (request.prompt.empty()) throw BackendError("empty prompt");
  const std::string body = request_body(request);

  httplib::Headers headers;
  if (config_.api_key && !config_.api_key->empty()) {
    headers.emplace("Authorization", "Bearer " + *config_.api_key);
  }

  const auto t0 = std::chrono::steady_clock::now();
  std::string last_error;
  for (int attempt = 0; attempt <= config_.retry.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(config_.retry.delay_for(attempt - 1));

    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(config_.timeout_s, 0);
    client.set_read_timeout(config_.timeout_s, 0);
    client.set_write_timeout(config_.timeout_s, 0);

    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 200 && res->status < 300) {
      CompletionReply reply = parse_chat_completion(res->body);
      reply.latency =
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
      reply.backend_id = id();
      return reply;
    }
    last_error = "HTTP " + std::to_string(res->status) + ": " + excerpt(res->body);
    if (!retryable_status(res->status)) throw BackendError(last_error);
  }
  throw BackendError("completion failed after " + std::to_string(config_.retry.max_retries + 1) +
                     " attempts; last error " + last_error);
}

}  // namespace flairr
