#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <thread>

#include "ascore/errors.hpp"
#include "ascore/llm_gateway.hpp"

namespace ascore::llm {

using nlohmann::json;

namespace {

std::atomic<std::uint64_t> g_attempts{0};

std::string credential_from_env(const std::string& var) {
  const char* value = std::getenv(var.c_str());
  if (value == nullptr || *value == '\0') {
    throw CredentialError("environment variable " + var +
                          " is not set; the http backend needs an API key");
  }
  return value;
}

bool transient_status(int status) {
  return status == 408 || status == 429 || (status >= 500 && status <= 599);
}

}  // namespace

std::uint64_t HttpBackend::attempts_made() { return g_attempts.load(); }

HttpBackend::HttpBackend(HttpBackendConfig config)
    : HttpBackend(config, credential_from_env(config.api_key_env)) {}

HttpBackend::HttpBackend(HttpBackendConfig config, std::string api_key)
    : config_(std::move(config)),
      api_key_(std::move(api_key)),
      sleeper_([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
  const std::string& url = config_.base_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw UsageError("base_url must include a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

std::string HttpBackend::complete(const CompletionRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", m.role}, {"content", m.content}});
  }
  const json body = {{"model", request.model_name},
                     {"messages", messages},
                     {"temperature", request.temperature},
                     {"max_tokens", request.max_tokens}};
  const std::string payload = body.dump();
  const std::string path = path_prefix_ + "/chat/completions";

  std::string last_error;
  for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
    httplib::Client client(origin_);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);
    client.set_bearer_token_auth(api_key_);

    g_attempts.fetch_add(1);
    auto res = client.Post(path, payload, "application/json");
    std::chrono::milliseconds retry_after{0};
    if (!res) {
      last_error = "transport: " + httplib::to_string(res.error());
    } else if (res->status == 401 || res->status == 403) {
      throw CredentialError("backend rejected the credential (HTTP " +
                            std::to_string(res->status) + ")");
    } else if (transient_status(res->status)) {
      last_error = "HTTP " + std::to_string(res->status);
      if (res->has_header("Retry-After")) {
        const auto secs = std::atoi(res->get_header_value("Retry-After").c_str());
        if (secs > 0) retry_after = std::chrono::seconds(secs);
      }
    } else if (res->status != 200) {
      throw ProtocolError("unexpected HTTP " + std::to_string(res->status) +
                          ": " + res->body.substr(0, 200));
    } else {
      try {
        const json j = json::parse(res->body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        if (!content.is_string() || content.get<std::string>().empty()) {
          throw ProtocolError("completion content is missing or empty");
        }
        return content.get<std::string>();
      } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed completion response: ") +
                            e.what());
      }
    }

    if (attempt < config_.retry.max_attempts) {
      std::chrono::milliseconds delay = config_.retry.base_delay * (1LL << std::min(attempt - 1, 20));
      delay = std::min(delay, config_.retry.max_delay);
      sleeper_(std::max(delay, std::chrono::milliseconds(
                                   std::chrono::duration_cast<std::chrono::milliseconds>(retry_after))));
    }
  }
  throw TransportError("request failed after " +
                       std::to_string(config_.retry.max_attempts) +
                       " attempts: " + last_error);
}

}  // namespace ascore::llm
