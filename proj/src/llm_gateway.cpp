#include "ascore/llm_gateway.hpp"

#include <algorithm>
#include <thread>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"

namespace ascore::llm {

using nlohmann::json;

std::string to_string(BackendKind k) {
  return k == BackendKind::http ? "http" : "mock";
}

BackendKind backend_from_string(const std::string& s) {
  if (s == "http") return BackendKind::http;
  if (s == "mock") return BackendKind::mock;
  throw UsageError("unknown backend '" + s + "' (expected http or mock)");
}

json to_json(const CompletionRequest& r) {
  json messages = json::array();
  for (const auto& m : r.messages) {
    messages.push_back({{"role", m.role}, {"content", m.content}});
  }
  return {{"model_name", r.model_name},
          {"messages", messages},
          {"temperature", r.temperature},
          {"sample_index", r.sample_index},
          {"max_tokens", r.max_tokens}};
}

CompletionRequest request_from_json(const json& j) {
  CompletionRequest r;
  r.model_name = j.at("model_name").get<std::string>();
  for (const auto& m : j.at("messages")) {
    r.messages.push_back({m.at("role").get<std::string>(),
                          m.at("content").get<std::string>()});
  }
  r.temperature = j.at("temperature").get<double>();
  r.sample_index = j.at("sample_index").get<int>();
  r.max_tokens = j.at("max_tokens").get<int>();
  return r;
}

std::string cache_key(const CompletionRequest& request) {
  // Positional array: field order is part of the key format.
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back(json::array({m.role, m.content}));
  }
  const json canonical = json::array({"ascore-completion-v1", request.model_name,
                                      messages, request.temperature,
                                      request.sample_index, request.max_tokens});
  return sha256_hex(canonical.dump(-1, ' ', false,
                                   json::error_handler_t::replace));
}

GatewayConfig gateway_config_from_json(const json& j) {
  GatewayConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.extractor_model = j.value("extractor_model", c.extractor_model);
  c.featurizer_model = j.value("featurizer_model", c.featurizer_model);
  c.extractor_temperature = j.value("extractor_temperature", c.extractor_temperature);
  c.featurizer_temperature = j.value("featurizer_temperature", c.featurizer_temperature);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
  c.rpm = j.value("rpm", c.rpm);
  if (j.contains("cache_dir")) c.cache_dir = j.at("cache_dir").get<std::string>();
  if (j.contains("retry")) {
    const auto& r = j.at("retry");
    c.retry.max_attempts = r.value("max_attempts", c.retry.max_attempts);
    c.retry.base_delay = std::chrono::milliseconds(
        r.value("base_delay_ms", static_cast<int>(c.retry.base_delay.count())));
    c.retry.max_delay = std::chrono::milliseconds(
        r.value("max_delay_ms", static_cast<int>(c.retry.max_delay.count())));
  }
  c.timeout = std::chrono::seconds(j.value("timeout_s", static_cast<int>(c.timeout.count())));
  if (c.max_in_flight < 1) throw UsageError("max_in_flight must be >= 1");
  if (c.max_tokens < 1) throw UsageError("max_tokens must be >= 1");
  if (c.retry.max_attempts < 1) throw UsageError("retry.max_attempts must be >= 1");
  if (c.featurizer_temperature < 0 || c.extractor_temperature < 0) {
    throw UsageError("temperature must be non-negative");
  }
  return c;
}

json to_json(const GatewayConfig& c) {
  return {{"base_url", c.base_url},
          {"api_key_env", c.api_key_env},
          {"extractor_model", c.extractor_model},
          {"featurizer_model", c.featurizer_model},
          {"extractor_temperature", c.extractor_temperature},
          {"featurizer_temperature", c.featurizer_temperature},
          {"max_tokens", c.max_tokens},
          {"max_in_flight", c.max_in_flight},
          {"rpm", c.rpm},
          {"cache_dir", c.cache_dir.string()},
          {"retry",
           {{"max_attempts", c.retry.max_attempts},
            {"base_delay_ms", c.retry.base_delay.count()},
            {"max_delay_ms", c.retry.max_delay.count()}}},
          {"timeout_s", c.timeout.count()}};
}

Gateway::Gateway(std::shared_ptr<Backend> backend, GatewayConfig config)
    : backend_(std::move(backend)), config_(std::move(config)) {
  if (!backend_) throw UsageError("gateway requires a backend");
  if (config_.max_in_flight < 1) throw UsageError("max_in_flight must be >= 1");
}

std::optional<Gateway::Record> Gateway::lookup(const std::string& key) {
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = memory_.find(key); it != memory_.end()) return it->second;
  }
  if (config_.cache_dir.empty()) return std::nullopt;
  const auto path = config_.cache_dir / (key + ".json");
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  try {
    const json j = json::parse(read_text_file(path));
    Record rec{j.at("text").get<std::string>(),
               backend_from_string(j.at("backend").get<std::string>())};
    std::lock_guard lock(cache_mutex_);
    memory_.emplace(key, rec);
    return rec;
  } catch (const std::exception&) {
    // A corrupt record is treated as a miss and rewritten.
    return std::nullopt;
  }
}

void Gateway::store(const std::string& key, const CompletionRequest& request,
                    const Record& record) {
  {
    std::lock_guard lock(cache_mutex_);
    memory_.insert_or_assign(key, record);
  }
  if (config_.cache_dir.empty()) return;
  const json j = {{"key", key},
                  {"request", to_json(request)},
                  {"text", record.text},
                  {"backend", to_string(record.backend)}};
  write_text_file_atomic(config_.cache_dir / (key + ".json"), j.dump(2) + "\n");
}

void Gateway::acquire_slot() {
  std::unique_lock lock(slot_mutex_);
  slot_cv_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
  ++in_flight_;
  int peak = peak_in_flight_.load();
  while (in_flight_ > peak && !peak_in_flight_.compare_exchange_weak(peak, in_flight_)) {
  }
}

void Gateway::release_slot() {
  {
    std::lock_guard lock(slot_mutex_);
    --in_flight_;
  }
  slot_cv_.notify_one();
}

void Gateway::pace() {
  if (config_.rpm <= 0.0) return;
  const auto spacing = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
      std::chrono::duration<double>(60.0 / config_.rpm));
  std::chrono::steady_clock::time_point start;
  {
    std::lock_guard lock(pace_mutex_);
    const auto now = std::chrono::steady_clock::now();
    start = std::max(now, next_start_);
    next_start_ = start + spacing;
  }
  std::this_thread::sleep_until(start);
}

CompletionResult Gateway::complete(const CompletionRequest& request) {
  if (request.messages.empty()) throw UsageError("completion request has no messages");
  if (request.sample_index < 0) throw UsageError("sample_index must be >= 0");
  if (request.max_tokens < 1) throw UsageError("max_tokens must be >= 1");
  if (request.temperature < 0.0) throw UsageError("temperature must be >= 0");

  const std::string key = cache_key(request);
  if (auto hit = lookup(key)) {
    cache_hits_.fetch_add(1);
    return {hit->text, true, hit->backend};
  }

  acquire_slot();
  std::string text;
  try {
    pace();
    backend_calls_.fetch_add(1);
    text = backend_->complete(request);
  } catch (...) {
    release_slot();
    throw;
  }
  release_slot();
  if (text.empty()) throw ProtocolError("backend returned an empty completion");

  const Record rec{text, backend_->kind()};
  store(key, request, rec);
  return {std::move(text), false, rec.backend};
}

}  // namespace ascore::llm
