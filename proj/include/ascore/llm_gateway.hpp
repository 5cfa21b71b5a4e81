#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace ascore::llm {

struct Message {
  std::string role;
  std::string content;

  bool operator==(const Message&) const = default;
};

struct CompletionRequest {
  std::string model_name;
  std::vector<Message> messages;
  double temperature = 0.7;
  /// Distinguishes repeated stochastic draws of the same prompt.
  int sample_index = 0;
  int max_tokens = 1024;

  bool operator==(const CompletionRequest&) const = default;
};

enum class BackendKind { http, mock };
std::string to_string(BackendKind k);
BackendKind backend_from_string(const std::string& s);

struct CompletionResult {
  std::string text;
  bool cached = false;
  BackendKind backend = BackendKind::mock;
};

nlohmann::json to_json(const CompletionRequest& r);
CompletionRequest request_from_json(const nlohmann::json& j);

/// SHA-256 over a canonical JSON serialization of every request field.
std::string cache_key(const CompletionRequest& request);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual BackendKind kind() const = 0;
  /// Returns the completion text. Implementations throw TransportError,
  /// CredentialError or ProtocolError.
  virtual std::string complete(const CompletionRequest& request) = 0;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{30000};
};

struct HttpBackendConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key_env = "OPENAI_API_KEY";
  RetryPolicy retry;
  std::chrono::seconds timeout{120};
};

/// OpenAI-compatible chat-completions client. Transient failures (transport
/// errors, 429, 5xx) are retried with exponential backoff; 401/403 fail
/// immediately with CredentialError.
class HttpBackend : public Backend {
 public:
  /// Reads the credential from the configured environment variable; throws
  /// CredentialError when it is unset.
  explicit HttpBackend(HttpBackendConfig config);
  HttpBackend(HttpBackendConfig config, std::string api_key);

  BackendKind kind() const override { return BackendKind::http; }
  std::string complete(const CompletionRequest& request) override;

  /// HTTP attempts made by any HttpBackend in this process.
  static std::uint64_t attempts_made();

  /// Replaces the sleep used between retries (tests).
  void set_sleeper(std::function<void(std::chrono::milliseconds)> sleeper) {
    sleeper_ = std::move(sleeper);
  }

 private:
  HttpBackendConfig config_;
  std::string api_key_;
  std::string origin_;       // scheme://host[:port]
  std::string path_prefix_;  // e.g. /v1
  std::function<void(std::chrono::milliseconds)> sleeper_;
};

/// Pure-function backend for offline runs: answers extraction prompts with a
/// frequency-ranked phrase list and labeling prompts with `mock_label_rule`.
class MockBackend : public Backend {
 public:
  /// `noise` is the probability that a label draw is replaced by a different
  /// label, chosen by hashing the request (so it stays deterministic).
  explicit MockBackend(double noise = 0.0) : noise_(noise) {}

  BackendKind kind() const override { return BackendKind::mock; }
  std::string complete(const CompletionRequest& request) override;

 private:
  double noise_;
};

struct GatewayConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key_env = "OPENAI_API_KEY";
  std::string extractor_model = "gpt-4.1";
  std::string featurizer_model = "gpt-4.1-mini";
  double extractor_temperature = 0.7;
  double featurizer_temperature = 0.7;
  int max_tokens = 1024;
  int max_in_flight = 8;
  /// Requests-per-minute ceiling for backend calls; 0 disables it.
  double rpm = 0.0;
  std::filesystem::path cache_dir;  // empty keeps the cache in memory only
  RetryPolicy retry;
  std::chrono::seconds timeout{120};
};

GatewayConfig gateway_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GatewayConfig& c);

/// Caching, concurrency-limited front for a Backend. Safe to share between
/// threads.
class Gateway {
 public:
  Gateway(std::shared_ptr<Backend> backend, GatewayConfig config);

  CompletionResult complete(const CompletionRequest& request);

  const GatewayConfig& config() const { return config_; }
  BackendKind backend_kind() const { return backend_->kind(); }

  std::uint64_t backend_calls() const { return backend_calls_.load(); }
  std::uint64_t cache_hits() const { return cache_hits_.load(); }
  int peak_in_flight() const { return peak_in_flight_.load(); }

 private:
  struct Record {
    std::string text;
    BackendKind backend;
  };

  std::optional<Record> lookup(const std::string& key);
  void store(const std::string& key, const CompletionRequest& request,
             const Record& record);
  void acquire_slot();
  void release_slot();
  void pace();

  std::shared_ptr<Backend> backend_;
  GatewayConfig config_;

  std::mutex cache_mutex_;
  std::unordered_map<std::string, Record> memory_;

  std::mutex slot_mutex_;
  std::condition_variable slot_cv_;
  int in_flight_ = 0;

  std::mutex pace_mutex_;
  std::chrono::steady_clock::time_point next_start_{};

  std::atomic<std::uint64_t> backend_calls_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
  std::atomic<int> peak_in_flight_{0};
};

}  // namespace ascore::llm
