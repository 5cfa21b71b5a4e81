#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ascore/dataset.hpp"
#include "ascore/llm_gateway.hpp"

namespace ascore::extraction {

struct AnalyticComponent {
  std::string id;  // "C1", "C2", ...; stable across edits
  std::string item_id;
  std::string part;
  int index = 0;  // position within part
  std::string text;
  std::string provenance;

  bool operator==(const AnalyticComponent&) const = default;
};

struct ComponentSet {
  std::string item_id;
  std::string created_at;
  std::string backend;
  std::string model_name;
  std::vector<AnalyticComponent> components;

  std::size_t size() const { return components.size(); }
  /// Position of the component in scoring order, or nullopt.
  std::optional<std::size_t> position(const std::string& component_id) const;
  /// Digest over (id, part, text) in order; metadata and provenance are
  /// excluded so that no-op edits keep the digest.
  std::string digest() const;

  bool operator==(const ComponentSet&) const = default;
};

nlohmann::json to_json(const ComponentSet& set);
ComponentSet component_set_from_json(const nlohmann::json& j);
ComponentSet load_component_set(const std::filesystem::path& path);
void save_component_set(const std::filesystem::path& path, const ComponentSet& set);

struct PromptOptions {
  std::size_t sample_size = 200;
  /// Upper bound on the characters of response text embedded in the prompt.
  std::size_t char_budget = 60000;
};

/// Indices of the responses embedded in an extraction prompt: stratified
/// over length terciles, evenly spaced within each tercile, then trimmed to
/// the character budget. Returned in ascending order.
std::vector<std::size_t> sample_for_prompt(std::span<const std::string> texts,
                                           const PromptOptions& options);

/// Extraction request for one part. Receives response texts only; scores are
/// never visible to this phase.
llm::CompletionRequest build_extraction_prompt(const dataset::Item& item,
                                               std::span<const std::string> texts,
                                               const std::string& part, int cap,
                                               const llm::GatewayConfig& config,
                                               const PromptOptions& options = {});

/// Numbered ("1.", "2)") or bulleted ("-", "*") entries, stripped. Throws
/// ExtractionParseError unless exactly `cap` entries are found.
std::vector<std::string> parse_component_list(const std::string& text, int cap);

struct ExtractOptions {
  PromptOptions prompt;
  /// Fresh completions tried per part before giving up.
  int parse_attempts = 3;
  /// Per-part cap override; nullopt uses the item's part caps.
  std::optional<int> cap;
};

/// One gateway call per part (parts run concurrently), retried with a new
/// sample_index on parse failure.
ComponentSet extract_components(const dataset::Item& item,
                                std::span<const std::string> texts,
                                llm::Gateway& gateway,
                                const ExtractOptions& options = {});

struct AddComponent {
  std::string part;
  std::string text;
  std::string note;
};
struct RemoveComponent {
  std::string id;
  std::string note;
};
struct RewriteComponent {
  std::string id;
  std::string text;
  std::string note;
};
using Edit = std::variant<AddComponent, RemoveComponent, RewriteComponent>;

struct EditResult {
  ComponentSet set;
  std::vector<std::string> warnings;
};

/// Applies edits in order. Indices are recomputed within each part; ids of
/// surviving components are unchanged and additions get fresh ids. Adding a
/// text that already exists is accepted with a warning.
EditResult edit_component_set(const ComponentSet& set, const std::vector<Edit>& edits);

Edit edit_from_json(const nlohmann::json& j);

}  // namespace ascore::extraction
