#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ascore/dataset.hpp"
#include "ascore/extraction.hpp"
#include "ascore/llm_gateway.hpp"

namespace ascore::featurizer {

/// Presence of a component in a response: no, partial or direct paraphrase.
enum class Label : std::uint8_t { absent = 0, partial = 1, direct = 2 };

inline constexpr int kNumLabels = 3;

inline int to_int(Label l) { return static_cast<int>(l); }
/// Throws UsageError outside {0, 1, 2}.
Label label_from_int(int v);

struct LabelDraw {
  std::string response_id;
  std::string component_id;
  int sample_index = 0;
  std::string raw_text;  // full model output; kept for audit only
  Label parsed_label = Label::absent;

  bool operator==(const LabelDraw&) const = default;
};

nlohmann::json to_json(const LabelDraw& d);
LabelDraw label_draw_from_json(const nlohmann::json& j);

struct FeatureVector {
  std::string response_id;
  std::vector<Label> labels;  // one per component, in component order
  /// Per-component flag set when a human override changed the label. Empty
  /// means nothing was overridden.
  std::vector<bool> overridden;

  std::size_t k() const { return labels.size(); }
  bool is_overridden(std::size_t i) const {
    return i < overridden.size() && overridden[i];
  }
  /// Bit 3*i + label of block i is set; everything else is clear.
  std::vector<std::uint8_t> one_hot() const;

  bool operator==(const FeatureVector&) const = default;
};

/// Inverse of one_hot. Throws UsageError unless every block of three bits
/// has exactly one bit set.
std::vector<Label> decode_one_hot(std::span<const std::uint8_t> bits);

struct FeatureMatrix {
  std::string item_id;
  std::string component_set_digest;
  std::map<std::string, FeatureVector> rows;  // ordered by response id

  std::size_t k() const;

  bool operator==(const FeatureMatrix&) const = default;
};

nlohmann::json to_json(const FeatureMatrix& m);
/// Rebuilds the matrix; the one-hot encoding is recomputed from the labels.
FeatureMatrix feature_matrix_from_json(const nlohmann::json& j);
FeatureMatrix load_feature_matrix(const std::filesystem::path& path);
void save_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& m);

/// Chain-of-thought labeling request. The prompt text does not depend on the
/// draw; callers set sample_index per draw.
llm::CompletionRequest build_label_prompt(const dataset::Response& response,
                                          const extraction::AnalyticComponent& component,
                                          const dataset::Item& item,
                                          const llm::GatewayConfig& config);

/// Label from the last "LABEL: x" marker. Throws LabelParseError when the
/// marker is missing or x is not 0, 1 or 2.
Label parse_label(const std::string& raw_text);

struct Aggregate {
  Label label = Label::absent;
  int draws_used = 0;
};

/// Yields the next label, or nullopt when the source is exhausted.
using LabelSource = std::function<std::optional<Label>()>;

/// Consumes labels until one value has been seen three times. Never needs
/// more than seven. Throws AggregationError if the source runs dry first.
Aggregate aggregate_first_to_three(const LabelSource& next);
Aggregate aggregate_first_to_three(std::span<const Label> draws);

/// Offline stand-in for the labeling model: 2 if the component occurs in the
/// response (case-insensitive), else 1 if at least half of the component's
/// distinct content words (>= 4 letters) occur as words in the response,
/// else 0.
Label mock_label_rule(std::string_view response_text, std::string_view component_text);

struct FeaturizeOptions {
  /// Raw completions allowed per pair, including ones that fail to parse.
  int max_raw_draws = 12;
  /// Worker threads issuing pairs; 0 uses the gateway's max_in_flight.
  int workers = 0;
  bool keep_raw_text = true;
  bool allow_partial = false;
};

struct PairResult {
  Aggregate aggregate;
  std::vector<LabelDraw> draws;  // parsed draws in sample order
  int raw_draws = 0;
  int parse_failures = 0;
};

PairResult featurize_pair(const dataset::Response& response,
                          const extraction::AnalyticComponent& component,
                          const dataset::Item& item, llm::Gateway& gateway,
                          const FeaturizeOptions& options = {});

FeatureVector featurize_response(const dataset::Response& response,
                                 const extraction::ComponentSet& components,
                                 const dataset::Item& item, llm::Gateway& gateway,
                                 const FeaturizeOptions& options = {});

struct CorpusResult {
  FeatureMatrix matrix;
  /// Ordered by (response id, component order, sample index).
  std::vector<LabelDraw> draws;
  /// draws_used -> number of pairs.
  std::map<int, int> draws_used_histogram;
  std::vector<std::string> failures;
  int parse_failures = 0;
};

/// Featurizes every response of `responses` concurrently. Without
/// allow_partial any failed pair raises FeaturizationError listing all
/// failures; with it, responses with a failed pair are left out.
CorpusResult featurize_corpus(const dataset::Item& item,
                              std::span<const dataset::Response> responses,
                              const extraction::ComponentSet& components,
                              llm::Gateway& gateway,
                              const FeaturizeOptions& options = {});

std::vector<LabelDraw> load_draws(const std::filesystem::path& path);
void save_draws(const std::filesystem::path& path, std::span<const LabelDraw> draws);

/// Everything needed to export one item's distillation pairs.
struct DistillSource {
  const dataset::Dataset* dataset = nullptr;
  const extraction::ComponentSet* components = nullptr;
  const FeatureMatrix* matrix = nullptr;
  const std::vector<LabelDraw>* draws = nullptr;
};

struct DistillOptions {
  std::size_t n = 10000;
  std::uint64_t seed = 0;
  /// Responses eligible for sampling.
  std::vector<dataset::Split> splits = {dataset::Split::train, dataset::Split::valid};
  llm::GatewayConfig gateway;  // model name and temperature for the prompts
};

struct DistillStats {
  std::size_t pairs = 0;
  std::size_t records = 0;
};

/// Samples n (response, component) pairs uniformly across all sources and
/// writes every stored draw whose label matches the pair's aggregate as one
/// {prompt_messages, completion_text} line. Throws UsageError if fewer than
/// n pairs are available.
DistillStats export_distillation_pairs(std::span<const DistillSource> sources,
                                       const DistillOptions& options,
                                       const std::filesystem::path& out);

}  // namespace ascore::featurizer
