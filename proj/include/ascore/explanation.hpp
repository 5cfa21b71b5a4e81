#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ascore/extraction.hpp"
#include "ascore/featurizer.hpp"
#include "ascore/ordinal_scorer.hpp"

namespace ascore::explanation {

using featurizer::FeatureVector;
using featurizer::Label;

struct Row {
  std::string component_id;
  std::string component_text;
  Label label = Label::absent;
  double contribution = 0.0;
  bool overridden = false;

  bool operator==(const Row&) const = default;
};

struct Counterfactual {
  std::string component_id;
  Label alternative_label = Label::absent;
  double new_eta = 0.0;
  int new_score = 0;
  bool score_changed = false;

  bool operator==(const Counterfactual&) const = default;
};

struct Explanation {
  std::string response_id;
  int predicted_score = 0;
  double eta = 0.0;
  std::vector<double> thresholds;
  std::vector<Row> rows;
  /// Every single-label edit that changes the score, by component then label.
  std::vector<Counterfactual> counterfactuals;
  /// Index into counterfactuals of the score-raising edit with the smallest
  /// change in eta. It lands on predicted_score + 1 whenever any edit does.
  std::optional<std::size_t> next_higher;

  bool operator==(const Explanation&) const = default;
};

struct OverrideRecord {
  std::string response_id;
  std::string component_id;
  Label old_label = Label::absent;
  Label new_label = Label::absent;
  std::string author;
  std::string timestamp;
  std::string note;

  bool operator==(const OverrideRecord&) const = default;
};

/// `features_digest` is the component-set digest the features were computed
/// against. Throws StaleArtifactError unless it, the model's digest and the
/// component set agree.
Explanation explain(const ordinal::OrdinalModel& model,
                    const extraction::ComponentSet& components,
                    const FeatureVector& features,
                    const std::string& features_digest);

/// Base labels with the latest override per component substituted. The
/// overridden flags mark labels that differ from the base. Throws
/// NotFoundError for unknown component ids and UsageError for overrides of
/// another response.
FeatureVector apply_overrides(const FeatureVector& features,
                              std::span<const OverrideRecord> overrides,
                              const extraction::ComponentSet& components);

Explanation rescore_with_overrides(const ordinal::OrdinalModel& model,
                                   const extraction::ComponentSet& components,
                                   const FeatureVector& features,
                                   const std::string& features_digest,
                                   std::span<const OverrideRecord> overrides);

std::string render_text(const Explanation& explanation);

nlohmann::json to_json(const Explanation& e);
Explanation explanation_from_json(const nlohmann::json& j);

nlohmann::json to_json(const OverrideRecord& r);
/// Throws UsageError on malformed records or new_label == old_label.
OverrideRecord override_from_json(const nlohmann::json& j);

/// Records in file order; a missing file is an empty log.
std::vector<OverrideRecord> load_override_log(const std::filesystem::path& path);
void append_override(const std::filesystem::path& path, const OverrideRecord& record);
std::vector<OverrideRecord> overrides_for(std::span<const OverrideRecord> log,
                                          const std::string& response_id);

}  // namespace ascore::explanation
