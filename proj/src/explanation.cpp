#include "ascore/explanation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"

namespace ascore::explanation {

namespace {

const char* mark(Label l) {
  switch (l) {
    case Label::direct:
      return "✓";
    case Label::partial:
      return "△";
    case Label::absent:
      break;
  }
  return "✗";
}

std::string fixed(double v, const char* fmt = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

std::string theta(std::size_t j, double v) {
  return "θ" + std::to_string(j) + " = " + fixed(v);
}

}  // namespace

Explanation explain(const ordinal::OrdinalModel& model,
                    const extraction::ComponentSet& components,
                    const FeatureVector& features,
                    const std::string& features_digest) {
  const std::string digest = components.digest();
  if (model.component_set_digest != digest) {
    throw StaleArtifactError("model for item " + model.item_id +
                             " was trained on a different component set");
  }
  if (features_digest != digest) {
    throw StaleArtifactError("features of " + features.response_id +
                             " were computed for a different component set");
  }
  if (model.k != components.size() || features.k() != components.size()) {
    throw StaleArtifactError("component count differs between model, features and components");
  }

  Explanation out;
  out.response_id = features.response_id;
  out.eta = ordinal::eta(model, features);
  out.predicted_score = ordinal::predict_from_eta(model, out.eta);
  out.thresholds = model.thresholds;

  const auto table = ordinal::contribution_table(model, features);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& c = components.components[i];
    out.rows.push_back({c.id, c.text, table[i].label, table[i].weight, features.is_overridden(i)});
  }

  FeatureVector edited = features;
  double best_gap = 0.0;
  for (std::size_t i = 0; i < model.k; ++i) {
    const Label original = features.labels[i];
    for (int alt = 0; alt < featurizer::kNumLabels; ++alt) {
      const Label l = featurizer::label_from_int(alt);
      if (l == original) continue;
      edited.labels[i] = l;
      const double new_eta = ordinal::eta(model, edited);
      const int new_score = ordinal::predict_from_eta(model, new_eta);
      if (new_score != out.predicted_score) {
        out.counterfactuals.push_back({components.components[i].id, l, new_eta, new_score, true});
        const double gap = std::abs(new_eta - out.eta);
        if (new_score > out.predicted_score && (!out.next_higher || gap < best_gap)) {
          out.next_higher = out.counterfactuals.size() - 1;
          best_gap = gap;
        }
      }
    }
    edited.labels[i] = original;
  }
  return out;
}

FeatureVector apply_overrides(const FeatureVector& features,
                              std::span<const OverrideRecord> overrides,
                              const extraction::ComponentSet& components) {
  if (features.k() != components.size()) {
    throw StaleArtifactError("feature vector does not match the component set");
  }
  FeatureVector out = features;
  out.overridden.clear();
  for (const auto& o : overrides) {
    if (o.response_id != features.response_id) {
      throw UsageError("override for " + o.response_id + " applied to " + features.response_id);
    }
    const auto pos = components.position(o.component_id);
    if (!pos) throw NotFoundError("unknown component " + o.component_id);
    out.labels[*pos] = o.new_label;
  }
  std::vector<bool> flags(out.k(), false);
  bool any = false;
  for (std::size_t i = 0; i < out.k(); ++i) {
    flags[i] = out.labels[i] != features.labels[i];
    any = any || flags[i];
  }
  if (any) out.overridden = std::move(flags);
  return out;
}

Explanation rescore_with_overrides(const ordinal::OrdinalModel& model,
                                   const extraction::ComponentSet& components,
                                   const FeatureVector& features,
                                   const std::string& features_digest,
                                   std::span<const OverrideRecord> overrides) {
  return explain(model, components, apply_overrides(features, overrides, components),
                 features_digest);
}

std::string render_text(const Explanation& e) {
  std::string out = "Response " + e.response_id + ": predicted score " +
                    std::to_string(e.predicted_score) + "\n";
  out += "η = " + fixed(e.eta, "%+.4f") + "\n";

  std::size_t band = 0;
  while (band < e.thresholds.size() && e.thresholds[band] <= e.eta) ++band;
  std::string band_text;
  if (e.thresholds.empty()) {
    band_text = "no thresholds";
  } else if (band == 0) {
    band_text = "η < " + theta(1, e.thresholds[0]);
  } else if (band == e.thresholds.size()) {
    band_text = theta(band, e.thresholds[band - 1]) + " ≤ η";
  } else {
    band_text = theta(band, e.thresholds[band - 1]) + " ≤ η < " +
                theta(band + 1, e.thresholds[band]);
  }
  out += "Band: " + band_text + "\n";

  out += "Components:\n";
  for (const auto& r : e.rows) {
    out += "  " + std::string(mark(r.label)) + " " + r.component_id + " " +
           fixed(r.contribution, "%+.4f") + "  " + r.component_text;
    if (r.overridden) out += "  [overridden]";
    out += "\n";
  }

  if (!e.counterfactuals.empty()) {
    for (std::size_t i = 0; i < e.counterfactuals.size(); ++i) {
      const auto& c = e.counterfactuals[i];
      out += "If instead " + c.component_id + " were " + mark(c.alternative_label) + " (" +
             std::to_string(featurizer::to_int(c.alternative_label)) + "): η = " +
             fixed(c.new_eta, "%+.4f") + ", score " + std::to_string(c.new_score);
      if (e.next_higher && *e.next_higher == i) out += "  [smallest step up]";
      out += "\n";
    }
  }
  return out;
}

nlohmann::json to_json(const Explanation& e) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : e.rows) {
    rows.push_back({{"component_id", r.component_id},
                    {"component_text", r.component_text},
                    {"label", featurizer::to_int(r.label)},
                    {"contribution", r.contribution},
                    {"overridden", r.overridden}});
  }
  nlohmann::json cfs = nlohmann::json::array();
  for (const auto& c : e.counterfactuals) {
    cfs.push_back({{"component_id", c.component_id},
                   {"alternative_label", featurizer::to_int(c.alternative_label)},
                   {"new_eta", c.new_eta},
                   {"new_score", c.new_score},
                   {"score_changed", c.score_changed}});
  }
  return {{"response_id", e.response_id},
          {"predicted_score", e.predicted_score},
          {"eta", e.eta},
          {"thresholds", e.thresholds},
          {"rows", rows},
          {"counterfactuals", cfs},
          {"next_higher", e.next_higher ? nlohmann::json(*e.next_higher) : nlohmann::json()}};
}

Explanation explanation_from_json(const nlohmann::json& j) {
  try {
    Explanation e;
    e.response_id = j.at("response_id").get<std::string>();
    e.predicted_score = j.at("predicted_score").get<int>();
    e.eta = j.at("eta").get<double>();
    e.thresholds = j.at("thresholds").get<std::vector<double>>();
    for (const auto& r : j.at("rows")) {
      e.rows.push_back({r.at("component_id").get<std::string>(),
                        r.at("component_text").get<std::string>(),
                        featurizer::label_from_int(r.at("label").get<int>()),
                        r.at("contribution").get<double>(), r.at("overridden").get<bool>()});
    }
    for (const auto& c : j.at("counterfactuals")) {
      e.counterfactuals.push_back({c.at("component_id").get<std::string>(),
                                   featurizer::label_from_int(c.at("alternative_label").get<int>()),
                                   c.at("new_eta").get<double>(), c.at("new_score").get<int>(),
                                   c.at("score_changed").get<bool>()});
    }
    if (j.contains("next_higher") && !j.at("next_higher").is_null()) {
      e.next_higher = j.at("next_higher").get<std::size_t>();
    }
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw UsageError(std::string("malformed explanation JSON: ") + ex.what());
  }
}

nlohmann::json to_json(const OverrideRecord& r) {
  return {{"response_id", r.response_id},
          {"component_id", r.component_id},
          {"old_label", featurizer::to_int(r.old_label)},
          {"new_label", featurizer::to_int(r.new_label)},
          {"author", r.author},
          {"timestamp", r.timestamp},
          {"note", r.note}};
}

OverrideRecord override_from_json(const nlohmann::json& j) {
  OverrideRecord r;
  try {
    r.response_id = j.at("response_id").get<std::string>();
    r.component_id = j.at("component_id").get<std::string>();
    r.old_label = featurizer::label_from_int(j.at("old_label").get<int>());
    r.new_label = featurizer::label_from_int(j.at("new_label").get<int>());
    r.author = j.value("author", "");
    r.timestamp = j.value("timestamp", "");
    r.note = j.value("note", "");
  } catch (const nlohmann::json::exception& ex) {
    throw UsageError(std::string("malformed override record: ") + ex.what());
  }
  if (r.new_label == r.old_label) {
    throw UsageError("override of " + r.component_id + " does not change the label");
  }
  return r;
}

std::vector<OverrideRecord> load_override_log(const std::filesystem::path& path) {
  std::vector<OverrideRecord> out;
  if (!std::filesystem::exists(path)) return out;
  std::istringstream in(read_text_file(path));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(override_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void append_override(const std::filesystem::path& path, const OverrideRecord& record) {
  append_line(path, to_json(record).dump());
}

std::vector<OverrideRecord> overrides_for(std::span<const OverrideRecord> log,
                                          const std::string& response_id) {
  std::vector<OverrideRecord> out;
  for (const auto& r : log) {
    if (r.response_id == response_id) out.push_back(r);
  }
  return out;
}

}  // namespace ascore::explanation
