#include "ascore/featurizer.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"
#include "prompt_tags.hpp"

namespace ascore::featurizer {

using nlohmann::json;

Label label_from_int(int v) {
  if (v < 0 || v > 2) throw UsageError("label must be 0, 1 or 2, got " + std::to_string(v));
  return static_cast<Label>(v);
}

json to_json(const LabelDraw& d) {
  return {{"response_id", d.response_id},
          {"component_id", d.component_id},
          {"sample_index", d.sample_index},
          {"raw_text", d.raw_text},
          {"parsed_label", to_int(d.parsed_label)}};
}

LabelDraw label_draw_from_json(const json& j) {
  LabelDraw d;
  d.response_id = j.at("response_id").get<std::string>();
  d.component_id = j.at("component_id").get<std::string>();
  d.sample_index = j.at("sample_index").get<int>();
  d.raw_text = j.value("raw_text", "");
  d.parsed_label = label_from_int(j.at("parsed_label").get<int>());
  return d;
}

std::vector<std::uint8_t> FeatureVector::one_hot() const {
  std::vector<std::uint8_t> bits(labels.size() * kNumLabels, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bits[kNumLabels * i + static_cast<std::size_t>(labels[i])] = 1;
  }
  return bits;
}

std::vector<Label> decode_one_hot(std::span<const std::uint8_t> bits) {
  if (bits.size() % kNumLabels != 0) {
    throw UsageError("one-hot length is not a multiple of 3");
  }
  std::vector<Label> labels;
  for (std::size_t i = 0; i < bits.size(); i += kNumLabels) {
    int set = -1;
    for (int l = 0; l < kNumLabels; ++l) {
      if (bits[i + static_cast<std::size_t>(l)] > 1) throw UsageError("one-hot bit is not 0/1");
      if (bits[i + static_cast<std::size_t>(l)] == 1) {
        if (set >= 0) throw UsageError("one-hot block has more than one bit set");
        set = l;
      }
    }
    if (set < 0) throw UsageError("one-hot block has no bit set");
    labels.push_back(static_cast<Label>(set));
  }
  return labels;
}

std::size_t FeatureMatrix::k() const {
  return rows.empty() ? 0 : rows.begin()->second.k();
}

json to_json(const FeatureMatrix& m) {
  json rows = json::array();
  for (const auto& [id, fv] : m.rows) {
    json labels = json::array();
    for (Label l : fv.labels) labels.push_back(to_int(l));
    rows.push_back({{"response_id", id}, {"labels", labels}});
  }
  return {{"item_id", m.item_id},
          {"component_set_digest", m.component_set_digest},
          {"rows", rows}};
}

FeatureMatrix feature_matrix_from_json(const json& j) {
  try {
    FeatureMatrix m;
    m.item_id = j.at("item_id").get<std::string>();
    m.component_set_digest = j.at("component_set_digest").get<std::string>();
    std::optional<std::size_t> k;
    for (const auto& row : j.at("rows")) {
      FeatureVector fv;
      fv.response_id = row.at("response_id").get<std::string>();
      for (const auto& l : row.at("labels")) fv.labels.push_back(label_from_int(l.get<int>()));
      if (k && *k != fv.k()) throw FeaturizationError("feature rows have unequal lengths");
      k = fv.k();
      if (!m.rows.emplace(fv.response_id, fv).second) {
        throw FeaturizationError("duplicate feature row " + fv.response_id);
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw FeaturizationError(std::string("malformed feature matrix: ") + e.what());
  }
}

FeatureMatrix load_feature_matrix(const std::filesystem::path& path) {
  try {
    return feature_matrix_from_json(json::parse(read_text_file(path)));
  } catch (const json::parse_error& e) {
    throw FeaturizationError(path.string() + ": " + e.what());
  }
}

void save_feature_matrix(const std::filesystem::path& path, const FeatureMatrix& m) {
  write_text_file_atomic(path, to_json(m).dump(1) + "\n");
}

llm::CompletionRequest build_label_prompt(const dataset::Response& response,
                                          const extraction::AnalyticComponent& component,
                                          const dataset::Item& item,
                                          const llm::GatewayConfig& config) {
  std::ostringstream user;
  if (!item.prompt_text.empty()) {
    user << "Assessment item:\n<item_prompt>\n" << item.prompt_text
         << "\n</item_prompt>\n\n";
  }
  if (item.parts.size() > 1) user << "Scoring part: " << component.part << "\n\n";
  user << "Analytic component (c):\n"
       << prompt_tags::kComponentOpen << component.text << prompt_tags::kComponentClose
       << "\n\n"
       << "Student response (r):\n"
       << prompt_tags::kResponseOpen << response.text << prompt_tags::kResponseClose
       << "\n\n"
       << "Label the response with f(r;c) defined as:\n"
       << "2, if r contains direct paraphrase of c\n"
       << "1, if r contains partial paraphrase of c\n"
       << "0, if r does not contain paraphrase of c\n\n"
       << "Think step by step: quote the parts of the response that relate to "
          "the component, if any, and compare their meaning with the "
          "component. An empty response contains no paraphrase.\n"
       << "End your answer with a final line of the exact form \""
       << prompt_tags::kLabelMarker << " <0|1|2>\".";

  llm::CompletionRequest req;
  req.model_name = config.featurizer_model;
  req.temperature = config.featurizer_temperature;
  req.max_tokens = config.max_tokens;
  req.messages = {{"system",
                   "You are a careful rater who checks student responses for "
                   "the presence of specific statements."},
                  {"user", user.str()}};
  return req;
}

Label parse_label(const std::string& raw_text) {
  const std::string marker = prompt_tags::kLabelMarker;
  const auto pos = raw_text.rfind(marker);
  if (pos == std::string::npos) throw LabelParseError("no LABEL marker in completion");
  std::size_t i = pos + marker.size();
  while (i < raw_text.size() && (raw_text[i] == ' ' || raw_text[i] == '\t')) ++i;
  // Tolerate "LABEL: **2**" style emphasis.
  while (i < raw_text.size() && raw_text[i] == '*') ++i;
  if (i >= raw_text.size() || !std::isdigit(static_cast<unsigned char>(raw_text[i]))) {
    throw LabelParseError("LABEL marker is not followed by a digit");
  }
  const int value = raw_text[i] - '0';
  if (i + 1 < raw_text.size() && std::isdigit(static_cast<unsigned char>(raw_text[i + 1]))) {
    throw LabelParseError("LABEL value has more than one digit");
  }
  if (value > 2) throw LabelParseError("LABEL value " + std::to_string(value) + " is not 0, 1 or 2");
  return static_cast<Label>(value);
}

Aggregate aggregate_first_to_three(const LabelSource& next) {
  std::array<int, kNumLabels> counts{};
  int used = 0;
  // After 7 draws some label must have three votes (2 + 2 + 2 = 6).
  while (used < 7) {
    auto label = next();
    if (!label) break;
    ++used;
    if (++counts[static_cast<std::size_t>(*label)] == 3) return {*label, used};
  }
  throw AggregationError("label stream ended after " + std::to_string(used) +
                         " draws without a label reaching three");
}

Aggregate aggregate_first_to_three(std::span<const Label> draws) {
  std::size_t pos = 0;
  return aggregate_first_to_three([&]() -> std::optional<Label> {
    if (pos >= draws.size()) return std::nullopt;
    return draws[pos++];
  });
}

namespace {

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

Label mock_label_rule(std::string_view response_text, std::string_view component_text) {
  if (trim(response_text).empty()) return Label::absent;
  const std::string response = to_lower_ascii(response_text);
  const std::string component = to_lower_ascii(component_text);
  if (!component.empty() && response.find(component) != std::string::npos) {
    return Label::direct;
  }
  std::set<std::string> content;
  for (auto& w : words_of(component)) {
    if (w.size() >= 4) content.insert(std::move(w));
  }
  if (content.empty()) return Label::absent;
  const auto response_words = words_of(response);
  const std::set<std::string> present(response_words.begin(), response_words.end());
  std::size_t hits = 0;
  for (const auto& w : content) hits += present.count(w);
  return 2 * hits >= content.size() ? Label::partial : Label::absent;
}

PairResult featurize_pair(const dataset::Response& response,
                          const extraction::AnalyticComponent& component,
                          const dataset::Item& item, llm::Gateway& gateway,
                          const FeaturizeOptions& options) {
  PairResult result;
  auto request = build_label_prompt(response, component, item, gateway.config());
  int sample = 0;
  auto next = [&]() -> std::optional<Label> {
    while (result.raw_draws < options.max_raw_draws) {
      request.sample_index = sample++;
      ++result.raw_draws;
      const auto completion = gateway.complete(request);
      try {
        const Label label = parse_label(completion.text);
        result.draws.push_back({response.id, component.id, request.sample_index,
                                options.keep_raw_text ? completion.text : std::string(),
                                label});
        return label;
      } catch (const LabelParseError&) {
        ++result.parse_failures;
      }
    }
    return std::nullopt;
  };
  result.aggregate = aggregate_first_to_three(next);
  return result;
}

FeatureVector featurize_response(const dataset::Response& response,
                                 const extraction::ComponentSet& components,
                                 const dataset::Item& item, llm::Gateway& gateway,
                                 const FeaturizeOptions& options) {
  if (components.components.empty()) throw UsageError("component set is empty");
  FeatureVector fv;
  fv.response_id = response.id;
  for (const auto& c : components.components) {
    try {
      fv.labels.push_back(featurize_pair(response, c, item, gateway, options).aggregate.label);
    } catch (const AggregationError& e) {
      throw FeaturizationError("response " + response.id + ", component " + c.id + ": " +
                               e.what());
    }
  }
  return fv;
}

CorpusResult featurize_corpus(const dataset::Item& item,
                              std::span<const dataset::Response> responses,
                              const extraction::ComponentSet& components,
                              llm::Gateway& gateway, const FeaturizeOptions& options) {
  if (components.components.empty()) throw UsageError("component set is empty");
  const std::size_t k = components.size();
  const std::size_t total = responses.size() * k;

  struct Slot {
    std::optional<PairResult> result;
    std::string error;
  };
  std::vector<Slot> slots(total);
  std::atomic<std::size_t> cursor{0};
  auto worker = [&] {
    for (std::size_t job = cursor.fetch_add(1); job < total; job = cursor.fetch_add(1)) {
      const auto& r = responses[job / k];
      const auto& c = components.components[job % k];
      try {
        slots[job].result = featurize_pair(r, c, item, gateway, options);
      } catch (const AggregationError& e) {
        slots[job].error = "response " + r.id + ", component " + c.id + ": " + e.what();
      } catch (const Error& e) {
        slots[job].error = "response " + r.id + ", component " + c.id + ": " + e.what();
      }
    }
  };
  const int n_workers = std::max(
      1, std::min<int>(options.workers > 0 ? options.workers : gateway.config().max_in_flight,
                       static_cast<int>(std::max<std::size_t>(total, 1))));
  {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
  }

  CorpusResult out;
  out.matrix.item_id = item.id;
  out.matrix.component_set_digest = components.digest();
  // Rows and draws are emitted in response-id order, whatever order the
  // workers finished in.
  std::vector<std::size_t> order(responses.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return responses[a].id < responses[b].id; });
  for (std::size_t ri : order) {
    FeatureVector fv;
    fv.response_id = responses[ri].id;
    bool complete = true;
    for (std::size_t ci = 0; ci < k; ++ci) {
      auto& slot = slots[ri * k + ci];
      if (!slot.result) {
        complete = false;
        out.failures.push_back(slot.error);
        continue;
      }
      fv.labels.push_back(slot.result->aggregate.label);
      ++out.draws_used_histogram[slot.result->aggregate.draws_used];
      out.parse_failures += slot.result->parse_failures;
      for (auto& d : slot.result->draws) out.draws.push_back(std::move(d));
    }
    if (complete) out.matrix.rows.emplace(fv.response_id, std::move(fv));
  }
  if (!out.failures.empty() && !options.allow_partial) {
    std::string msg = std::to_string(out.failures.size()) + " pair(s) failed:";
    for (const auto& f : out.failures) msg += "\n  " + f;
    throw FeaturizationError(msg);
  }
  return out;
}

std::vector<LabelDraw> load_draws(const std::filesystem::path& path) {
  std::vector<LabelDraw> draws;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      draws.push_back(label_draw_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw FeaturizationError(path.string() + ": line " + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return draws;
}

void save_draws(const std::filesystem::path& path, std::span<const LabelDraw> draws) {
  std::string out;
  for (const auto& d : draws) {
    out += to_json(d).dump(-1, ' ', false, json::error_handler_t::replace);
    out += '\n';
  }
  write_text_file_atomic(path, out);
}

DistillStats export_distillation_pairs(std::span<const DistillSource> sources,
                                       const DistillOptions& options,
                                       const std::filesystem::path& out) {
  struct Candidate {
    std::size_t source;
    const dataset::Response* response;
    std::size_t component;
    Label aggregate;
  };
  std::vector<Candidate> candidates;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& src = sources[s];
    if (!src.dataset || !src.components || !src.matrix || !src.draws) {
      throw UsageError("incomplete distillation source");
    }
    if (src.matrix->component_set_digest != src.components->digest()) {
      throw StaleArtifactError("feature matrix for " + src.matrix->item_id +
                               " was built from a different component set");
    }
    for (const auto& r : src.dataset->responses) {
      if (std::find(options.splits.begin(), options.splits.end(), r.split) ==
          options.splits.end()) {
        continue;
      }
      auto row = src.matrix->rows.find(r.id);
      if (row == src.matrix->rows.end()) continue;
      for (std::size_t c = 0; c < row->second.k(); ++c) {
        candidates.push_back({s, &r, c, row->second.labels[c]});
      }
    }
  }
  if (options.n > candidates.size()) {
    throw UsageError("requested " + std::to_string(options.n) + " pairs but only " +
                     std::to_string(candidates.size()) + " are available");
  }

  // Partial Fisher-Yates: the first n positions are a uniform sample.
  Rng rng(options.seed);
  for (std::size_t i = 0; i < options.n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(candidates.size() - i));
    std::swap(candidates[i], candidates[j]);
  }

  // (source, response, component) -> draws, built once per source.
  std::vector<std::map<std::pair<std::string, std::string>, std::vector<const LabelDraw*>>>
      index(sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (const auto& d : *sources[s].draws) {
      index[s][{d.response_id, d.component_id}].push_back(&d);
    }
  }

  DistillStats stats;
  std::string body;
  for (std::size_t i = 0; i < options.n; ++i) {
    const auto& cand = candidates[i];
    const auto& src = sources[cand.source];
    const auto& comp = src.components->components[cand.component];
    const auto request =
        build_label_prompt(*cand.response, comp, src.dataset->item, options.gateway);
    json messages = json::array();
    for (const auto& m : request.messages) {
      messages.push_back({{"role", m.role}, {"content", m.content}});
    }
    ++stats.pairs;
    auto it = index[cand.source].find({cand.response->id, comp.id});
    if (it == index[cand.source].end()) {
      throw FeaturizationError("no stored draws for response " + cand.response->id +
                               ", component " + comp.id);
    }
    for (const LabelDraw* d : it->second) {
      if (d->parsed_label != cand.aggregate) continue;
      if (d->raw_text.empty()) {
        throw FeaturizationError("draw for response " + d->response_id +
                                 " has no raw text (featurized without raw text)");
      }
      body += json{{"prompt_messages", messages}, {"completion_text", d->raw_text}}.dump(
          -1, ' ', false, json::error_handler_t::replace);
      body += '\n';
      ++stats.records;
    }
  }
  write_text_file_atomic(out, body);
  return stats;
}

}  // namespace ascore::featurizer
