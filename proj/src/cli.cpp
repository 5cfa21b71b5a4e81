#include "ascore/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "ascore/dataset.hpp"
#include "ascore/errors.hpp"
#include "ascore/explanation.hpp"
#include "ascore/extraction.hpp"
#include "ascore/featurizer.hpp"
#include "ascore/metrics.hpp"
#include "ascore/ordinal_scorer.hpp"
#include "ascore/service_api.hpp"
#include "ascore/util.hpp"

namespace ascore::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::unique_ptr<llm::Gateway> make_gateway(const workspace::Config& config,
                                           const std::string& backend, double mock_noise) {
  std::shared_ptr<llm::Backend> impl;
  switch (llm::backend_from_string(backend)) {
    case llm::BackendKind::mock:
      impl = std::make_shared<llm::MockBackend>(mock_noise);
      break;
    case llm::BackendKind::http: {
      llm::HttpBackendConfig http;
      http.base_url = config.gateway.base_url;
      http.api_key_env = config.gateway.api_key_env;
      http.retry = config.gateway.retry;
      http.timeout = config.gateway.timeout;
      impl = std::make_shared<llm::HttpBackend>(http);
      break;
    }
  }
  return std::make_unique<llm::Gateway>(impl, config.gateway);
}

namespace {

std::string fmt(double v, const char* f = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<dataset::Split> parse_splits(const std::vector<std::string>& names) {
  std::vector<dataset::Split> out;
  for (const auto& entry : names) {
    for (const auto& name : split(entry, ',')) {
      const auto t = std::string(trim(name));
      if (!t.empty()) out.push_back(dataset::split_from_string(t));
    }
  }
  if (out.empty()) throw UsageError("no splits given");
  return out;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split(text, ',')) {
    const auto t = std::string(trim(part));
    if (t.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw UsageError("bad lambda value '" + t + "'");
    }
  }
  return out;
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Items named on the command line, or every item with a corpus.
std::vector<std::string> target_items(const workspace::Workspace& ws,
                                      const std::vector<std::string>& requested) {
  if (!requested.empty()) return requested;
  auto items = ws.corpus_items();
  if (items.empty()) throw UsageError("workspace has no ingested items");
  return items;
}

struct Loaded {
  dataset::Dataset dataset;
  extraction::ComponentSet components;
  featurizer::FeatureMatrix matrix;
};

dataset::Dataset load_dataset(const workspace::Workspace& ws, const std::string& item) {
  const auto path = ws.corpus_path(item);
  if (!fs::exists(path)) throw NotFoundError("item " + item + " has not been ingested");
  return dataset::load_corpus(path);
}

extraction::ComponentSet load_components(const workspace::Workspace& ws, const std::string& item) {
  const auto path = ws.components_path(item);
  if (!fs::exists(path)) throw NotFoundError("item " + item + " has no components; run extract");
  return extraction::load_component_set(path);
}

Loaded load_featurized(const workspace::Workspace& ws, const std::string& item) {
  Loaded l{load_dataset(ws, item), load_components(ws, item), {}};
  const auto path = ws.features_path(item);
  if (!fs::exists(path)) throw NotFoundError("item " + item + " has no features; run featurize");
  l.matrix = featurizer::load_feature_matrix(path);
  if (l.matrix.component_set_digest != l.components.digest()) {
    throw StaleArtifactError("features of item " + item +
                             " were computed for a different component set; rerun featurize");
  }
  return l;
}

ordinal::OrdinalModel load_checked_model(const workspace::Workspace& ws, const std::string& item,
                                         const extraction::ComponentSet& components) {
  const auto path = ws.model_path(item);
  if (!fs::exists(path)) throw NotFoundError("item " + item + " has no model; run train");
  auto model = ordinal::load_model(path);
  if (model.component_set_digest != components.digest()) {
    throw StaleArtifactError("model of item " + item +
                             " was trained on a different component set; rerun train");
  }
  return model;
}

std::vector<ordinal::Example> examples(const Loaded& l, dataset::Split split,
                                       std::size_t& missing) {
  std::vector<ordinal::Example> out;
  for (const auto& r : l.dataset.responses) {
    if (r.split != split || !r.gold_score) continue;
    const auto row = l.matrix.rows.find(r.id);
    if (row == l.matrix.rows.end()) {
      ++missing;
      continue;
    }
    out.push_back({row->second, *r.gold_score});
  }
  return out;
}

// ---- ingest ---------------------------------------------------------------

struct IngestArgs {
  std::vector<std::string> tsv;
  std::string test_tsv;
  std::vector<std::string> corpus;
  std::string items_file;
  std::vector<std::string> items;
  std::uint64_t seed = 0;
  double ratio = 0.8;
};

void ingest(const workspace::Workspace& ws, const IngestArgs& a, std::ostream& out) {
  if (a.tsv.empty() && a.corpus.empty()) throw UsageError("ingest needs --tsv or --corpus");
  if (!(a.ratio > 0 && a.ratio < 1)) throw UsageError("--ratio must lie in (0, 1)");
  auto config = ws.load_config();
  if (!a.items_file.empty()) {
    for (auto& [id, item] : dataset::items_from_config(read_json(a.items_file))) {
      config.items[id] = item;
    }
  }

  for (const auto& path : a.corpus) {
    const auto d = dataset::load_corpus(path);
    config.items[d.item.id] = d.item;
    dataset::save_corpus(ws.corpus_path(d.item.id), d);
    out << "item " << d.item.id << ": " << d.responses.size() << " responses from " << path
        << "\n";
  }

  if (!a.tsv.empty()) {
    std::vector<std::string> ids = a.items;
    if (ids.empty()) {
      for (const auto& [id, item] : config.items) ids.push_back(id);
    }
    if (ids.empty()) throw UsageError("no items configured; pass --items");
    for (const auto& id : ids) {
      const auto it = config.items.find(id);
      if (it == config.items.end()) throw UsageError("item " + id + " is not configured");
      const auto& item = it->second;

      dataset::Dataset labeled{item, {}};
      std::vector<dataset::Response> unlabeled;
      for (const auto& path : a.tsv) {
        for (auto& r : dataset::load_asap_tsv(path, item, dataset::Split::train).responses) {
          if (r.gold_score) {
            labeled.responses.push_back(std::move(r));
          } else {
            r.split = dataset::Split::unlabeled;
            unlabeled.push_back(std::move(r));
          }
        }
      }
      dataset::Dataset merged{item, {}};
      std::size_t n_train = 0, n_valid = 0, n_test = 0;
      if (!labeled.responses.empty()) {
        auto [train, valid] = dataset::split_train_valid(labeled, a.ratio, a.seed);
        n_train = train.responses.size();
        n_valid = valid.responses.size();
        merged.responses = std::move(train.responses);
        for (auto& r : valid.responses) merged.responses.push_back(std::move(r));
      }
      for (auto& r : unlabeled) merged.responses.push_back(std::move(r));
      if (!a.test_tsv.empty()) {
        for (auto& r :
             dataset::load_asap_tsv(a.test_tsv, item, dataset::Split::test).responses) {
          merged.responses.push_back(std::move(r));
          ++n_test;
        }
      }
      merged.validate();
      dataset::save_corpus(ws.corpus_path(id), merged);
      out << "item " << id << ": " << n_train << " train, " << n_valid << " valid, "
          << unlabeled.size() << " unlabeled, " << n_test << " test\n";
    }
  }
  ws.save_config(config);
}

// ---- extract ----------------------------------------------------------------

struct ExtractArgs {
  std::vector<std::string> items;
  std::string backend = "mock";
  std::optional<int> cap;
  std::size_t sample_size = 200;
};

void extract(const workspace::Workspace& ws, const ExtractArgs& a, std::ostream& out) {
  const auto config = ws.load_config();
  auto gateway = make_gateway(config, a.backend);
  for (const auto& id : target_items(ws, a.items)) {
    const auto d = load_dataset(ws, id);
    std::vector<std::string> texts;
    for (const auto& r : d.responses) {
      if (r.split == dataset::Split::train || r.split == dataset::Split::unlabeled) {
        texts.push_back(r.text);
      }
    }
    if (texts.empty()) throw DatasetError("item " + id + " has no train or unlabeled responses");
    extraction::ExtractOptions options;
    options.cap = a.cap;
    options.prompt.sample_size = a.sample_size;
    const auto set = extraction::extract_components(d.item, texts, *gateway, options);
    extraction::save_component_set(ws.components_path(id), set);
    out << "item " << id << ": " << set.size() << " components\n";
    for (const auto& c : set.components) {
      out << "  " << c.id << " [" << c.part << "] " << c.text << "\n";
    }
  }
}

// ---- edit-components ---------------------------------------------------------

void edit_components(const workspace::Workspace& ws, const std::string& item,
                     const std::string& ops_file, std::ostream& out, std::ostream& err) {
  const auto ops = read_json(ops_file);
  if (!ops.is_array()) throw UsageError("edit file must hold a JSON array of edits");
  std::vector<extraction::Edit> edits;
  for (const auto& op : ops) edits.push_back(extraction::edit_from_json(op));
  const auto result = extraction::edit_component_set(load_components(ws, item), edits);
  for (const auto& w : result.warnings) err << "warning: " << w << "\n";
  extraction::save_component_set(ws.components_path(item), result.set);
  out << "item " << item << ": " << result.set.size() << " components after "
      << edits.size() << " edits\n";
}

// ---- featurize ---------------------------------------------------------------

struct FeaturizeArgs {
  std::vector<std::string> items;
  std::string backend = "mock";
  std::optional<double> temperature;
  std::vector<std::string> splits = {"train,valid,test,unlabeled"};
  bool allow_partial = false;
  bool drop_raw = false;
  double mock_noise = 0.0;
  int workers = 0;
};

void featurize(const workspace::Workspace& ws, const FeaturizeArgs& a, std::ostream& out,
               std::ostream& err) {
  auto config = ws.load_config();
  if (a.temperature) config.gateway.featurizer_temperature = *a.temperature;
  auto gateway = make_gateway(config, a.backend, a.mock_noise);
  const auto splits = parse_splits(a.splits);

  for (const auto& id : target_items(ws, a.items)) {
    const auto d = load_dataset(ws, id);
    const auto components = load_components(ws, id);
    std::vector<dataset::Response> chosen;
    for (const auto& r : d.responses) {
      if (std::find(splits.begin(), splits.end(), r.split) != splits.end()) chosen.push_back(r);
    }
    featurizer::FeaturizeOptions options;
    options.allow_partial = a.allow_partial;
    options.keep_raw_text = !a.drop_raw;
    options.workers = a.workers;
    const auto calls_before = gateway->backend_calls();
    const auto hits_before = gateway->cache_hits();
    auto result = featurizer::featurize_corpus(d.item, chosen, components, *gateway, options);
    for (const auto& f : result.failures) err << "warning: " << f << "\n";

    // Merge with rows of other splits featurized earlier against the same
    // component set.
    auto matrix = std::move(result.matrix);
    std::vector<featurizer::LabelDraw> draws;
    const auto fpath = ws.features_path(id);
    if (fs::exists(fpath)) {
      const auto previous = featurizer::load_feature_matrix(fpath);
      if (previous.component_set_digest == matrix.component_set_digest) {
        std::set<std::string> redone;
        for (const auto& r : chosen) redone.insert(r.id);
        for (const auto& [rid, row] : previous.rows) {
          if (!redone.count(rid)) matrix.rows.emplace(rid, row);
        }
        if (fs::exists(ws.draws_path(id))) {
          for (auto& dr : featurizer::load_draws(ws.draws_path(id))) {
            if (!redone.count(dr.response_id)) draws.push_back(std::move(dr));
          }
        }
      }
    }
    for (auto& dr : result.draws) draws.push_back(std::move(dr));
    std::stable_sort(draws.begin(), draws.end(), [&](const auto& x, const auto& y) {
      if (x.response_id != y.response_id) return x.response_id < y.response_id;
      const auto px = components.position(x.component_id).value_or(0);
      const auto py = components.position(y.component_id).value_or(0);
      if (px != py) return px < py;
      return x.sample_index < y.sample_index;
    });

    featurizer::save_feature_matrix(fpath, matrix);
    featurizer::save_draws(ws.draws_path(id), draws);
    out << "item " << id << ": " << chosen.size() << " responses x " << components.size()
        << " components; " << (gateway->backend_calls() - calls_before) << " backend calls, "
        << (gateway->cache_hits() - hits_before) << " cache hits, " << result.parse_failures
        << " parse failures\n";
    out << "  draws used:";
    for (const auto& [used, count] : result.draws_used_histogram) {
      out << " " << used << "->" << count;
    }
    out << "\n";
  }
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::vector<std::string> items;
  std::string lambda_grid = "0,0.001,0.01,0.1,1";
  std::uint64_t seed = 0;
  int max_iterations = 5000;
};

void train(const workspace::Workspace& ws, const TrainArgs& a, std::ostream& out,
           std::ostream& err) {
  ordinal::TrainConfig config;
  config.lambda_grid = parse_grid(a.lambda_grid);
  config.seed = a.seed;
  config.max_iterations = a.max_iterations;
  for (const auto& id : target_items(ws, a.items)) {
    const auto l = load_featurized(ws, id);
    std::size_t missing = 0;
    const auto train_set = examples(l, dataset::Split::train, missing);
    const auto valid_set = examples(l, dataset::Split::valid, missing);
    if (missing > 0) {
      err << "warning: item " << id << ": " << missing
          << " scored responses have no features and were skipped\n";
    }
    const ordinal::ModelSpec spec{id, l.components.digest(), l.components.size(),
                                  l.dataset.item.score_min, l.dataset.item.score_max};
    const auto result = ordinal::train(spec, train_set, valid_set, config);
    for (const auto& w : result.warnings) err << "warning: item " << id << ": " << w << "\n";
    ordinal::save_model(ws.model_path(id), result.model);

    out << "item " << id << ": " << train_set.size() << " train, " << valid_set.size()
        << " valid\n";
    out << "  lambda      train_qwk  valid_qwk  iterations  converged\n";
    for (const auto& g : result.grid) {
      out << "  " << fmt(g.lambda, "%-10g") << "  " << fmt(g.train_qwk) << "     "
          << fmt(g.valid_qwk) << "     " << fmt(g.meta.iterations, "%10.0f") << "  "
          << (g.meta.converged ? "yes" : "no") << "\n";
    }
    out << "  selected lambda " << fmt(result.model.lambda, "%g") << "\n";
  }
}

// ---- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::vector<std::string> items;
  std::string split = "test";
  int replicates = 1000;
  std::uint64_t seed = 0;
  double confidence = 0.95;
};

void evaluate(const workspace::Workspace& ws, const EvaluateArgs& a, std::ostream& out,
              std::ostream& err) {
  const auto split_kind = dataset::split_from_string(a.split);
  metrics::BootstrapOptions boot;
  boot.replicates = a.replicates;
  boot.seed = a.seed;
  boot.confidence = a.confidence;

  for (const auto& id : target_items(ws, a.items)) {
    const auto l = load_featurized(ws, id);
    const auto model = load_checked_model(ws, id, l.components);
    std::size_t missing = 0;
    const auto set = examples(l, split_kind, missing);
    if (missing > 0) {
      err << "warning: item " << id << ": " << missing
          << " scored responses have no features and were skipped\n";
    }
    if (set.empty()) {
      throw DatasetError("item " + id + " has no scored, featurized responses in split " +
                         a.split);
    }
    const int lo = model.score_min(), hi = model.score_max();
    std::vector<int> gold, pred;
    json predictions = json::array();
    for (const auto& ex : set) {
      gold.push_back(ex.gold_score);
      pred.push_back(ordinal::predict(model, ex.features));
      predictions.push_back({{"response_id", ex.features.response_id},
                             {"gold", gold.back()},
                             {"predicted", pred.back()}});
    }
    const auto pick = [](const std::vector<int>& v, std::span<const std::size_t> idx) {
      std::vector<int> o;
      o.reserve(idx.size());
      for (auto i : idx) o.push_back(v[i]);
      return o;
    };
    const auto qwk_ci = metrics::bootstrap_ci(
        [&](std::span<const std::size_t> idx) -> std::optional<double> {
          return metrics::qwk(pick(pred, idx), pick(gold, idx), lo, hi);
        },
        set.size(), {}, boot);

    json f1 = json::object(), f1_ci = json::object();
    for (int label = lo; label <= hi; ++label) {
      f1[std::to_string(label)] = metrics::classwise_f1(pred, gold, label);
      f1_ci[std::to_string(label)] = metrics::to_json(metrics::bootstrap_ci(
          [&](std::span<const std::size_t> idx) -> std::optional<double> {
            return metrics::classwise_f1(pick(pred, idx), pick(gold, idx), label);
          },
          set.size(), {}, boot));
    }

    const auto alpha_of = [&](std::span<const std::size_t> idx) -> std::optional<double> {
      metrics::RatingsTable t;
      t.raters = {"gold", "model"};
      for (auto i : idx) {
        t.units.push_back(set[i].features.response_id);
        t.values.push_back({gold[i], pred[i]});
      }
      try {
        return metrics::krippendorff_alpha(t, metrics::Distance::interval);
      } catch (const MetricError&) {
        return std::nullopt;
      }
    };
    std::vector<std::size_t> all(set.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto alpha = alpha_of(all);
    json alpha_ci;
    if (alpha) {
      try {
        alpha_ci = metrics::to_json(metrics::bootstrap_ci(alpha_of, set.size(), {}, boot));
      } catch (const MetricError&) {
        alpha_ci = json();
      }
    }

    const json report{{"item_id", id},
                      {"split", a.split},
                      {"n_test", set.size()},
                      {"qwk", qwk_ci.point},
                      {"qwk_ci", metrics::to_json(qwk_ci)},
                      {"per_label_f1", f1},
                      {"per_label_f1_ci", f1_ci},
                      {"alpha", alpha ? json(*alpha) : json()},
                      {"alpha_ci", alpha_ci},
                      {"lambda", model.lambda},
                      {"predictions", predictions}};
    write_text_file_atomic(ws.report_path(id, a.split), report.dump(2) + "\n");

    out << "item " << id << " (" << a.split << ", n=" << set.size() << ")\n";
    out << "  QWK  " << fmt(qwk_ci.point) << "  [" << fmt(qwk_ci.lo) << ", " << fmt(qwk_ci.hi)
        << "]\n";
    for (int label = lo; label <= hi; ++label) {
      const auto& ci = f1_ci[std::to_string(label)];
      out << "  F1(" << label << ")  " << fmt(f1[std::to_string(label)].get<double>()) << "  ["
          << fmt(ci["lo"].get<double>()) << ", " << fmt(ci["hi"].get<double>()) << "]\n";
    }
  }
}

// ---- explain -----------------------------------------------------------------

struct ExplainArgs {
  std::string response;
  std::string item;
  std::vector<std::string> overrides;
  bool json_output = false;
  bool persist = false;
  std::string author;
  std::string note;
};

std::string find_item_of(const workspace::Workspace& ws, const std::string& response_id) {
  std::vector<std::string> hits;
  for (const auto& id : ws.corpus_items()) {
    if (dataset::load_corpus(ws.corpus_path(id)).find(response_id)) hits.push_back(id);
  }
  if (hits.empty()) throw NotFoundError("unknown response " + response_id);
  if (hits.size() > 1) {
    throw UsageError("response " + response_id + " exists in several items; pass --item");
  }
  return hits.front();
}

void explain(const workspace::Workspace& ws, const ExplainArgs& a, std::ostream& out) {
  const auto item = a.item.empty() ? find_item_of(ws, a.response) : a.item;
  const auto l = load_featurized(ws, item);
  if (!l.dataset.find(a.response)) {
    throw NotFoundError("unknown response " + a.response + " in item " + item);
  }
  const auto model = load_checked_model(ws, item, l.components);
  const auto row = l.matrix.rows.find(a.response);
  if (row == l.matrix.rows.end()) throw NotFoundError("response " + a.response + " has no features");
  const auto& base = row->second;

  const auto log_path = ws.overrides_path(item);
  auto overrides = explanation::overrides_for(explanation::load_override_log(log_path), a.response);
  for (const auto& spec : a.overrides) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw UsageError("override must look like C3=2, got " + spec);
    const auto component = spec.substr(0, eq);
    const auto value = spec.substr(eq + 1);
    if (value.size() != 1 || value[0] < '0' || value[0] > '2') {
      throw UsageError("override label must be 0, 1 or 2, got " + value);
    }
    if (!l.components.position(component)) throw NotFoundError("unknown component " + component);
    const auto label = featurizer::label_from_int(value[0] - '0');
    explanation::OverrideRecord rec;
    rec.response_id = a.response;
    rec.component_id = component;
    rec.old_label = explanation::apply_overrides(base, overrides, l.components)
                        .labels[*l.components.position(component)];
    rec.new_label = label;
    rec.author = a.author;
    rec.note = a.note;
    if (a.persist) {
      if (rec.old_label == rec.new_label) {
        throw UsageError("override of " + component + " does not change the label");
      }
      rec.timestamp = now_iso8601();
      explanation::append_override(log_path, rec);
    }
    overrides.push_back(std::move(rec));
  }

  if (a.json_output) {
    out << service::explanation_payload(item, model, l.components, l.matrix, base, overrides)
               .dump(2)
        << "\n";
  } else {
    out << explanation::render_text(explanation::rescore_with_overrides(
        model, l.components, base, l.matrix.component_set_digest, overrides));
  }
}

// ---- agreement ---------------------------------------------------------------

struct AgreementArgs {
  std::string ratings;
  std::string distance = "interval";
  std::string weights_file;
  std::uint64_t seed = 0;
  int replicates = 1000;
  double confidence = 0.95;
  std::string out_file;
};

void agreement(const AgreementArgs& a, std::ostream& out) {
  const auto doc = read_json(a.ratings);
  const auto distance = metrics::distance_from_string(a.distance);
  std::vector<std::string> humans, models;
  std::vector<std::string> unit_ids;
  std::vector<double> weights;
  std::vector<std::map<std::string, int>> ratings;
  try {
    humans = doc.at("human_raters").get<std::vector<std::string>>();
    models = doc.value("model_raters", std::vector<std::string>{});
    for (const auto& u : doc.at("units")) {
      unit_ids.push_back(u.at("id").get<std::string>());
      weights.push_back(u.value("weight", 1.0));
      ratings.push_back(u.at("ratings").get<std::map<std::string, int>>());
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed ratings file: ") + e.what());
  }
  if (humans.size() < 2) throw UsageError("agreement needs at least two human raters");
  if (!a.weights_file.empty()) {
    const auto w = read_json(a.weights_file);
    for (std::size_t i = 0; i < unit_ids.size(); ++i) {
      if (w.contains(unit_ids[i])) weights[i] = w.at(unit_ids[i]).get<double>();
    }
  }

  int lo = 0, hi = 0;
  bool seen = false;
  for (const auto& r : ratings) {
    for (const auto& [rater, v] : r) {
      lo = seen ? std::min(lo, v) : v;
      hi = seen ? std::max(hi, v) : v;
      seen = true;
    }
  }
  if (doc.contains("labels")) {
    const auto labels = doc.at("labels").get<std::vector<int>>();
    if (!labels.empty()) {
      lo = *std::min_element(labels.begin(), labels.end());
      hi = *std::max_element(labels.begin(), labels.end());
    }
  }
  if (!seen) throw UsageError("ratings file has no ratings");

  metrics::BootstrapOptions boot;
  boot.seed = a.seed;
  boot.replicates = a.replicates;
  boot.confidence = a.confidence;

  metrics::RatingsTable table;
  table.units = unit_ids;
  table.raters = humans;
  std::vector<std::vector<int>> human_labels(unit_ids.size());
  for (std::size_t u = 0; u < unit_ids.size(); ++u) {
    std::vector<std::optional<int>> row;
    for (const auto& h : humans) {
      const auto it = ratings[u].find(h);
      row.push_back(it == ratings[u].end() ? std::nullopt : std::optional<int>(it->second));
      if (it != ratings[u].end()) human_labels[u].push_back(it->second);
    }
    table.values.push_back(std::move(row));
  }
  const auto alpha = metrics::bootstrap_ci(
      [&](std::span<const std::size_t> idx) -> std::optional<double> {
        try {
          return metrics::krippendorff_alpha(table.select_units(idx), distance);
        } catch (const MetricError&) {
          return std::nullopt;
        }
      },
      unit_ids.size(), weights, boot);

  // Majority label over the units every comparison uses.
  std::vector<std::size_t> voted_units;
  std::vector<std::vector<int>> to_vote;
  for (std::size_t u = 0; u < unit_ids.size(); ++u) {
    if (!human_labels[u].empty()) {
      voted_units.push_back(u);
      to_vote.push_back(human_labels[u]);
    }
  }
  const auto majority = metrics::majority_vote(to_vote, a.seed);

  const auto distribution_ci = [&](const std::vector<int>& labels,
                                   const std::vector<double>& w) {
    json d = json::object();
    for (int label = lo; label <= hi; ++label) {
      d[std::to_string(label)] = metrics::to_json(metrics::bootstrap_ci(
          [&](std::span<const std::size_t> idx) -> std::optional<double> {
            std::size_t hit = 0;
            for (auto i : idx) hit += labels[i] == label;
            return static_cast<double>(hit) / static_cast<double>(idx.size());
          },
          labels.size(), w, boot));
    }
    return d;
  };
  std::vector<double> voted_weights;
  for (auto u : voted_units) voted_weights.push_back(weights[u]);

  json report{{"distance", metrics::to_string(distance)},
              {"units", unit_ids.size()},
              {"human_raters", humans},
              {"alpha", metrics::to_json(alpha)},
              {"majority_distribution", distribution_ci(majority, voted_weights)}};
  json model_reports = json::object();
  for (const auto& m : models) {
    std::vector<int> mine, ref;
    std::vector<double> w;
    for (std::size_t v = 0; v < voted_units.size(); ++v) {
      const auto it = ratings[voted_units[v]].find(m);
      if (it == ratings[voted_units[v]].end()) continue;
      mine.push_back(it->second);
      ref.push_back(majority[v]);
      w.push_back(voted_weights[v]);
    }
    if (mine.empty()) throw UsageError("model rater " + m + " shares no units with the humans");
    const auto pick = [](const std::vector<int>& src, std::span<const std::size_t> idx) {
      std::vector<int> o;
      for (auto i : idx) o.push_back(src[i]);
      return o;
    };
    json f1 = json::object();
    for (int label = lo; label <= hi; ++label) {
      f1[std::to_string(label)] = metrics::to_json(metrics::bootstrap_ci(
          [&](std::span<const std::size_t> idx) -> std::optional<double> {
            return metrics::classwise_f1(pick(mine, idx), pick(ref, idx), label);
          },
          mine.size(), w, boot));
    }
    model_reports[m] = {
        {"n", mine.size()},
        {"qwk", metrics::to_json(metrics::bootstrap_ci(
                    [&](std::span<const std::size_t> idx) -> std::optional<double> {
                      return metrics::qwk(pick(mine, idx), pick(ref, idx), lo, hi);
                    },
                    mine.size(), w, boot))},
        {"f1", f1},
        {"distribution", distribution_ci(mine, w)}};
  }
  report["models"] = model_reports;
  const auto text = report.dump(2) + "\n";
  if (!a.out_file.empty()) write_text_file_atomic(a.out_file, text);
  out << text;
}

// ---- export-distill ------------------------------------------------------------

struct DistillArgs {
  std::vector<std::string> items;
  std::size_t n = 10000;
  std::uint64_t seed = 0;
  std::string out_file;
  std::vector<std::string> splits = {"train,valid"};
};

void export_distill(const workspace::Workspace& ws, const DistillArgs& a, std::ostream& out) {
  const auto config = ws.load_config();
  std::vector<std::string> items = a.items;
  if (items.empty()) {
    for (const auto& id : ws.corpus_items()) {
      if (fs::exists(ws.features_path(id))) items.push_back(id);
    }
  }
  if (items.empty()) throw UsageError("no featurized items to export");

  std::vector<Loaded> loaded;
  std::vector<std::vector<featurizer::LabelDraw>> draws;
  loaded.reserve(items.size());
  draws.reserve(items.size());
  for (const auto& id : items) {
    loaded.push_back(load_featurized(ws, id));
    const auto path = ws.draws_path(id);
    if (!fs::exists(path)) throw NotFoundError("item " + id + " has no draws store");
    draws.push_back(featurizer::load_draws(path));
  }
  std::vector<featurizer::DistillSource> sources;
  for (std::size_t i = 0; i < items.size(); ++i) {
    sources.push_back({&loaded[i].dataset, &loaded[i].components, &loaded[i].matrix, &draws[i]});
  }
  featurizer::DistillOptions options;
  options.n = a.n;
  options.seed = a.seed;
  options.splits = parse_splits(a.splits);
  options.gateway = config.gateway;
  const fs::path target = a.out_file.empty() ? ws.root() / "distill" / "distill.jsonl"
                                             : fs::path(a.out_file);
  const auto stats = featurizer::export_distillation_pairs(sources, options, target);
  out << "exported " << stats.records << " records from " << stats.pairs << " pairs to "
      << target.string() << "\n";
}

// ---- serve ---------------------------------------------------------------------

void serve(const workspace::Workspace& ws, const std::string& host, int port,
           const std::string& cors, std::ostream& err) {
  service::Service svc(ws, {cors});
  err << "serving " << ws.root().string() << " on http://" << host << ":" << port << "\n";
  service::serve(svc, host, port);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Interpretable short-answer scoring pipeline", "ascore"};
  app.require_subcommand(1);
  std::string root = ".";
  app.add_option("-w,--workspace", root, "Workspace directory")->capture_default_str();

  IngestArgs ingest_args;
  auto* ingest_cmd = app.add_subcommand("ingest", "Load response corpora into the workspace");
  ingest_cmd->add_option("--tsv", ingest_args.tsv, "ASAP-style training TSV");
  ingest_cmd->add_option("--test-tsv", ingest_args.test_tsv, "ASAP-style test TSV");
  ingest_cmd->add_option("--corpus", ingest_args.corpus, "Corpus JSON file");
  ingest_cmd->add_option("--items", ingest_args.items_file, "Item config JSON");
  ingest_cmd->add_option("--item", ingest_args.items, "Restrict to these items");
  ingest_cmd->add_option("--seed", ingest_args.seed, "Split seed")->capture_default_str();
  ingest_cmd->add_option("--ratio", ingest_args.ratio, "Train share")->capture_default_str();

  ExtractArgs extract_args;
  auto* extract_cmd = app.add_subcommand("extract", "Extract analytic components");
  extract_cmd->add_option("--item", extract_args.items, "Items (default: all)");
  extract_cmd->add_option("--backend", extract_args.backend, "mock or http")
      ->capture_default_str();
  extract_cmd->add_option("--cap", extract_args.cap, "Components per part");
  extract_cmd->add_option("--sample-size", extract_args.sample_size,
                          "Responses shown per prompt")
      ->capture_default_str();

  std::string edit_item, edit_ops;
  auto* edit_cmd = app.add_subcommand("edit-components", "Apply add/remove/rewrite edits");
  edit_cmd->add_option("--item", edit_item, "Item")->required();
  edit_cmd->add_option("--ops", edit_ops, "JSON array of edits")->required();

  FeaturizeArgs featurize_args;
  auto* featurize_cmd = app.add_subcommand("featurize", "Label responses against components");
  featurize_cmd->add_option("--item", featurize_args.items, "Items (default: all)");
  featurize_cmd->add_option("--backend", featurize_args.backend, "mock or http")
      ->capture_default_str();
  featurize_cmd->add_option("--temperature", featurize_args.temperature, "Sampling temperature");
  featurize_cmd->add_option("--splits", featurize_args.splits, "Comma-separated splits")
      ->capture_default_str();
  featurize_cmd->add_flag("--allow-partial", featurize_args.allow_partial,
                          "Keep going when some pairs fail");
  featurize_cmd->add_flag("--drop-raw", featurize_args.drop_raw,
                          "Do not store raw completions");
  featurize_cmd->add_option("--mock-noise", featurize_args.mock_noise,
                            "Label flip rate of the mock backend")
      ->capture_default_str();
  featurize_cmd->add_option("--workers", featurize_args.workers, "Worker threads");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Fit the ordinal scoring model");
  train_cmd->add_option("--item", train_args.items, "Items (default: all)");
  train_cmd->add_option("--lambda-grid", train_args.lambda_grid, "Comma-separated lambdas")
      ->capture_default_str();
  train_cmd->add_option("--seed", train_args.seed, "Seed")->capture_default_str();
  train_cmd->add_option("--max-iterations", train_args.max_iterations, "Optimizer cap")
      ->capture_default_str();

  EvaluateArgs evaluate_args;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a split against gold scores");
  evaluate_cmd->add_option("--item", evaluate_args.items, "Items (default: all)");
  evaluate_cmd->add_option("--split", evaluate_args.split, "Split")->capture_default_str();
  evaluate_cmd->add_option("--replicates", evaluate_args.replicates, "Bootstrap replicates")
      ->capture_default_str();
  evaluate_cmd->add_option("--seed", evaluate_args.seed, "Bootstrap seed")->capture_default_str();
  evaluate_cmd->add_option("--confidence", evaluate_args.confidence, "Interval level")
      ->capture_default_str();

  ExplainArgs explain_args;
  auto* explain_cmd = app.add_subcommand("explain", "Explain one response's score");
  explain_cmd->add_option("--response", explain_args.response, "Response id")->required();
  explain_cmd->add_option("--item", explain_args.item, "Item (default: search)");
  explain_cmd->add_option("--override", explain_args.overrides, "What-if edit C=L");
  explain_cmd->add_flag("--json", explain_args.json_output, "Print the JSON payload");
  explain_cmd->add_flag("--persist", explain_args.persist,
                        "Append the overrides to the override log");
  explain_cmd->add_option("--author", explain_args.author, "Override author");
  explain_cmd->add_option("--note", explain_args.note, "Override note");

  AgreementArgs agreement_args;
  auto* agreement_cmd = app.add_subcommand("agreement", "Rater agreement analysis");
  agreement_cmd->add_option("--ratings", agreement_args.ratings, "Ratings JSON")->required();
  agreement_cmd->add_option("--distance", agreement_args.distance,
                            "nominal, ordinal or interval")
      ->capture_default_str();
  agreement_cmd->add_option("--weights", agreement_args.weights_file,
                            "JSON map unit id -> sampling weight");
  agreement_cmd->add_option("--seed", agreement_args.seed, "Seed")->capture_default_str();
  agreement_cmd->add_option("--replicates", agreement_args.replicates, "Bootstrap replicates")
      ->capture_default_str();
  agreement_cmd->add_option("--confidence", agreement_args.confidence, "Interval level")
      ->capture_default_str();
  agreement_cmd->add_option("--out", agreement_args.out_file, "Also write the report here");

  DistillArgs distill_args;
  auto* distill_cmd = app.add_subcommand("export-distill", "Export featurizer training pairs");
  distill_cmd->add_option("--item", distill_args.items, "Items (default: all featurized)");
  distill_cmd->add_option("--n", distill_args.n, "Pairs to sample")->capture_default_str();
  distill_cmd->add_option("--seed", distill_args.seed, "Seed")->capture_default_str();
  distill_cmd->add_option("--out", distill_args.out_file, "Output JSONL");
  distill_cmd->add_option("--splits", distill_args.splits, "Eligible splits")
      ->capture_default_str();

  std::string host = "127.0.0.1", cors = "*";
  int port = 8080;
  auto* serve_cmd = app.add_subcommand("serve", "Serve the inspection API");
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", port, "Port")->capture_default_str();
  serve_cmd->add_option("--cors-origin", cors, "Allowed origin; empty disables CORS")
      ->capture_default_str();

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("ascore");
  for (const auto& s : args) argv_store.push_back(s);
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const workspace::Workspace ws{fs::path(root)};
    if (*ingest_cmd) ingest(ws, ingest_args, out);
    if (*extract_cmd) extract(ws, extract_args, out);
    if (*edit_cmd) edit_components(ws, edit_item, edit_ops, out, err);
    if (*featurize_cmd) featurize(ws, featurize_args, out, err);
    if (*train_cmd) train(ws, train_args, out, err);
    if (*evaluate_cmd) evaluate(ws, evaluate_args, out, err);
    if (*explain_cmd) explain(ws, explain_args, out);
    if (*agreement_cmd) agreement(agreement_args, out);
    if (*distill_cmd) export_distill(ws, distill_args, out);
    if (*serve_cmd) serve(ws, host, port, cors, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace ascore::cli
