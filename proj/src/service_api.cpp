#include "ascore/service_api.hpp"

#include <httplib.h>

#include <algorithm>
#include <filesystem>
#include <variant>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"

namespace ascore::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Reply error(int status, const std::string& message) {
  return {status, json{{"error", message}}};
}

json labels_json(const extraction::ComponentSet& components,
                 const featurizer::FeatureVector& fv) {
  json out = json::object();
  for (std::size_t i = 0; i < components.size() && i < fv.k(); ++i) {
    out[components.components[i].id] = featurizer::to_int(fv.labels[i]);
  }
  return out;
}

std::optional<featurizer::Label> label_of(const json& j) {
  if (!j.is_number_integer()) return std::nullopt;
  const auto v = j.get<long long>();
  if (v < 0 || v >= featurizer::kNumLabels) return std::nullopt;
  return featurizer::label_from_int(static_cast<int>(v));
}

}  // namespace

json explanation_payload(const std::string& item_id, const ordinal::OrdinalModel& model,
                         const extraction::ComponentSet& components,
                         const featurizer::FeatureMatrix& matrix,
                         const featurizer::FeatureVector& base,
                         std::span<const explanation::OverrideRecord> overrides) {
  const auto effective = explanation::apply_overrides(base, overrides, components);
  auto body = explanation::to_json(
      explanation::explain(model, components, effective, matrix.component_set_digest));
  body["item_id"] = item_id;
  body["base_labels"] = labels_json(components, base);
  body["effective_labels"] = labels_json(components, effective);
  return body;
}

Service::Service(workspace::Workspace ws, ServiceOptions options)
    : ws_(std::move(ws)), options_(std::move(options)) {
  reload();
}

std::shared_ptr<const Snapshot> Service::build_snapshot() const {
  auto snap = std::make_shared<Snapshot>();
  for (const auto& item : ws_.corpus_items()) {
    auto art = std::make_shared<ItemArtifacts>();
    art->dataset = dataset::load_corpus(ws_.corpus_path(item));
    if (fs::exists(ws_.components_path(item))) {
      art->components = extraction::load_component_set(ws_.components_path(item));
    }
    if (fs::exists(ws_.features_path(item))) {
      art->matrix = featurizer::load_feature_matrix(ws_.features_path(item));
    }
    if (fs::exists(ws_.model_path(item))) {
      art->model = ordinal::load_model(ws_.model_path(item));
    }
    if (art->components) {
      const auto digest = art->components->digest();
      if (art->matrix && art->matrix->component_set_digest != digest) {
        art->stale_reason = "feature matrix was computed for a different component set";
      } else if (art->model && art->model->component_set_digest != digest) {
        art->stale_reason = "model was trained on a different component set";
      }
    }
    ItemEntry entry;
    entry.artifacts = std::move(art);
    entry.overrides = std::make_shared<const std::vector<explanation::OverrideRecord>>(
        explanation::load_override_log(ws_.overrides_path(item)));
    snap->items.emplace(item, std::move(entry));
  }
  return snap;
}

void Service::reload() {
  std::lock_guard write_lock(write_mutex_);
  auto fresh = build_snapshot();
  std::lock_guard lock(snapshot_mutex_);
  snapshot_ = std::move(fresh);
}

std::shared_ptr<const Snapshot> Service::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

Reply Service::list_items() const {
  const auto snap = snapshot();
  json out = json::array();
  for (const auto& [id, entry] : snap->items) {
    const auto& a = *entry.artifacts;
    out.push_back({{"id", id},
                   {"prompt_text", a.dataset.item.prompt_text},
                   {"score_min", a.dataset.item.score_min},
                   {"score_max", a.dataset.item.score_max},
                   {"num_responses", a.dataset.responses.size()},
                   {"num_components", a.components ? a.components->size() : 0},
                   {"has_components", a.components.has_value()},
                   {"has_features", a.matrix.has_value()},
                   {"has_model", a.model.has_value()},
                   {"stale", !a.stale_reason.empty()}});
  }
  return {200, out};
}

Reply Service::list_components(const std::string& item_id) const {
  const auto snap = snapshot();
  const auto it = snap->items.find(item_id);
  if (it == snap->items.end()) return error(404, "unknown item " + item_id);
  const auto& a = *it->second.artifacts;
  if (!a.components) return error(404, "item " + item_id + " has no components");
  return {200, extraction::to_json(*a.components)};
}

Reply Service::list_responses(const std::string& item_id,
                              const std::optional<std::string>& split, int page,
                              int page_size) const {
  const auto snap = snapshot();
  const auto it = snap->items.find(item_id);
  if (it == snap->items.end()) return error(404, "unknown item " + item_id);
  if (page < 1) return error(400, "page must be >= 1");
  if (page_size < 1 || page_size > 500) return error(400, "page_size must be in 1..500");
  std::optional<dataset::Split> want;
  if (split) {
    try {
      want = dataset::split_from_string(*split);
    } catch (const UsageError& e) {
      return error(400, e.what());
    }
  }

  const auto& a = *it->second.artifacts;
  std::vector<const dataset::Response*> rows;
  for (const auto& r : a.dataset.responses) {
    if (!want || r.split == *want) rows.push_back(&r);
  }
  std::sort(rows.begin(), rows.end(),
            [](const auto* x, const auto* y) { return x->id < y->id; });

  const bool can_score = a.model && a.matrix && a.components && a.stale_reason.empty() &&
                         a.model->k == a.components->size();
  const auto total = rows.size();
  const auto size = static_cast<std::size_t>(page_size);
  const auto pages = (total + size - 1) / size;
  const auto begin = std::min(total, (static_cast<std::size_t>(page) - 1) * size);
  const auto end = std::min(total, begin + size);

  json listing = json::array();
  for (auto i = begin; i < end; ++i) {
    const auto& r = *rows[i];
    json row{{"id", r.id},
             {"split", dataset::to_string(r.split)},
             {"text", r.text},
             {"gold_score", r.gold_score ? json(*r.gold_score) : json()},
             {"predicted_score", json()},
             {"effective_score", json()},
             {"has_overrides", false}};
    const featurizer::FeatureVector* fv = nullptr;
    if (can_score) {
      const auto found = a.matrix->rows.find(r.id);
      if (found != a.matrix->rows.end() && found->second.k() == a.model->k) fv = &found->second;
    }
    if (fv) {
      row["predicted_score"] = ordinal::predict(*a.model, *fv);
      const auto mine = explanation::overrides_for(*it->second.overrides, r.id);
      row["has_overrides"] = !mine.empty();
      try {
        row["effective_score"] = ordinal::predict(
            *a.model, explanation::apply_overrides(*fv, mine, *a.components));
      } catch (const Error&) {
        row["effective_score"] = json();
      }
    }
    listing.push_back(std::move(row));
  }
  return {200, json{{"item_id", item_id},
                    {"split", split ? json(*split) : json()},
                    {"page", page},
                    {"page_size", page_size},
                    {"total", total},
                    {"pages", pages},
                    {"responses", listing}}};
}

namespace {

// Resolves a response id to its item; the optional item id disambiguates.
std::variant<Reply, std::pair<std::string, ItemEntry>> locate(
    const Snapshot& snap, const std::string& response_id,
    const std::optional<std::string>& item_id) {
  std::vector<std::pair<std::string, ItemEntry>> found;
  for (const auto& [id, entry] : snap.items) {
    if (item_id && id != *item_id) continue;
    if (entry.artifacts->dataset.find(response_id)) found.emplace_back(id, entry);
  }
  if (item_id && !snap.items.count(*item_id)) return error(404, "unknown item " + *item_id);
  if (found.empty()) return error(404, "unknown response " + response_id);
  if (found.size() > 1) {
    return error(400, "response id " + response_id + " exists in several items; pass ?item=");
  }
  return found.front();
}

struct Ready {
  const ItemArtifacts* art;
  const featurizer::FeatureVector* base;
  std::vector<explanation::OverrideRecord> persisted;
};

std::variant<Reply, Ready> prepare(const ItemEntry& entry, const std::string& response_id) {
  const auto& a = *entry.artifacts;
  if (!a.stale_reason.empty()) return error(409, a.stale_reason);
  if (!a.components) return error(404, "item has no components");
  if (!a.matrix) return error(404, "item has no feature matrix");
  if (!a.model) return error(404, "item has no trained model");
  const auto row = a.matrix->rows.find(response_id);
  if (row == a.matrix->rows.end()) return error(404, "response " + response_id + " has no features");
  return Ready{&a, &row->second, explanation::overrides_for(*entry.overrides, response_id)};
}

Reply explanation_reply(const std::string& item_id, const Ready& ready,
                        std::span<const explanation::OverrideRecord> overrides) {
  const auto& a = *ready.art;
  try {
    return {200, explanation_payload(item_id, *a.model, *a.components, *a.matrix, *ready.base,
                                     overrides)};
  } catch (const StaleArtifactError& e) {
    return error(409, e.what());
  } catch (const NotFoundError& e) {
    return error(404, e.what());
  }
}

}  // namespace

Reply Service::get_explanation(const std::string& response_id,
                               const std::optional<std::string>& item_id) const {
  const auto snap = snapshot();
  auto where = locate(*snap, response_id, item_id);
  if (auto* r = std::get_if<Reply>(&where)) return *r;
  const auto& [item, entry] = std::get<1>(where);
  auto ready = prepare(entry, response_id);
  if (auto* r = std::get_if<Reply>(&ready)) return *r;
  const auto& ok = std::get<Ready>(ready);
  return explanation_reply(item, ok, ok.persisted);
}

Reply Service::post_whatif(const std::string& response_id,
                           const std::optional<std::string>& item_id,
                           const json& body) const {
  const auto snap = snapshot();
  auto where = locate(*snap, response_id, item_id);
  if (auto* r = std::get_if<Reply>(&where)) return *r;
  const auto& [item, entry] = std::get<1>(where);
  auto ready = prepare(entry, response_id);
  if (auto* r = std::get_if<Reply>(&ready)) return *r;
  auto overrides = std::get<Ready>(ready).persisted;

  if (!body.is_object()) return error(400, "body must be a JSON object");
  const json list = body.value("overrides", json::array());
  if (!list.is_array()) return error(400, "overrides must be an array");
  for (const auto& o : list) {
    if (!o.is_object() || !o.contains("component_id") || !o["component_id"].is_string()) {
      return error(400, "each override needs a component_id");
    }
    const auto label = label_of(o.value("label", json()));
    if (!label) return error(400, "label must be 0, 1 or 2");
    explanation::OverrideRecord rec;
    rec.response_id = response_id;
    rec.component_id = o["component_id"].get<std::string>();
    rec.new_label = *label;
    overrides.push_back(std::move(rec));
  }
  return explanation_reply(item, std::get<Ready>(ready), overrides);
}

Reply Service::post_override(const std::string& response_id,
                             const std::optional<std::string>& item_id, const json& body) {
  if (!body.is_object()) return error(400, "body must be a JSON object");
  if (!body.contains("component_id") || !body["component_id"].is_string()) {
    return error(400, "component_id is required");
  }
  const auto label = label_of(body.value("label", json()));
  if (!label) return error(400, "label must be 0, 1 or 2");
  const auto component_id = body["component_id"].get<std::string>();
  std::string author, note;
  try {
    author = body.value("author", "");
    note = body.value("note", "");
  } catch (const json::exception&) {
    return error(400, "author and note must be strings");
  }

  std::lock_guard write_lock(write_mutex_);
  const auto snap = snapshot();
  auto where = locate(*snap, response_id, item_id);
  if (auto* r = std::get_if<Reply>(&where)) return *r;
  const auto [item, entry] = std::get<1>(where);
  auto ready = prepare(entry, response_id);
  if (auto* r = std::get_if<Reply>(&ready)) return *r;
  const auto& ok = std::get<Ready>(ready);

  const auto pos = ok.art->components->position(component_id);
  if (!pos) return error(404, "unknown component " + component_id);
  const auto current =
      explanation::apply_overrides(*ok.base, ok.persisted, *ok.art->components).labels[*pos];
  if (current == *label) {
    return error(400, "component " + component_id + " already has label " +
                          std::to_string(featurizer::to_int(*label)));
  }

  explanation::OverrideRecord rec{response_id, component_id, current, *label,
                                  author,      now_iso8601(), note};
  explanation::append_override(ws_.overrides_path(item), rec);

  auto log = std::make_shared<std::vector<explanation::OverrideRecord>>(*entry.overrides);
  log->push_back(rec);
  auto next = std::make_shared<Snapshot>(*snap);
  next->items[item].overrides = log;
  {
    std::lock_guard lock(snapshot_mutex_);
    snapshot_ = next;
  }
  auto persisted = ok.persisted;
  persisted.push_back(rec);
  return explanation_reply(item, ok, persisted);
}

Reply Service::post_reload() {
  try {
    reload();
  } catch (const Error& e) {
    return error(500, std::string("reload failed: ") + e.what());
  }
  return {200, json{{"reloaded", true}, {"items", snapshot()->items.size()}}};
}

void Service::mount(httplib::Server& server) {
  const auto send = [](httplib::Response& res, const Reply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  const auto query = [](const httplib::Request& req,
                        const char* key) -> std::optional<std::string> {
    if (!req.has_param(key)) return std::nullopt;
    return req.get_param_value(key);
  };
  const auto parse_body = [](const httplib::Request& req) -> std::optional<json> {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::parse_error&) {
      return std::nullopt;
    }
  };
  const auto int_param = [](const std::optional<std::string>& v, int fallback) {
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const int n = std::stoi(*v, &used);
      return used == v->size() ? n : -1;
    } catch (const std::exception&) {
      return -1;
    }
  };

  server.Get("/api/items", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, list_items());
  });
  server.Get(R"(/api/items/([^/]+)/components)",
             [this, send](const httplib::Request& req, httplib::Response& res) {
               send(res, list_components(req.matches[1]));
             });
  server.Get(R"(/api/items/([^/]+)/responses)",
             [this, send, query, int_param](const httplib::Request& req, httplib::Response& res) {
               send(res, list_responses(req.matches[1], query(req, "split"),
                                        int_param(query(req, "page"), 1),
                                        int_param(query(req, "page_size"), 20)));
             });
  server.Get(R"(/api/responses/([^/]+)/explanation)",
             [this, send, query](const httplib::Request& req, httplib::Response& res) {
               send(res, get_explanation(req.matches[1], query(req, "item")));
             });
  server.Post(R"(/api/responses/([^/]+)/whatif)",
              [this, send, query, parse_body](const httplib::Request& req,
                                              httplib::Response& res) {
                const auto body = parse_body(req);
                send(res, body ? post_whatif(req.matches[1], query(req, "item"), *body)
                               : error(400, "body is not valid JSON"));
              });
  server.Post(R"(/api/responses/([^/]+)/overrides)",
              [this, send, query, parse_body](const httplib::Request& req,
                                              httplib::Response& res) {
                const auto body = parse_body(req);
                send(res, body ? post_override(req.matches[1], query(req, "item"), *body)
                               : error(400, "body is not valid JSON"));
              });
  server.Post("/api/reload", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, post_reload());
  });
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });

  server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
    if (options_.cors_origin.empty()) return;
    res.set_header("Access-Control-Allow-Origin", options_.cors_origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  server.set_exception_handler(
      [send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
          std::rethrow_exception(ep);
        } catch (const std::exception& e) {
          what = e.what();
        } catch (...) {
        }
        send(res, error(500, what));
      });
}

void serve(Service& service, const std::string& host, int port) {
  httplib::Server server;
  service.mount(server);
  if (!server.listen(host, port)) {
    throw IoError("cannot listen on " + host + ":" + std::to_string(port));
  }
}

}  // namespace ascore::service
