#include <doctest.h>

#include <httplib.h>

#include <set>
#include <thread>

#include "ascore/dataset.hpp"
#include "ascore/explanation.hpp"
#include "ascore/extraction.hpp"
#include "ascore/service_api.hpp"
#include "ascore/util.hpp"
#include "support.hpp"

using namespace ascore;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Toy workspace built once and copied per test.
const fs::path& pristine_workspace() {
  static testing::TempDir dir("ascore-svc-base");
  static bool built = [] {
    const auto r = testing::build_toy_workspace(dir.path());
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return true;
  }();
  (void)built;
  return dir.path();
}

class Harness {
 public:
  Harness() : service_(init(dir_.path())) {
    service_.mount(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~Harness() {
    server_.stop();
    thread_.join();
  }

  const fs::path& root() const { return dir_.path(); }
  service::Service& service() { return service_; }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

  std::pair<int, json> get(const std::string& path) const {
    auto res = client().Get(path);
    REQUIRE(res);
    return {res->status, json::parse(res->body)};
  }
  std::pair<int, json> post(const std::string& path, const std::string& body) const {
    auto res = client().Post(path, body, "application/json");
    REQUIRE(res);
    return {res->status, json::parse(res->body)};
  }

 private:
  static workspace::Workspace init(const fs::path& root) {
    fs::copy(pristine_workspace(), root, fs::copy_options::recursive);
    return workspace::Workspace(root);
  }

  testing::TempDir dir_{"ascore-svc"};
  service::Service service_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string first_test_response(const Harness& h) {
  auto [status, page] = h.get("/api/items/toy/responses?split=test&page_size=1");
  REQUIRE(status == 200);
  return page["responses"][0]["id"];
}

}  // namespace

TEST_CASE("item and component listings") {
  Harness h;
  auto [status, items] = h.get("/api/items");
  CHECK(status == 200);
  REQUIRE(items.size() == 1);
  CHECK(items[0]["id"] == "toy");
  CHECK(items[0]["num_responses"] == 50);
  CHECK(items[0]["num_components"] == 6);
  CHECK(items[0]["has_model"] == true);
  CHECK(items[0]["stale"] == false);

  auto [cs, comps] = h.get("/api/items/toy/components");
  CHECK(cs == 200);
  CHECK(comps["components"].size() == 6);
  CHECK(h.get("/api/items/nope/components").first == 404);

  auto res = h.client().Get("/api/items");
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
  auto pre = h.client().Options("/api/responses/1/whatif");
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
}

TEST_CASE("response pages partition the split in id order") {
  Harness h;
  std::vector<std::string> ids;
  int pages = 0;
  for (int page = 1;; ++page) {
    auto [status, body] = h.get("/api/items/toy/responses?page_size=7&page=" + std::to_string(page));
    REQUIRE(status == 200);
    pages = body["pages"];
    CHECK(body["total"] == 50);
    if (body["responses"].empty()) break;
    for (const auto& r : body["responses"]) {
      ids.push_back(r["id"]);
      if (r["split"] == "test") {
        CHECK(r["predicted_score"].is_number_integer());
        CHECK(r["effective_score"] == r["predicted_score"]);
      }
    }
  }
  CHECK(pages == 8);
  CHECK(ids.size() == 50);
  CHECK(std::is_sorted(ids.begin(), ids.end()));
  CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 50);

  auto [ts, test_page] = h.get("/api/items/toy/responses?split=test&page_size=500");
  CHECK(ts == 200);
  CHECK(test_page["total"] == 10);

  CHECK(h.get("/api/items/toy/responses?page=0").first == 400);
  CHECK(h.get("/api/items/toy/responses?page=abc").first == 400);
  CHECK(h.get("/api/items/toy/responses?page_size=501").first == 400);
  CHECK(h.get("/api/items/toy/responses?split=bogus").first == 400);
  CHECK(h.get("/api/items/nope/responses").first == 404);
}

TEST_CASE("explanation payload matches the library and what-if is stateless") {
  Harness h;
  const auto rid = first_test_response(h);
  auto [status, body] = h.get("/api/responses/" + rid + "/explanation");
  REQUIRE(status == 200);
  CHECK(body["item_id"] == "toy");
  CHECK(body["rows"].size() == 6);
  CHECK(body["base_labels"] == body["effective_labels"]);

  workspace::Workspace ws(h.root());
  const auto model = ordinal::load_model(ws.model_path("toy"));
  const auto comps = extraction::load_component_set(ws.components_path("toy"));
  const auto matrix = featurizer::load_feature_matrix(ws.features_path("toy"));
  const auto direct = service::explanation_payload("toy", model, comps, matrix, matrix.rows.at(rid), {});
  CHECK(body == direct);

  auto [s0, empty] = h.post("/api/responses/" + rid + "/whatif", R"({"overrides": []})");
  CHECK(s0 == 200);
  CHECK(empty == body);

  const auto e = explanation::explanation_from_json(body);
  for (const auto& cf : e.counterfactuals) {
    const std::string req = json{{"overrides", {{{"component_id", cf.component_id},
                                                 {"label", featurizer::to_int(cf.alternative_label)}}}}}.dump();
    auto [s1, a] = h.post("/api/responses/" + rid + "/whatif", req);
    auto [s2, b] = h.post("/api/responses/" + rid + "/whatif", req);
    CHECK(s1 == 200);
    CHECK(a == b);
    CHECK(a["predicted_score"] == cf.new_score);
    CHECK(a["eta"] == cf.new_eta);
  }
  CHECK(h.get("/api/responses/" + rid + "/explanation").second == body);
  CHECK_FALSE(fs::exists(ws.overrides_path("toy")));

  const auto path = "/api/responses/" + rid + "/whatif";
  CHECK(h.post(path, R"({"overrides": [{"component_id": "C1", "label": 3}]})").first == 400);
  CHECK(h.post(path, R"({"overrides": [{"component_id": "C99", "label": 1}]})").first == 404);
  CHECK(h.post(path, R"({"overrides": [{"label": 1}]})").first == 400);
  CHECK(h.post(path, "{not json").first == 400);
  CHECK(h.get("/api/responses/no-such-response/explanation").first == 404);
  CHECK(h.get("/api/responses/" + rid + "/explanation?item=nope").first == 404);
}

TEST_CASE("persisted overrides: read your writes, revert, reload") {
  Harness h;
  const auto rid = first_test_response(h);
  const auto path = "/api/responses/" + rid;
  const auto original = h.get(path + "/explanation").second;
  const int c1 = original["base_labels"]["C1"];
  const int flipped = (c1 + 1) % 3;

  auto [s, after] = h.post(path + "/overrides",
                           json{{"component_id", "C1"}, {"label", flipped}, {"author", "ann"}, {"note", "n"}}.dump());
  REQUIRE(s == 200);
  CHECK(after["effective_labels"]["C1"] == flipped);
  CHECK(after["rows"][0]["overridden"] == true);
  CHECK(h.get(path + "/explanation").second == after);

  workspace::Workspace ws(h.root());
  const auto log = explanation::load_override_log(ws.overrides_path("toy"));
  REQUIRE(log.size() == 1);
  CHECK(featurizer::to_int(log[0].old_label) == c1);
  CHECK(log[0].author == "ann");

  auto [page_status, page] = h.get("/api/items/toy/responses?split=test&page_size=1");
  CHECK(page["responses"][0]["has_overrides"] == true);

  CHECK(h.post(path + "/overrides", json{{"component_id", "C1"}, {"label", flipped}}.dump()).first == 400);
  CHECK(h.post(path + "/overrides", json{{"component_id", "C77"}, {"label", 0}}.dump()).first == 404);
  CHECK(h.post(path + "/overrides", json{{"component_id", "C1"}, {"label", "2"}}.dump()).first == 400);

  CHECK(h.post("/api/reload", "").first == 200);
  CHECK(h.get(path + "/explanation").second == after);

  auto [rs, reverted] = h.post(path + "/overrides", json{{"component_id", "C1"}, {"label", c1}}.dump());
  CHECK(rs == 200);
  CHECK(reverted == original);
}

TEST_CASE("concurrent overrides are all recorded") {
  Harness h;
  auto [status, page] = h.get("/api/items/toy/responses?split=train&page_size=16");
  REQUIRE(status == 200);
  std::vector<std::string> ids;
  std::vector<int> targets;
  for (const auto& r : page["responses"]) ids.push_back(r["id"]);
  for (const auto& id : ids) {
    const int cur = h.get("/api/responses/" + id + "/explanation").second["base_labels"]["C2"];
    targets.push_back((cur + 2) % 3);
  }
  std::vector<std::thread> threads;
  std::vector<int> codes(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    threads.emplace_back([&, i] {
      auto res = h.client().Post("/api/responses/" + ids[i] + "/overrides",
                                 json{{"component_id", "C2"}, {"label", targets[i]}}.dump(),
                                 "application/json");
      codes[i] = res ? res->status : -static_cast<int>(res.error());
      h.client().Get("/api/items");
    });
  }
  for (auto& t : threads) t.join();
  for (int c : codes) CHECK(c == 200);
  workspace::Workspace ws(h.root());
  CHECK(explanation::load_override_log(ws.overrides_path("toy")).size() == ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    CHECK(h.get("/api/responses/" + ids[i] + "/explanation").second["effective_labels"]["C2"] == targets[i]);
  }
}

TEST_CASE("stale artifacts and ambiguous ids") {
  Harness h;
  const auto rid = first_test_response(h);
  workspace::Workspace ws(h.root());

  auto corpus = dataset::load_corpus(ws.corpus_path("toy"));
  corpus.item.id = "twin";
  for (auto& r : corpus.responses) r.item_id = "twin";
  dataset::save_corpus(ws.corpus_path("twin"), corpus);
  CHECK(h.post("/api/reload", "").first == 200);
  CHECK(h.get("/api/responses/" + rid + "/explanation").first == 400);
  CHECK(h.get("/api/responses/" + rid + "/explanation?item=toy").first == 200);
  CHECK(h.get("/api/responses/" + rid + "/explanation?item=twin").first == 404);

  auto comps = extraction::load_component_set(ws.components_path("toy"));
  comps.components[0].text += " (edited)";
  extraction::save_component_set(ws.components_path("toy"), comps);
  CHECK(h.post("/api/reload", "").first == 200);
  auto [status, items] = h.get("/api/items");
  for (const auto& it : items) {
    if (it["id"] == "toy") CHECK(it["stale"] == true);
  }
  CHECK(h.get("/api/responses/" + rid + "/explanation?item=toy").first == 409);
  CHECK(h.post("/api/responses/" + rid + "/whatif?item=toy", "{}").first == 409);
}
