#include <doctest.h>

#include <fstream>
#include <functional>
#include <mutex>

#include "ascore/errors.hpp"
#include "ascore/featurizer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ascore;
using namespace ascore::featurizer;

namespace {

/// Backend answering every request through a callback.
class ScriptedBackend : public llm::Backend {
 public:
  explicit ScriptedBackend(std::function<std::string(const llm::CompletionRequest&)> fn)
      : fn_(std::move(fn)) {}
  llm::BackendKind kind() const override { return llm::BackendKind::mock; }
  std::string complete(const llm::CompletionRequest& r) override {
    std::lock_guard lock(mutex_);
    ++calls;
    return fn_(r);
  }
  int calls = 0;

 private:
  std::function<std::string(const llm::CompletionRequest&)> fn_;
  std::mutex mutex_;
};

dataset::Item toy_item() {
  dataset::Item it;
  it.id = "t";
  it.prompt_text = "Compare the animals.";
  it.parts = {{"main", 2}};
  it.score_min = 0;
  it.score_max = 2;
  return it;
}

extraction::ComponentSet toy_components() {
  extraction::ComponentSet cs;
  cs.item_id = "t";
  cs.components = {{"C1", "t", "main", 0, "pandas eat bamboo", ""},
                   {"C2", "t", "main", 1, "pythons are reptiles", ""}};
  return cs;
}

dataset::Response response(const std::string& id, const std::string& text,
                           dataset::Split split = dataset::Split::train) {
  return {id, "t", text, 1, std::nullopt, split};
}

}  // namespace

TEST_CASE("label marker parsing") {
  CHECK(parse_label("reasoning\nLABEL: 2") == Label::direct);
  CHECK(parse_label("LABEL: 1 at first\nthen LABEL:0") == Label::absent);
  CHECK(parse_label("LABEL: **1**") == Label::partial);
  CHECK_THROWS_AS(parse_label("no marker here"), LabelParseError);
  CHECK_THROWS_AS(parse_label("LABEL: 3"), LabelParseError);
  CHECK_THROWS_AS(parse_label("LABEL: 12"), LabelParseError);
  CHECK_THROWS_AS(parse_label("LABEL: two"), LabelParseError);
  CHECK_THROWS_AS(parse_label("LABEL:"), LabelParseError);
}

TEST_CASE("first-to-three matches prefix enumeration on every sequence") {
  for (int len = 0; len <= 7; ++len) {
    for (const auto& seq : oracle::all_sequences(len)) {
      std::vector<Label> labels;
      for (int v : seq) labels.push_back(label_from_int(v));
      const auto expected = oracle::first_to_three(seq);
      if (!expected) {
        CHECK_THROWS_AS(aggregate_first_to_three(std::span<const Label>(labels)), AggregationError);
        continue;
      }
      std::size_t consumed = 0;
      const auto got = aggregate_first_to_three([&]() -> std::optional<Label> {
        if (consumed >= labels.size()) return std::nullopt;
        return labels[consumed++];
      });
      CHECK(to_int(got.label) == expected->label);
      CHECK(got.draws_used == expected->used);
      CHECK(consumed == static_cast<std::size_t>(expected->used));
      CHECK(got.draws_used >= 3);
      CHECK(got.draws_used <= 7);
    }
  }
  // Pigeonhole: every length-7 sequence settles.
  for (const auto& seq : oracle::all_sequences(7)) CHECK(oracle::first_to_three(seq));
}

TEST_CASE("one-hot encoding") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto f = oracle::random_features(rng, 1 + rng.uniform_index(40), "r");
    const auto bits = f.one_hot();
    CHECK(bits.size() == 3 * f.k());
    int ones = 0;
    for (auto b : bits) ones += b;
    CHECK(ones == static_cast<int>(f.k()));
    for (std::size_t i = 0; i < f.k(); ++i) CHECK(bits[3 * i + static_cast<std::size_t>(to_int(f.labels[i]))] == 1);
    CHECK(decode_one_hot(bits) == f.labels);
  }
  const std::vector<std::uint8_t> two = {1, 1, 0}, none = {0, 0, 0}, ragged = {1, 0};
  CHECK_THROWS_AS(decode_one_hot(two), UsageError);
  CHECK_THROWS_AS(decode_one_hot(none), UsageError);
  CHECK_THROWS_AS(decode_one_hot(ragged), UsageError);
  CHECK_THROWS_AS(label_from_int(3), UsageError);
}

TEST_CASE("offline labeling rule") {
  CHECK(mock_label_rule("Giant PANDAS eat bamboo all day", "pandas eat bamboo") == Label::direct);
  CHECK(mock_label_rule("the bamboo forest has pandas", "pandas eat bamboo") == Label::partial);
  CHECK(mock_label_rule("koalas sleep", "pandas eat bamboo") == Label::absent);
  CHECK(mock_label_rule("   ", "pandas eat bamboo") == Label::absent);
  CHECK(mock_label_rule("anything", "a an") == Label::absent);
}

TEST_CASE("label prompt carries the label definitions and both texts") {
  const auto req = build_label_prompt(response("r1", "my answer"), toy_components().components[0],
                                      toy_item(), llm::GatewayConfig{});
  const auto& user = req.messages.back().content;
  CHECK(user.find("2, if r contains direct paraphrase of c") != std::string::npos);
  CHECK(user.find("1, if r contains partial paraphrase of c") != std::string::npos);
  CHECK(user.find("0, if r does not contain paraphrase of c") != std::string::npos);
  CHECK(user.find("my answer") != std::string::npos);
  CHECK(user.find("pandas eat bamboo") != std::string::npos);
  CHECK(req.model_name == llm::GatewayConfig{}.featurizer_model);
}

TEST_CASE("pair featurization skips unparseable draws and stops at three") {
  const std::vector<std::string> script = {"LABEL: 1", "garbage", "LABEL: 2", "LABEL: 1",
                                           "LABEL: 2", "LABEL: 1", "LABEL: 0"};
  auto backend = std::make_shared<ScriptedBackend>([&](const llm::CompletionRequest& r) {
    return script[static_cast<std::size_t>(r.sample_index)];
  });
  llm::Gateway gw(backend, {});
  auto res = featurize_pair(response("r", "x"), toy_components().components[0], toy_item(), gw);
  CHECK(res.aggregate.label == Label::partial);
  CHECK(res.aggregate.draws_used == 5);
  CHECK(res.raw_draws == 6);
  CHECK(res.parse_failures == 1);
  REQUIRE(res.draws.size() == 5);
  CHECK(res.draws[1].sample_index == 2);
  CHECK(res.draws.back().raw_text == "LABEL: 1");

  // Identical requests come from the cache.
  const int before = backend->calls;
  featurize_pair(response("r", "x"), toy_components().components[0], toy_item(), gw);
  CHECK(backend->calls == before);
}

TEST_CASE("pair featurization gives up after the raw draw budget") {
  auto backend = std::make_shared<ScriptedBackend>([](const llm::CompletionRequest&) { return std::string("?"); });
  llm::Gateway gw(backend, {});
  FeaturizeOptions opt;
  opt.max_raw_draws = 4;
  CHECK_THROWS_AS(featurize_pair(response("r", "x"), toy_components().components[0], toy_item(), gw, opt),
                  AggregationError);
  CHECK(backend->calls == 4);
}

TEST_CASE("corpus featurization: failures, partial mode and ordering") {
  auto backend = std::make_shared<ScriptedBackend>([](const llm::CompletionRequest& r) {
    const auto& text = r.messages.back().content;
    if (text.find("broken response") != std::string::npos) return std::string("no label");
    return text.find("pythons") != std::string::npos ? std::string("LABEL: 0") : std::string("LABEL: 2");
  });
  llm::GatewayConfig cfg;
  cfg.max_in_flight = 3;
  llm::Gateway gw(backend, cfg);
  const std::vector<dataset::Response> rs = {response("b", "fine"), response("a", "broken response"),
                                             response("c", "fine too")};
  CHECK_THROWS_AS(featurize_corpus(toy_item(), rs, toy_components(), gw), FeaturizationError);

  FeaturizeOptions opt;
  opt.allow_partial = true;
  auto res = featurize_corpus(toy_item(), rs, toy_components(), gw, opt);
  CHECK(res.matrix.rows.size() == 2);
  CHECK(res.matrix.rows.count("a") == 0);
  CHECK(res.failures.size() == 2);
  CHECK(res.matrix.rows.at("b").labels == std::vector<Label>{Label::direct, Label::absent});
  CHECK(res.matrix.component_set_digest == toy_components().digest());
  CHECK(res.draws_used_histogram.at(3) == 4);
  for (std::size_t i = 1; i < res.draws.size(); ++i) {
    const auto& p = res.draws[i - 1];
    const auto& q = res.draws[i];
    const auto pos = [](const std::string& c) { return c == "C1" ? 0 : 1; };
    CHECK(std::make_tuple(p.response_id, pos(p.component_id), p.sample_index) <
          std::make_tuple(q.response_id, pos(q.component_id), q.sample_index));
  }
  CHECK(gw.peak_in_flight() <= 3);
}

TEST_CASE("feature matrix and draws round trip") {
  Rng rng(4);
  FeatureMatrix m;
  m.item_id = "t";
  m.component_set_digest = "abc";
  for (int r = 0; r < 20; ++r) m.rows["r" + std::to_string(r)] = oracle::random_features(rng, 5, "r" + std::to_string(r));
  testing::TempDir dir;
  save_feature_matrix(dir.path() / "f.json", m);
  CHECK(load_feature_matrix(dir.path() / "f.json") == m);
  CHECK(m.k() == 5);

  std::vector<LabelDraw> draws = {{"r1", "C1", 0, "text\nLABEL: 2", Label::direct},
                                  {"r1", "C1", 1, "", Label::absent}};
  save_draws(dir.path() / "d.jsonl", draws);
  CHECK(load_draws(dir.path() / "d.jsonl") == draws);

  auto j = to_json(m);
  j["rows"][0]["labels"].push_back(1);
  CHECK_THROWS_AS(feature_matrix_from_json(j), FeaturizationError);
}

TEST_CASE("distillation export keeps only draws agreeing with the aggregate") {
  dataset::Dataset ds{toy_item(), {}};
  for (int i = 0; i < 6; ++i) {
    ds.responses.push_back(response("r" + std::to_string(i), "pandas eat bamboo " + std::to_string(i),
                                    i < 5 ? dataset::Split::train : dataset::Split::test));
  }
  // Draw labels cycle so that aggregates need more than three draws.
  auto backend = std::make_shared<ScriptedBackend>([](const llm::CompletionRequest& r) {
    static const int cycle[] = {2, 1, 2, 0, 2, 1, 1};
    return "why\nLABEL: " + std::to_string(cycle[r.sample_index % 7]);
  });
  llm::Gateway gw(backend, {});
  auto res = featurize_corpus(toy_item(), ds.responses, toy_components(), gw);
  const auto comps = toy_components();
  DistillSource src{&ds, &comps, &res.matrix, &res.draws};

  testing::TempDir dir;
  DistillOptions opt;
  opt.n = 10;
  opt.seed = 3;
  const auto out = dir.path() / "distill.jsonl";
  auto stats = export_distillation_pairs(std::span<const DistillSource>(&src, 1), opt, out);
  CHECK(stats.pairs == 10);
  std::ifstream in(out);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(parse_label(j["completion_text"]) == Label::direct);
    CHECK(j["prompt_messages"].size() == 2);
    CHECK(j["prompt_messages"][1]["content"].get<std::string>().find(" 5\n") == std::string::npos);
    ++lines;
  }
  // Every pair aggregates to 2 after five draws, three of which agree.
  CHECK(stats.records == 30);
  CHECK(lines == stats.records);

  opt.n = 11;
  CHECK_THROWS_AS(export_distillation_pairs(std::span<const DistillSource>(&src, 1), opt, out), UsageError);
  auto stale = comps;
  stale.components[0].text = "changed";
  DistillSource bad{&ds, &stale, &res.matrix, &res.draws};
  opt.n = 1;
  CHECK_THROWS_AS(export_distillation_pairs(std::span<const DistillSource>(&bad, 1), opt, out), StaleArtifactError);
}
