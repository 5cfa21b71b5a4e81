#include <doctest.h>

#include <fstream>

#include "ascore/errors.hpp"
#include "ascore/explanation.hpp"
#include "ascore/util.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ascore;
using namespace ascore::explanation;
using featurizer::label_from_int;

namespace {

extraction::ComponentSet components(std::size_t k) {
  extraction::ComponentSet cs;
  cs.item_id = "synthetic";
  for (std::size_t i = 0; i < k; ++i) {
    cs.components.push_back({"C" + std::to_string(i + 1), "synthetic", "main", static_cast<int>(i),
                             "claim number " + std::to_string(i + 1), ""});
  }
  return cs;
}

ordinal::OrdinalModel bind(ordinal::OrdinalModel m, const extraction::ComponentSet& cs) {
  m.component_set_digest = cs.digest();
  return m;
}

FeatureVector fv(const std::string& id, std::vector<int> labels) {
  FeatureVector f;
  f.response_id = id;
  for (int l : labels) f.labels.push_back(label_from_int(l));
  return f;
}

ordinal::OrdinalModel hand_model(const extraction::ComponentSet& cs) {
  ordinal::OrdinalModel m;
  m.item_id = "synthetic";
  m.k = 3;
  m.num_categories = 3;
  m.weights = {{0, 0, 1}, {0, 0.5, 1}, {0, 0, 0.25}};
  m.thresholds = {0.5, 1.5};
  return bind(m, cs);
}

OverrideRecord edit(const std::string& rid, const std::string& cid, Label from, Label to) {
  return {rid, cid, from, to, "tester", "2024-01-01T00:00:00Z", ""};
}

}  // namespace

TEST_CASE("zero-weight model explains nothing") {
  const auto cs = components(4);
  Rng rng(1);
  auto m = oracle::random_model(rng, 4, 3);
  for (auto& row : m.weights) row = {0, 0, 0};
  m = bind(m, cs);
  const auto e = explain(m, cs, fv("r", {2, 1, 0, 2}), cs.digest());
  for (const auto& r : e.rows) CHECK(r.contribution == 0.0);
  CHECK(e.counterfactuals.empty());
  CHECK_FALSE(e.next_higher);
}

TEST_CASE("hand-set model: rows, band and counterfactuals") {
  const auto cs = components(3);
  const auto m = hand_model(cs);
  const auto e = explain(m, cs, fv("r7", {0, 1, 0}), cs.digest());
  CHECK(e.eta == 0.5);
  CHECK(e.predicted_score == 1);
  REQUIRE(e.rows.size() == 3);
  CHECK(e.rows[1].contribution == 0.5);
  CHECK(e.rows[1].component_text == "claim number 2");
  REQUIRE(e.counterfactuals.size() == 2);
  // Absent -> direct on C1 crosses the upper threshold.
  CHECK(e.counterfactuals[0] == Counterfactual{"C1", Label::direct, 1.5, 2, true});
  CHECK(e.counterfactuals[1] == Counterfactual{"C2", Label::absent, 0.0, 0, true});
  CHECK(e.next_higher == 0u);
}

TEST_CASE("counterfactuals equal exhaustive enumeration") {
  Rng rng(77);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(30);
    const auto cs = components(k);
    const auto m = bind(oracle::random_model(rng, k, 2 + static_cast<int>(rng.uniform_index(4))), cs);
    const auto f = oracle::random_features(rng, k, "r");
    const auto e = explain(m, cs, f, cs.digest());
    const auto expected = oracle::enumerate_counterfactuals(m, cs, f);
    CHECK(e.counterfactuals == expected);

    std::optional<std::size_t> best;
    bool plus_one = false;
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (expected[i].new_score <= e.predicted_score) continue;
      plus_one = plus_one || expected[i].new_score == e.predicted_score + 1;
      if (!best || std::abs(expected[i].new_eta - e.eta) < std::abs(expected[*best].new_eta - e.eta)) best = i;
    }
    CHECK(e.next_higher == best);
    if (plus_one) CHECK(expected[*e.next_higher].new_score == e.predicted_score + 1);
  }
}

TEST_CASE("single overrides agree with the counterfactual list") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(12);
    const auto cs = components(k);
    const auto m = bind(oracle::random_model(rng, k, 3), cs);
    const auto f = oracle::random_features(rng, k, "r");
    const auto base = explain(m, cs, f, cs.digest());
    for (std::size_t i = 0; i < k; ++i) {
      for (int l = 0; l < 3; ++l) {
        if (l == featurizer::to_int(f.labels[i])) continue;
        const std::vector<OverrideRecord> ov = {edit("r", cs.components[i].id, f.labels[i], label_from_int(l))};
        const auto rescored = rescore_with_overrides(m, cs, f, cs.digest(), ov);
        CHECK(rescored == explain(m, cs, apply_overrides(f, ov, cs), cs.digest()));
        CHECK(rescored.rows[i].overridden);
        const Counterfactual* listed = nullptr;
        for (const auto& c : base.counterfactuals) {
          if (c.component_id == cs.components[i].id && c.alternative_label == label_from_int(l)) listed = &c;
        }
        if (listed) {
          CHECK(rescored.predicted_score == listed->new_score);
          CHECK(rescored.eta == listed->new_eta);
        } else {
          CHECK(rescored.predicted_score == base.predicted_score);
        }
      }
    }
  }
}

TEST_CASE("override then revert reproduces the original") {
  const auto cs = components(3);
  const auto m = hand_model(cs);
  const auto f = fv("r", {0, 1, 0});
  const auto original = explain(m, cs, f, cs.digest());
  const std::vector<OverrideRecord> there_and_back = {edit("r", "C1", Label::absent, Label::direct),
                                                      edit("r", "C1", Label::direct, Label::absent)};
  const auto reverted = rescore_with_overrides(m, cs, f, cs.digest(), there_and_back);
  CHECK(reverted == original);
  CHECK(apply_overrides(f, there_and_back, cs) == f);

  // Later overrides of the same component win.
  const std::vector<OverrideRecord> twice = {edit("r", "C3", Label::absent, Label::partial),
                                             edit("r", "C3", Label::partial, Label::direct)};
  CHECK(apply_overrides(f, twice, cs).labels[2] == Label::direct);
}

TEST_CASE("stale and mismatched inputs are refused") {
  const auto cs = components(3);
  const auto m = hand_model(cs);
  const auto f = fv("r", {0, 1, 0});
  CHECK_THROWS_AS(explain(m, cs, f, "other-digest"), StaleArtifactError);
  auto edited = cs;
  edited.components[0].text = "changed";
  CHECK_THROWS_AS(explain(m, edited, f, edited.digest()), StaleArtifactError);
  CHECK_THROWS_AS(explain(m, cs, fv("r", {0, 1}), cs.digest()), StaleArtifactError);
  CHECK_THROWS_AS(apply_overrides(f, std::vector{edit("r", "C9", Label::absent, Label::direct)}, cs), NotFoundError);
  CHECK_THROWS_AS(apply_overrides(f, std::vector{edit("q", "C1", Label::absent, Label::direct)}, cs), UsageError);
}

TEST_CASE("text rendering matches the golden file") {
  const auto cs = components(3);
  const auto m = hand_model(cs);
  const std::vector<OverrideRecord> ov = {edit("r7", "C3", Label::absent, Label::partial)};
  const auto text = render_text(rescore_with_overrides(m, cs, fv("r7", {0, 1, 0}), cs.digest(), ov));
  const auto golden = read_text_file(testing::source_dir() / "tests/golden/explain_hand.txt");
  CHECK(text == golden);
}

TEST_CASE("rendering lists every score-changing edit") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(8);
    const auto cs = components(k);
    const auto m = bind(oracle::random_model(rng, k, 3), cs);
    const auto e = explain(m, cs, oracle::random_features(rng, k, "r"), cs.digest());
    const auto text = render_text(e);
    std::size_t lines = 0, pos = 0;
    while ((pos = text.find("If instead", pos)) != std::string::npos) { ++lines; ++pos; }
    CHECK(lines == e.counterfactuals.size());
    CHECK((text.find("[smallest step up]") != std::string::npos) == e.next_higher.has_value());
  }
}

TEST_CASE("explanation json round trip") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(10);
    const auto cs = components(k);
    const auto m = bind(oracle::random_model(rng, k, 4), cs);
    const auto e = explain(m, cs, oracle::random_features(rng, k, "r"), cs.digest());
    CHECK(explanation_from_json(nlohmann::json::parse(to_json(e).dump())) == e);
  }
}

TEST_CASE("override log") {
  testing::TempDir dir;
  const auto log = dir.path() / "overrides.jsonl";
  CHECK(load_override_log(log).empty());
  const auto a = edit("r1", "C1", Label::absent, Label::direct);
  auto b = edit("r2", "C2", Label::partial, Label::absent);
  b.note = "misread \"sentence\"";
  append_override(log, a);
  append_override(log, b);
  const auto back = load_override_log(log);
  CHECK(back == std::vector<OverrideRecord>{a, b});
  CHECK(overrides_for(back, "r2") == std::vector<OverrideRecord>{b});

  auto j = to_json(a);
  j["new_label"] = 0;
  CHECK_THROWS_AS(override_from_json(j), UsageError);
  j["new_label"] = 5;
  CHECK_THROWS_AS(override_from_json(j), UsageError);
  std::ofstream(log, std::ios::app) << "{broken\n";
  CHECK_THROWS_AS(load_override_log(log), IoError);
}
