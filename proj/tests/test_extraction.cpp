#include <doctest.h>

#include <fstream>
#include <mutex>
#include <set>

#include "ascore/dataset.hpp"
#include "ascore/errors.hpp"
#include "ascore/extraction.hpp"
#include "support.hpp"

using namespace ascore;
using namespace ascore::extraction;

namespace {

class ScriptedBackend : public llm::Backend {
 public:
  explicit ScriptedBackend(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  llm::BackendKind kind() const override { return llm::BackendKind::mock; }
  std::string complete(const llm::CompletionRequest& r) override {
    std::lock_guard lock(mutex_);
    ++calls;
    return replies_[std::min<std::size_t>(static_cast<std::size_t>(r.sample_index), replies_.size() - 1)];
  }
  int calls = 0;

 private:
  std::vector<std::string> replies_;
  std::mutex mutex_;
};

std::vector<std::string> toy_texts() {
  const auto ds = dataset::load_asap_tsv(testing::source_dir() / "data/toy/train.tsv",
                                         {"toy", "", {{"main", 6}}, 0, 2});
  std::vector<std::string> out;
  for (const auto& r : ds.responses) out.push_back(r.text);
  return out;
}

dataset::Item item_with_parts(std::vector<dataset::PartSpec> parts) {
  return {"toy", "Compare pandas, koalas and pythons.", std::move(parts), 0, 2};
}

llm::Gateway mock_gateway() { return llm::Gateway(std::make_shared<llm::MockBackend>(), {}); }

}  // namespace

TEST_CASE("component lists in common formats") {
  const std::string text =
      "Here are the components:\n"
      "1. Pandas eat bamboo.\n"
      "2) Koalas eat eucalyptus\n"
      "  - **Both are mammals**\n"
      "* \"Pythons are reptiles\"\n"
      "\xE2\x80\xA2 Pythons lay eggs\n"
      "12: Pandas live in China\n"
      "1.5 is not an entry\n"
      "-not an entry either\n";
  const auto entries = parse_component_list(text, 6);
  CHECK(entries == std::vector<std::string>{"Pandas eat bamboo.", "Koalas eat eucalyptus",
                                             "Both are mammals", "Pythons are reptiles",
                                             "Pythons lay eggs", "Pandas live in China"});
  CHECK_THROWS_AS(parse_component_list(text, 5), ExtractionParseError);
  CHECK_THROWS_AS(parse_component_list("no list at all", 1), ExtractionParseError);
}

TEST_CASE("prompt sample is stratified over length and bounded") {
  std::vector<std::string> texts;
  for (int i = 300; i >= 1; --i) texts.push_back(std::string(static_cast<std::size_t>(i), 'x'));
  PromptOptions opt;
  opt.sample_size = 30;
  const auto idx = sample_for_prompt(texts, opt);
  CHECK(idx.size() == 30);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  int per_tercile[3] = {0, 0, 0};
  for (auto i : idx) ++per_tercile[(texts[i].size() - 1) / 100];
  CHECK(per_tercile[0] == 10);
  CHECK(per_tercile[1] == 10);
  CHECK(per_tercile[2] == 10);

  opt.char_budget = 1000;
  std::size_t used = 0;
  for (auto i : sample_for_prompt(texts, opt)) used += texts[i].size();
  CHECK(used <= 1000);

  opt = {};
  CHECK(sample_for_prompt(std::span<const std::string>(texts).first(7), opt).size() == 7);
}

TEST_CASE("extraction prompt contents") {
  const std::vector<std::string> texts = {"alpha answer", "beta answer"};
  auto item = item_with_parts({{"a", 3}, {"b", 4}});
  const auto req = build_extraction_prompt(item, texts, "b", 4, llm::GatewayConfig{});
  const auto& user = req.messages.back().content;
  CHECK(user.find("Extract exactly 4") != std::string::npos);
  CHECK(user.find("(part 2 of 2)") != std::string::npos);
  CHECK(user.find("alpha answer") != std::string::npos);
  CHECK(req.model_name == llm::GatewayConfig{}.extractor_model);
  CHECK(req.temperature == llm::GatewayConfig{}.extractor_temperature);
  CHECK_THROWS_AS(build_extraction_prompt(item, texts, "zzz", 4, {}), UsageError);
  CHECK_THROWS_AS(build_extraction_prompt(item, {}, "a", 4, {}), UsageError);
}

TEST_CASE("offline extraction yields exactly cap components per part") {
  const auto texts = toy_texts();
  auto gw = mock_gateway();
  auto one = extract_components(item_with_parts({{"main", 6}}), texts, gw);
  REQUIRE(one.size() == 6);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one.components[i].id == "C" + std::to_string(i + 1));
    CHECK(one.components[i].index == static_cast<int>(i));
    CHECK(seen.insert(one.components[i].text).second);
  }
  CHECK(one.backend == "mock");

  auto gw2 = mock_gateway();
  auto again = extract_components(item_with_parts({{"main", 6}}), texts, gw2);
  CHECK(again.digest() == one.digest());

  auto two = extract_components(item_with_parts({{"x", 4}, {"y", 5}}), texts, gw);
  REQUIRE(two.size() == 9);
  for (std::size_t i = 0; i < 4; ++i) CHECK(two.components[i].part == "x");
  for (std::size_t i = 4; i < 9; ++i) CHECK(two.components[i].part == "y");
  CHECK(two.components[8].id == "C9");
  CHECK(two.components[4].index == 0);

  ExtractOptions opt;
  opt.cap = 3;
  CHECK(extract_components(item_with_parts({{"main", 6}}), texts, gw, opt).size() == 3);
}

TEST_CASE("unparseable extraction output is retried with a new sample") {
  auto backend = std::make_shared<ScriptedBackend>(std::vector<std::string>{"sorry", "1. a\n2. b"});
  llm::Gateway gw(backend, {});
  const std::vector<std::string> texts = {"t"};
  auto set = extract_components(item_with_parts({{"main", 2}}), texts, gw);
  CHECK(set.size() == 2);
  CHECK(backend->calls == 2);

  auto stubborn = std::make_shared<ScriptedBackend>(std::vector<std::string>{"1. only one"});
  llm::Gateway gw2(stubborn, {});
  CHECK_THROWS_AS(extract_components(item_with_parts({{"main", 2}}), texts, gw2), ExtractionError);
  CHECK(stubborn->calls == ExtractOptions{}.parse_attempts);
}

TEST_CASE("edits keep surviving ids and renumber positions") {
  ComponentSet set;
  set.item_id = "toy";
  set.components = {{"C1", "toy", "a", 0, "one", ""},
                    {"C2", "toy", "a", 1, "two", ""},
                    {"C3", "toy", "b", 0, "three", ""}};
  const auto before = set.digest();
  auto res = edit_component_set(set, {RemoveComponent{"C2", ""}, AddComponent{"a", "four", "why"},
                                      RewriteComponent{"C3", "three!", ""}, AddComponent{"c", "five", ""}});
  const auto& cs = res.set.components;
  REQUIRE(cs.size() == 4);
  CHECK(cs[0].id == "C1");
  CHECK(cs[1].id == "C4");
  CHECK(cs[1].part == "a");
  CHECK(cs[1].index == 1);
  CHECK(cs[2].id == "C3");
  CHECK(cs[2].text == "three!");
  CHECK(cs[2].provenance.find("three") != std::string::npos);
  CHECK(cs[3].id == "C5");
  CHECK(cs[3].part == "c");
  CHECK(res.set.digest() != before);
  CHECK(res.warnings.empty());

  CHECK(edit_component_set(set, {}).set.digest() == before);
  CHECK_FALSE(edit_component_set(set, {AddComponent{"a", "one", ""}}).warnings.empty());
  CHECK_THROWS_AS(edit_component_set(set, {RemoveComponent{"C9", ""}}), NotFoundError);
  CHECK_THROWS_AS(edit_component_set(set, {RewriteComponent{"C1", "", ""}}), UsageError);

  CHECK(std::holds_alternative<AddComponent>(edit_from_json({{"op", "add"}, {"part", "a"}, {"text", "x"}})));
  CHECK_THROWS_AS(edit_from_json({{"op", "merge"}}), UsageError);
}

TEST_CASE("component store round trip and validation") {
  ComponentSet set;
  set.item_id = "toy";
  set.created_at = "2024-01-01T00:00:00Z";
  set.backend = "mock";
  set.model_name = "m";
  set.components = {{"C1", "toy", "a", 0, "one", "extracted"}};
  testing::TempDir dir;
  save_component_set(dir.path() / "c.json", set);
  CHECK(load_component_set(dir.path() / "c.json") == set);
  CHECK(set.position("C1") == 0u);
  CHECK_FALSE(set.position("C2"));

  auto j = to_json(set);
  j["components"].push_back(j["components"][0]);
  CHECK_THROWS_AS(component_set_from_json(j), ExtractionError);

  auto meta = set;
  meta.created_at = "other";
  meta.components[0].provenance = "changed";
  CHECK(meta.digest() == set.digest());
}

TEST_CASE("prompt sample size is min(n, sample_size) with distinct indices") {
  for (std::size_t n = 1; n <= 60; ++n) {
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < n; ++i) texts.push_back(std::string(1 + (i * 7) % 13, 'y'));
    for (std::size_t s : {1u, 2u, 5u, 20u, 200u}) {
      PromptOptions opt;
      opt.sample_size = s;
      const auto idx = sample_for_prompt(texts, opt);
      CHECK(idx.size() == std::min(n, s));
      CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == idx.size());
    }
  }
}
