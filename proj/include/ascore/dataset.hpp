#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ascore::dataset {

enum class Split { train, valid, test, unlabeled };

std::string to_string(Split s);
/// Throws UsageError on unknown names.
Split split_from_string(const std::string& s);

struct PartSpec {
  std::string name;
  int cap = 15;  // components extracted for this part

  bool operator==(const PartSpec&) const = default;
};

struct Item {
  std::string id;
  std::string prompt_text;
  std::vector<PartSpec> parts;
  int score_min = 0;
  int score_max = 0;

  int num_categories() const { return score_max - score_min + 1; }
  int total_cap() const;
  /// Throws DatasetError when an invariant is broken.
  void validate() const;

  bool operator==(const Item&) const = default;
};

struct Response {
  std::string id;
  std::string item_id;
  std::string text;
  std::optional<int> gold_score;
  std::optional<int> second_score;
  Split split = Split::unlabeled;

  bool operator==(const Response&) const = default;
};

struct Dataset {
  Item item;
  std::vector<Response> responses;

  void validate() const;
  const Response* find(const std::string& response_id) const;
  std::vector<Response> with_split(Split s) const;

  bool operator==(const Dataset&) const = default;
};

/// Rows of an ASAP-SAS style TSV (Id, EssaySet, Score1, Score2, EssayText)
/// whose EssaySet matches the item. `item.id` may be the bare set number
/// ("1") or carry a Q prefix ("Q1"). Rows are tagged with `split`; when the
/// split is `unlabeled` or the file has no score columns, scores are left
/// empty.
Dataset load_asap_tsv(const std::filesystem::path& path, const Item& item,
                      Split split = Split::train);

/// Seeded, platform-stable shuffle; the first floor(ratio * n) shuffled
/// responses become train, the rest valid. Each side keeps the input order.
std::pair<Dataset, Dataset> split_train_valid(const Dataset& dataset,
                                              double ratio,
                                              std::uint64_t seed);

double human_human_qwk(const Dataset& dataset);

// Canonical JSON corpus format.
nlohmann::json to_json(const Item& item);
Item item_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Response& r);
Response response_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Dataset& d);
Dataset dataset_from_json(const nlohmann::json& j);

Dataset load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const Dataset& dataset);

/// Item config file: item_id -> {score_min, score_max, parts, prompt_text}.
std::map<std::string, Item> items_from_config(const nlohmann::json& j);

}  // namespace ascore::dataset
