#include "ascore/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "ascore/errors.hpp"
#include "ascore/metrics.hpp"
#include "ascore/util.hpp"

namespace ascore::dataset {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    case Split::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  if (s == "unlabeled") return Split::unlabeled;
  throw UsageError("unknown split '" + s + "'");
}

int Item::total_cap() const {
  int total = 0;
  for (const auto& p : parts) total += p.cap;
  return total;
}

void Item::validate() const {
  if (id.empty()) throw DatasetError("item id is empty");
  if (score_min >= score_max) {
    throw DatasetError("item " + id + ": score_min must be < score_max");
  }
  if (parts.empty()) throw DatasetError("item " + id + ": no parts");
  std::set<std::string> names;
  for (const auto& p : parts) {
    if (p.cap < 1) {
      throw DatasetError("item " + id + ": part '" + p.name + "' cap < 1");
    }
    if (!names.insert(p.name).second) {
      throw DatasetError("item " + id + ": duplicate part '" + p.name + "'");
    }
  }
}

void Dataset::validate() const {
  item.validate();
  std::set<std::string> ids;
  for (const auto& r : responses) {
    if (!ids.insert(r.id).second) {
      throw DatasetError("duplicate response id '" + r.id + "'");
    }
    if (r.item_id != item.id) {
      throw DatasetError("response " + r.id + " references item '" +
                         r.item_id + "', expected '" + item.id + "'");
    }
    for (const auto& score : {r.gold_score, r.second_score}) {
      if (score && (*score < item.score_min || *score > item.score_max)) {
        throw DatasetError("response " + r.id + ": score " +
                           std::to_string(*score) + " outside [" +
                           std::to_string(item.score_min) + ", " +
                           std::to_string(item.score_max) + "]");
      }
    }
    if (r.split == Split::unlabeled && r.gold_score) {
      throw DatasetError("unlabeled response " + r.id + " carries a score");
    }
  }
}

const Response* Dataset::find(const std::string& response_id) const {
  for (const auto& r : responses) {
    if (r.id == response_id) return &r;
  }
  return nullptr;
}

std::vector<Response> Dataset::with_split(Split s) const {
  std::vector<Response> out;
  for (const auto& r : responses) {
    if (r.split == s) out.push_back(r);
  }
  return out;
}

namespace {

std::optional<int> parse_int(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

std::string strip_quotes(std::string_view s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
    s.remove_prefix(1);
    s.remove_suffix(1);
  }
  return std::string(s);
}

bool essay_set_matches(std::string_view essay_set, const std::string& item_id) {
  essay_set = trim(essay_set);
  if (essay_set == item_id) return true;
  return item_id.size() > 1 && (item_id[0] == 'Q' || item_id[0] == 'q') &&
         essay_set == std::string_view(item_id).substr(1);
}

}  // namespace

Dataset load_asap_tsv(const std::filesystem::path& path, const Item& item,
                      Split split) {
  item.validate();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) {
    throw DatasetError(path.string() + ": no rows for item " + item.id);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  // Tolerate a UTF-8 byte order mark.
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = ascore::split(line, '\t');
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return i;
    }
    return std::nullopt;
  };
  const auto id_col = column("Id");
  const auto set_col = column("EssaySet");
  const auto text_col = column("EssayText");
  const auto s1_col = column("Score1");
  const auto s2_col = column("Score2");
  if (!id_col || !set_col || !text_col) {
    throw DatasetError(path.string() +
                       ": header must contain Id, EssaySet and EssayText");
  }

  Dataset ds;
  ds.item = item;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = ascore::split(line, '\t');
    if (fields.size() != header.size()) {
      throw DatasetError(path.string() + ": row " + std::to_string(line_no) +
                         ": expected " + std::to_string(header.size()) +
                         " columns, found " + std::to_string(fields.size()));
    }
    if (!essay_set_matches(fields[*set_col], item.id)) continue;

    Response r;
    r.id = std::string(trim(fields[*id_col]));
    r.item_id = item.id;
    r.text = strip_quotes(fields[*text_col]);
    r.split = split;
    auto read_score = [&](std::optional<std::size_t> col,
                          const char* name) -> std::optional<int> {
      if (!col) return std::nullopt;
      auto v = parse_int(fields[*col]);
      if (!v) {
        throw DatasetError(path.string() + ": row " + std::to_string(line_no) +
                           ": " + name + " is not an integer: '" +
                           fields[*col] + "'");
      }
      if (*v < item.score_min || *v > item.score_max) {
        throw DatasetError(path.string() + ": row " + std::to_string(line_no) +
                           ": " + name + " " + std::to_string(*v) +
                           " outside item score range");
      }
      return v;
    };
    if (split != Split::unlabeled) {
      r.gold_score = read_score(s1_col, "Score1");
      r.second_score = read_score(s2_col, "Score2");
    }
    ds.responses.push_back(std::move(r));
  }
  if (ds.responses.empty()) {
    throw DatasetError(path.string() + ": no rows for item " + item.id);
  }
  ds.validate();
  return ds;
}

std::pair<Dataset, Dataset> split_train_valid(const Dataset& dataset,
                                              double ratio,
                                              std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw UsageError("split ratio must lie in (0, 1)");
  }
  for (const auto& r : dataset.responses) {
    if (!r.gold_score) {
      throw DatasetError("cannot split: response " + r.id + " is unlabeled");
    }
  }
  const std::size_t n = dataset.responses.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
  const auto n_train =
      static_cast<std::size_t>(ratio * static_cast<double>(n) + 1e-9);
  std::vector<bool> is_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;

  Dataset train{dataset.item, {}};
  Dataset valid{dataset.item, {}};
  for (std::size_t i = 0; i < n; ++i) {
    Response r = dataset.responses[i];
    if (is_train[i]) {
      r.split = Split::train;
      train.responses.push_back(std::move(r));
    } else {
      r.split = Split::valid;
      valid.responses.push_back(std::move(r));
    }
  }
  return {std::move(train), std::move(valid)};
}

double human_human_qwk(const Dataset& dataset) {
  std::vector<int> a;
  std::vector<int> b;
  for (const auto& r : dataset.responses) {
    if (!r.gold_score || !r.second_score) {
      throw DatasetError("response " + r.id + " lacks a second human score");
    }
    a.push_back(*r.gold_score);
    b.push_back(*r.second_score);
  }
  if (a.empty()) throw DatasetError("dataset is empty");
  return metrics::qwk(a, b, dataset.item.score_min, dataset.item.score_max);
}

json to_json(const Item& item) {
  json parts = json::array();
  for (const auto& p : item.parts) parts.push_back({{"name", p.name}, {"cap", p.cap}});
  return {{"id", item.id},
          {"prompt_text", item.prompt_text},
          {"parts", parts},
          {"score_min", item.score_min},
          {"score_max", item.score_max}};
}

namespace {

Item item_body_from_json(const json& j, std::string id) {
  Item item;
  item.id = std::move(id);
  item.prompt_text = j.value("prompt_text", "");
  item.score_min = j.at("score_min").get<int>();
  item.score_max = j.at("score_max").get<int>();
  if (j.contains("parts")) {
    for (const auto& p : j.at("parts")) {
      item.parts.push_back({p.at("name").get<std::string>(), p.value("cap", 15)});
    }
  } else {
    item.parts.push_back({"main", 15});
  }
  return item;
}

std::optional<int> optional_int(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<int>();
}

}  // namespace

Item item_from_json(const json& j) {
  try {
    Item item = item_body_from_json(j, j.at("id").get<std::string>());
    item.validate();
    return item;
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed item: ") + e.what());
  }
}

json to_json(const Response& r) {
  return {{"id", r.id},
          {"item_id", r.item_id},
          {"text", r.text},
          {"gold_score", r.gold_score ? json(*r.gold_score) : json(nullptr)},
          {"second_score", r.second_score ? json(*r.second_score) : json(nullptr)},
          {"split", to_string(r.split)}};
}

Response response_from_json(const json& j) {
  try {
    Response r;
    r.id = j.at("id").get<std::string>();
    r.item_id = j.at("item_id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.gold_score = optional_int(j, "gold_score");
    r.second_score = optional_int(j, "second_score");
    r.split = split_from_string(j.value("split", "unlabeled"));
    return r;
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed response: ") + e.what());
  } catch (const UsageError& e) {
    throw DatasetError(std::string("malformed response: ") + e.what());
  }
}

json to_json(const Dataset& d) {
  json responses = json::array();
  for (const auto& r : d.responses) responses.push_back(to_json(r));
  return {{"item", to_json(d.item)}, {"responses", responses}};
}

Dataset dataset_from_json(const json& j) {
  Dataset d;
  try {
    d.item = item_from_json(j.at("item"));
    for (const auto& r : j.at("responses")) {
      d.responses.push_back(response_from_json(r));
    }
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed corpus: ") + e.what());
  }
  d.validate();
  return d;
}

Dataset load_corpus(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
  return dataset_from_json(j);
}

void save_corpus(const std::filesystem::path& path, const Dataset& dataset) {
  dataset.validate();
  write_text_file_atomic(path, to_json(dataset).dump(2) + "\n");
}

std::map<std::string, Item> items_from_config(const json& j) {
  std::map<std::string, Item> items;
  if (!j.is_object()) throw DatasetError("item config must be a JSON object");
  for (const auto& [id, body] : j.items()) {
    try {
      Item item = item_body_from_json(body, id);
      item.validate();
      items.emplace(id, std::move(item));
    } catch (const json::exception& e) {
      throw DatasetError("item config for " + id + ": " + e.what());
    }
  }
  return items;
}

}  // namespace ascore::dataset
