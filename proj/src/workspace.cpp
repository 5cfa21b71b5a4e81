#include "ascore/workspace.hpp"

#include <algorithm>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"

namespace ascore::workspace {

namespace fs = std::filesystem;

namespace {

void check_item_id(const std::string& item) {
  if (item.empty() || item.find_first_of("/\\") != std::string::npos || item == "." ||
      item == "..") {
    throw UsageError("invalid item id '" + item + "'");
  }
}

}  // namespace

Workspace::Workspace(fs::path root) : root_(std::move(root)) {}

fs::path Workspace::corpus_path(const std::string& item) const {
  check_item_id(item);
  return root_ / "corpus" / (item + ".json");
}

fs::path Workspace::components_path(const std::string& item) const {
  check_item_id(item);
  return root_ / "components" / (item + ".json");
}

fs::path Workspace::features_path(const std::string& item) const {
  check_item_id(item);
  return root_ / "features" / (item + ".json");
}

fs::path Workspace::draws_path(const std::string& item) const {
  check_item_id(item);
  return root_ / "draws" / (item + ".jsonl");
}

fs::path Workspace::model_path(const std::string& item) const {
  check_item_id(item);
  return root_ / "models" / (item + ".json");
}

fs::path Workspace::report_path(const std::string& item, const std::string& split) const {
  check_item_id(item);
  return root_ / "reports" / (item + "-" + split + ".json");
}

fs::path Workspace::overrides_path(const std::string& item) const {
  check_item_id(item);
  return root_ / "overrides" / (item + ".jsonl");
}

Config Workspace::load_config() const {
  Config config;
  if (fs::exists(config_path())) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(config_path()));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(config_path().string() + ": " + e.what());
    }
    if (!j.is_object()) throw UsageError(config_path().string() + ": expected an object");
    if (j.contains("gateway")) config.gateway = llm::gateway_config_from_json(j.at("gateway"));
    if (j.contains("items")) config.items = dataset::items_from_config(j.at("items"));
  }
  if (config.gateway.cache_dir.empty()) {
    config.gateway.cache_dir = cache_dir();
  } else if (config.gateway.cache_dir.is_relative()) {
    config.gateway.cache_dir = root_ / config.gateway.cache_dir;
  }
  return config;
}

void Workspace::save_config(const Config& config) const {
  auto gateway = llm::to_json(config.gateway);
  if (config.gateway.cache_dir == cache_dir()) gateway.erase("cache_dir");
  nlohmann::json items = nlohmann::json::object();
  for (const auto& [id, item] : config.items) {
    auto j = dataset::to_json(item);
    j.erase("id");
    items[id] = j;
  }
  write_text_file_atomic(config_path(),
                         nlohmann::json{{"gateway", gateway}, {"items", items}}.dump(2) + "\n");
}

std::vector<std::string> Workspace::corpus_items() const {
  std::vector<std::string> out;
  const auto dir = root_ / "corpus";
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      out.push_back(entry.path().stem().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace ascore::workspace
