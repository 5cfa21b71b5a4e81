#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ascore/dataset.hpp"
#include "ascore/llm_gateway.hpp"

namespace ascore::workspace {

struct Config {
  llm::GatewayConfig gateway;
  std::map<std::string, dataset::Item> items;
};

/// Directory holding every artifact of a pipeline run:
///
///   config.json              {gateway: {...}, items: {item_id: {...}}}
///   corpus/<item>.json       canonical corpus
///   components/<item>.json   component store
///   features/<item>.json     feature matrix
///   draws/<item>.jsonl       raw label draws
///   models/<item>.json       trained model
///   reports/<item>-<split>.json
///   overrides/<item>.jsonl   override log
///   cache/                   completion cache
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path config_path() const { return root_ / "config.json"; }
  std::filesystem::path corpus_path(const std::string& item) const;
  std::filesystem::path components_path(const std::string& item) const;
  std::filesystem::path features_path(const std::string& item) const;
  std::filesystem::path draws_path(const std::string& item) const;
  std::filesystem::path model_path(const std::string& item) const;
  std::filesystem::path report_path(const std::string& item, const std::string& split) const;
  std::filesystem::path overrides_path(const std::string& item) const;
  std::filesystem::path cache_dir() const { return root_ / "cache"; }

  /// Missing config file gives defaults and no items. A relative cache_dir
  /// is resolved against the workspace; an empty one becomes cache/.
  Config load_config() const;
  void save_config(const Config& config) const;

  /// Items with a corpus file, sorted.
  std::vector<std::string> corpus_items() const;

 private:
  std::filesystem::path root_;
};

}  // namespace ascore::workspace
