#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ascore/dataset.hpp"
#include "ascore/explanation.hpp"
#include "ascore/extraction.hpp"
#include "ascore/featurizer.hpp"
#include "ascore/ordinal_scorer.hpp"
#include "ascore/workspace.hpp"

namespace httplib {
class Server;
}

namespace ascore::service {

/// Immutable artifacts of one item as loaded from the workspace.
struct ItemArtifacts {
  dataset::Dataset dataset;
  std::optional<extraction::ComponentSet> components;
  std::optional<featurizer::FeatureMatrix> matrix;
  std::optional<ordinal::OrdinalModel> model;
  /// Why the artifacts cannot be combined; empty when they agree.
  std::string stale_reason;
};

struct ItemEntry {
  std::shared_ptr<const ItemArtifacts> artifacts;
  std::shared_ptr<const std::vector<explanation::OverrideRecord>> overrides;
};

struct Snapshot {
  std::map<std::string, ItemEntry> items;
};

/// Explanation JSON with the item id and the base and effective labels
/// (component id -> label) added. Shared by the service and the CLI.
nlohmann::json explanation_payload(const std::string& item_id,
                                   const ordinal::OrdinalModel& model,
                                   const extraction::ComponentSet& components,
                                   const featurizer::FeatureMatrix& matrix,
                                   const featurizer::FeatureVector& base,
                                   std::span<const explanation::OverrideRecord> overrides);

/// Status code plus JSON body; errors carry {"error": message}.
struct Reply {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  std::string cors_origin = "*";
};

/// Request handling over a workspace, independent of the transport. All
/// handlers are safe to call concurrently.
class Service {
 public:
  explicit Service(workspace::Workspace ws, ServiceOptions options = {});

  /// Rebuilds the snapshot from disk and swaps it in. On failure the old
  /// snapshot stays in place and the error propagates.
  void reload();
  std::shared_ptr<const Snapshot> snapshot() const;

  Reply list_items() const;
  Reply list_components(const std::string& item_id) const;
  Reply list_responses(const std::string& item_id, const std::optional<std::string>& split,
                       int page, int page_size) const;
  Reply get_explanation(const std::string& response_id,
                        const std::optional<std::string>& item_id) const;
  Reply post_whatif(const std::string& response_id, const std::optional<std::string>& item_id,
                    const nlohmann::json& body) const;
  Reply post_override(const std::string& response_id, const std::optional<std::string>& item_id,
                      const nlohmann::json& body);
  Reply post_reload();

  /// Registers the /api routes and CORS handling on `server`.
  void mount(httplib::Server& server);

  const workspace::Workspace& workspace() const { return ws_; }

 private:
  std::shared_ptr<const Snapshot> build_snapshot() const;

  workspace::Workspace ws_;
  ServiceOptions options_;
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::mutex write_mutex_;  // serializes override appends
};

/// Blocks serving on host:port until the server is stopped.
void serve(Service& service, const std::string& host, int port);

}  // namespace ascore::service
