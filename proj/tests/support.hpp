#pragma once

#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ascore/cli.hpp"

namespace testing {

inline std::filesystem::path source_dir() { return ASCORE_SOURCE_DIR; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "ascore") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

inline CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = ascore::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Runs ingest .. evaluate on the bundled toy data into `ws`. Returns the
/// first failing step's result, or the last one.
inline CliRun build_toy_workspace(const std::filesystem::path& ws) {
  const auto toy = source_dir() / "data" / "toy";
  const std::string w = ws.string();
  const std::vector<std::vector<std::string>> steps = {
      {"-w", w, "ingest", "--tsv", (toy / "train.tsv").string(), "--test-tsv",
       (toy / "test.tsv").string(), "--items", (toy / "items.json").string(), "--seed", "7"},
      {"-w", w, "extract", "--backend", "mock"},
      {"-w", w, "featurize", "--backend", "mock"},
      {"-w", w, "train", "--seed", "1"},
      {"-w", w, "evaluate", "--replicates", "200"},
  };
  CliRun last;
  for (const auto& s : steps) {
    last = cli(s);
    if (last.code != 0) return last;
  }
  return last;
}

}  // namespace testing
