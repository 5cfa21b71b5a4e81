#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ascore {

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

std::string read_text_file(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
void write_text_file_atomic(const std::filesystem::path& path,
                            std::string_view contents);

void append_line(const std::filesystem::path& path, std::string_view line);

/// UTC timestamp in ISO-8601. Honors SOURCE_DATE_EPOCH when set so that
/// artifact files are reproducible.
std::string now_iso8601();

std::string to_lower_ascii(std::string_view s);
std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char delim);

/// Seeded generator whose output sequence is identical on every platform.
/// The std distributions are implementation-defined, so sampling helpers are
/// written out here on top of mt19937_64 (whose output the standard fixes).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent substream for (seed, stream), via splitmix64 mixing.
  static Rng substream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next() { return engine_(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Uniform double in [0, 1).
  double uniform01();
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace ascore
