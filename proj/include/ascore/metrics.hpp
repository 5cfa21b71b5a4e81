#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace ascore::metrics {

struct QwkResult {
  double value = 0.0;
  /// Both raters used a single identical category, so expected disagreement
  /// is zero; value is reported as 1.0.
  bool degenerate = false;
};

/// Quadratic weighted kappa between two integer ratings on
/// [min_score, max_score].
QwkResult qwk_detailed(std::span<const int> a, std::span<const int> b,
                       int min_score, int max_score);
double qwk(std::span<const int> a, std::span<const int> b, int min_score,
           int max_score);

enum class Distance { nominal, ordinal, interval };
std::string to_string(Distance d);
Distance distance_from_string(const std::string& s);

/// Units x raters table of ordinal labels; missing ratings are nullopt.
struct RatingsTable {
  std::vector<std::string> units;
  std::vector<std::string> raters;
  std::vector<std::vector<std::optional<int>>> values;  // [unit][rater]

  /// Restrict to a subset of units, preserving repeats (for resampling).
  RatingsTable select_units(std::span<const std::size_t> indices) const;
};

/// Krippendorff's alpha from the coincidence matrix. Throws MetricError when
/// fewer than two pairable values exist. When every pairable value is the
/// same (no expected disagreement) the result is 1.0.
double krippendorff_alpha(const RatingsTable& table, Distance distance);

struct F1Result {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  /// The label never occurs in pred or gold.
  bool degenerate = false;
};

F1Result classwise_f1_detailed(std::span<const int> pred,
                               std::span<const int> gold, int label);
double classwise_f1(std::span<const int> pred, std::span<const int> gold,
                    int label);

struct IntervalEstimate {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double confidence = 0.95;
  int replicates = 0;
};

nlohmann::json to_json(const IntervalEstimate& e);

/// Metric evaluated on a resample given as indices into the original sample.
/// Returning nullopt marks the metric undefined on that resample.
using ResampleMetric =
    std::function<std::optional<double>(std::span<const std::size_t>)>;

struct BootstrapOptions {
  int replicates = 1000;
  double confidence = 0.95;
  std::uint64_t seed = 0;
  /// Consecutive redraws allowed for one replicate before giving up.
  int max_redraws = 100;
};

/// Percentile bootstrap. Each replicate draws n indices with replacement,
/// with probability proportional to `weights` (uniform when empty or all
/// equal). Replicate r uses substream (seed, r), so results do not depend on
/// evaluation order.
IntervalEstimate bootstrap_ci(const ResampleMetric& metric, std::size_t n,
                              std::span<const double> weights,
                              const BootstrapOptions& options);

/// Weighted share of each label; weights empty means uniform.
std::map<int, double> label_distribution(std::span<const int> labels,
                                         std::span<const double> weights);

/// Modal label per unit; ties are broken by a uniform draw from substream
/// (seed, unit index) over the tied labels in ascending order.
std::vector<int> majority_vote(const std::vector<std::vector<int>>& labels,
                               std::uint64_t seed);

enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
  double p_value = 1.0;
  double w_plus = 0.0;
  int n = 0;  // nonzero deltas
  bool exact = false;
};

/// Two-sided Wilcoxon signed-rank test. Zero deltas are dropped and ties get
/// average ranks. `automatic` is exact for n <= 25 and uses the normal
/// approximation with tie and continuity correction above.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> deltas,
                                    WilcoxonMethod method =
                                        WilcoxonMethod::automatic);

}  // namespace ascore::metrics
