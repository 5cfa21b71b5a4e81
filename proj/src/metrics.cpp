#include "ascore/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"

namespace ascore::metrics {

QwkResult qwk_detailed(std::span<const int> a, std::span<const int> b,
                       int min_score, int max_score) {
  if (a.size() != b.size()) throw MetricError("qwk: length mismatch");
  if (a.empty()) throw MetricError("qwk: empty rating vectors");
  if (min_score > max_score) throw MetricError("qwk: empty score range");
  const int r = max_score - min_score + 1;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < min_score || a[i] > max_score || b[i] < min_score ||
        b[i] > max_score) {
      throw MetricError("qwk: rating outside [" + std::to_string(min_score) +
                        ", " + std::to_string(max_score) + "]");
    }
  }

  std::vector<double> observed(static_cast<std::size_t>(r * r), 0.0);
  std::vector<double> row(static_cast<std::size_t>(r), 0.0);
  std::vector<double> col(static_cast<std::size_t>(r), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int x = a[i] - min_score;
    const int y = b[i] - min_score;
    observed[static_cast<std::size_t>(x * r + y)] += 1.0;
    row[static_cast<std::size_t>(x)] += 1.0;
    col[static_cast<std::size_t>(y)] += 1.0;
  }
  const double total = static_cast<double>(a.size());
  const double scale = r > 1 ? static_cast<double>((r - 1) * (r - 1)) : 1.0;
  double num = 0.0;
  double den = 0.0;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < r; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / scale;
      const auto ij = static_cast<std::size_t>(i * r + j);
      num += w * observed[ij];
      den += w * row[static_cast<std::size_t>(i)] *
             col[static_cast<std::size_t>(j)] / total;
    }
  }
  if (den == 0.0) return {1.0, true};
  return {1.0 - num / den, false};
}

double qwk(std::span<const int> a, std::span<const int> b, int min_score,
           int max_score) {
  return qwk_detailed(a, b, min_score, max_score).value;
}

std::string to_string(Distance d) {
  switch (d) {
    case Distance::nominal: return "nominal";
    case Distance::ordinal: return "ordinal";
    case Distance::interval: return "interval";
  }
  return "interval";
}

Distance distance_from_string(const std::string& s) {
  if (s == "nominal") return Distance::nominal;
  if (s == "ordinal") return Distance::ordinal;
  if (s == "interval") return Distance::interval;
  throw UsageError("unknown distance '" + s + "'");
}

RatingsTable RatingsTable::select_units(
    std::span<const std::size_t> indices) const {
  RatingsTable out;
  out.raters = raters;
  out.units.reserve(indices.size());
  out.values.reserve(indices.size());
  for (std::size_t idx : indices) {
    out.units.push_back(units.at(idx));
    out.values.push_back(values.at(idx));
  }
  return out;
}

double krippendorff_alpha(const RatingsTable& table, Distance distance) {
  // Distinct values in ascending order index the coincidence matrix.
  std::vector<int> labels;
  for (const auto& unit : table.values) {
    for (const auto& v : unit) {
      if (v) labels.push_back(*v);
    }
  }
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  const std::size_t v = labels.size();
  auto index_of = [&](int label) {
    return static_cast<std::size_t>(
        std::lower_bound(labels.begin(), labels.end(), label) - labels.begin());
  };

  std::vector<double> coincidence(v * v, 0.0);
  for (const auto& unit : table.values) {
    std::vector<std::size_t> present;
    for (const auto& value : unit) {
      if (value) present.push_back(index_of(*value));
    }
    const std::size_t m = present.size();
    if (m < 2) continue;
    const double inv = 1.0 / static_cast<double>(m - 1);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (i != j) coincidence[present[i] * v + present[j]] += inv;
      }
    }
  }

  std::vector<double> marginal(v, 0.0);
  double n = 0.0;
  for (std::size_t c = 0; c < v; ++c) {
    for (std::size_t k = 0; k < v; ++k) marginal[c] += coincidence[c * v + k];
    n += marginal[c];
  }
  if (n < 2.0) {
    throw MetricError("krippendorff alpha undefined: fewer than two pairable values");
  }

  auto delta2 = [&](std::size_t c, std::size_t k) -> double {
    switch (distance) {
      case Distance::nominal:
        return c == k ? 0.0 : 1.0;
      case Distance::interval: {
        const double d = static_cast<double>(labels[c]) - labels[k];
        return d * d;
      }
      case Distance::ordinal: {
        const std::size_t lo = std::min(c, k);
        const std::size_t hi = std::max(c, k);
        double s = 0.0;
        for (std::size_t g = lo; g <= hi; ++g) s += marginal[g];
        s -= (marginal[c] + marginal[k]) / 2.0;
        return s * s;
      }
    }
    return 0.0;
  };

  double d_obs = 0.0;
  double d_exp = 0.0;
  for (std::size_t c = 0; c < v; ++c) {
    for (std::size_t k = 0; k < v; ++k) {
      const double d2 = delta2(c, k);
      d_obs += coincidence[c * v + k] * d2;
      d_exp += marginal[c] * marginal[k] * d2;
    }
  }
  d_obs /= n;
  d_exp /= n * (n - 1.0);
  if (d_exp == 0.0) return 1.0;
  return 1.0 - d_obs / d_exp;
}

F1Result classwise_f1_detailed(std::span<const int> pred,
                               std::span<const int> gold, int label) {
  if (pred.size() != gold.size()) throw MetricError("f1: length mismatch");
  double tp = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == label;
    const bool g = gold[i] == label;
    if (p && g) tp += 1.0;
    else if (p) fp += 1.0;
    else if (g) fn += 1.0;
  }
  F1Result r;
  r.degenerate = tp + fp + fn == 0.0;
  r.precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  r.recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

double classwise_f1(std::span<const int> pred, std::span<const int> gold,
                    int label) {
  return classwise_f1_detailed(pred, gold, label).f1;
}

nlohmann::json to_json(const IntervalEstimate& e) {
  return {{"point", e.point},
          {"lo", e.lo},
          {"hi", e.hi},
          {"confidence", e.confidence},
          {"replicates", e.replicates}};
}

namespace {

// Linear interpolation between order statistics (Hyndman-Fan type 7).
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

bool all_equal(std::span<const double> w) {
  return std::adjacent_find(w.begin(), w.end(), std::not_equal_to<>()) ==
         w.end();
}

}  // namespace

IntervalEstimate bootstrap_ci(const ResampleMetric& metric, std::size_t n,
                              std::span<const double> weights,
                              const BootstrapOptions& options) {
  if (n == 0) throw MetricError("bootstrap: empty sample");
  if (options.replicates < 1) throw MetricError("bootstrap: replicates < 1");
  if (!(options.confidence > 0.0 && options.confidence < 1.0)) {
    throw MetricError("bootstrap: confidence must lie in (0, 1)");
  }
  const bool uniform = weights.empty() || all_equal(weights);
  std::vector<double> cumulative;
  if (!weights.empty()) {
    if (weights.size() != n) throw MetricError("bootstrap: weights length != n");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw MetricError("bootstrap: weights must be finite and non-negative");
      }
      total += w;
    }
    if (!(total > 0.0)) throw MetricError("bootstrap: weights sum to zero");
    if (!uniform) {
      cumulative.resize(n);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += weights[i];
        cumulative[i] = acc / total;
      }
    }
  }

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto point = metric(all);
  if (!point) throw MetricError("bootstrap: metric undefined on the full sample");

  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(options.replicates));
  std::vector<std::size_t> idx(n);
  for (int rep = 0; rep < options.replicates; ++rep) {
    Rng rng = Rng::substream(options.seed, static_cast<std::uint64_t>(rep));
    std::optional<double> value;
    for (int attempt = 0; attempt <= options.max_redraws && !value; ++attempt) {
      for (std::size_t i = 0; i < n; ++i) {
        if (uniform) {
          idx[i] = static_cast<std::size_t>(rng.uniform_index(n));
        } else {
          const double u = rng.uniform01();
          auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
          idx[i] = std::min(static_cast<std::size_t>(it - cumulative.begin()),
                            n - 1);
        }
      }
      value = metric(idx);
    }
    if (!value) {
      throw MetricError("bootstrap: metric undefined after " +
                        std::to_string(options.max_redraws) + " redraws");
    }
    values.push_back(*value);
  }
  std::sort(values.begin(), values.end());
  const double alpha = 1.0 - options.confidence;
  IntervalEstimate est;
  est.point = *point;
  est.lo = quantile_sorted(values, alpha / 2.0);
  est.hi = quantile_sorted(values, 1.0 - alpha / 2.0);
  est.confidence = options.confidence;
  est.replicates = options.replicates;
  return est;
}

std::map<int, double> label_distribution(std::span<const int> labels,
                                         std::span<const double> weights) {
  if (!weights.empty() && weights.size() != labels.size()) {
    throw MetricError("label_distribution: weights length mismatch");
  }
  std::map<int, double> mass;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    mass[labels[i]] += w;
    total += w;
  }
  if (total > 0.0) {
    for (auto& [label, m] : mass) m /= total;
  }
  return mass;
}

std::vector<int> majority_vote(const std::vector<std::vector<int>>& labels,
                               std::uint64_t seed) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (std::size_t u = 0; u < labels.size(); ++u) {
    if (labels[u].empty()) {
      throw MetricError("majority_vote: unit " + std::to_string(u) +
                        " has no labels");
    }
    std::map<int, int> counts;
    for (int l : labels[u]) ++counts[l];
    int best = 0;
    for (const auto& [l, c] : counts) best = std::max(best, c);
    std::vector<int> tied;
    for (const auto& [l, c] : counts) {
      if (c == best) tied.push_back(l);
    }
    if (tied.size() == 1) {
      out.push_back(tied.front());
    } else {
      Rng rng = Rng::substream(seed, u);
      out.push_back(tied[static_cast<std::size_t>(rng.uniform_index(tied.size()))]);
    }
  }
  return out;
}

namespace {

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> deltas,
                                    WilcoxonMethod method) {
  std::vector<double> nz;
  for (double d : deltas) {
    if (!std::isfinite(d)) throw MetricError("wilcoxon: non-finite delta");
    if (d != 0.0) nz.push_back(d);
  }
  if (nz.empty()) throw MetricError("wilcoxon: all deltas are zero");
  const std::size_t n = nz.size();

  // Average ranks of |d|, stored doubled so that tied ranks stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::fabs(nz[a]) < std::fabs(nz[b]);
  });
  std::vector<long long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(nz[order[j + 1]]) == std::fabs(nz[order[i]])) ++j;
    const auto twice_avg = static_cast<long long>(i + 1 + j + 1);  // 2 * mean rank
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = twice_avg;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long long w2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (nz[i] > 0.0) w2 += rank2[i];
  }

  WilcoxonResult res;
  res.n = static_cast<int>(n);
  res.w_plus = static_cast<double>(w2) / 2.0;
  const bool exact = method == WilcoxonMethod::exact ||
                     (method == WilcoxonMethod::automatic && n <= 25);
  res.exact = exact;
  const double nd = static_cast<double>(n);

  if (exact) {
    // Count sign assignments by (doubled) W+ with a subset-sum table.
    long long total2 = 0;
    for (long long r : rank2) total2 += r;
    std::vector<double> ways(static_cast<std::size_t>(total2) + 1, 0.0);
    ways[0] = 1.0;
    long long reach = 0;
    for (long long r : rank2) {
      for (long long s = reach; s >= 0; --s) {
        if (ways[static_cast<std::size_t>(s)] != 0.0) {
          ways[static_cast<std::size_t>(s + r)] += ways[static_cast<std::size_t>(s)];
        }
      }
      reach += r;
    }
    const double all = std::ldexp(1.0, static_cast<int>(n));
    double le = 0.0;
    double ge = 0.0;
    for (long long s = 0; s <= total2; ++s) {
      const double c = ways[static_cast<std::size_t>(s)];
      if (s <= w2) le += c;
      if (s >= w2) ge += c;
    }
    res.p_value = std::min(1.0, 2.0 * std::min(le, ge) / all);
    return res;
  }

  const double mean = nd * (nd + 1.0) / 4.0;
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
  if (!(var > 0.0)) {
    res.p_value = 1.0;
    return res;
  }
  const double diff = std::fabs(res.w_plus - mean);
  const double z = std::max(0.0, diff - 0.5) / std::sqrt(var);
  res.p_value = std::min(1.0, 2.0 * normal_sf(z));
  return res;
}

}  // namespace ascore::metrics
