#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance gate.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "ascore/explanation.hpp"
#include "ascore/metrics.hpp"
#include "ascore/ordinal_scorer.hpp"
#include "ascore/util.hpp"

namespace oracle {

using ascore::featurizer::FeatureVector;
using ascore::featurizer::Label;
using ascore::ordinal::OrdinalModel;

// Pairwise form of QWK: observed squared disagreement over the mean squared
// disagreement of all cross pairs. Equal to the confusion-matrix formula but
// shares no code with it.
inline double qwk_pairwise(const std::vector<int>& a, const std::vector<int>& b) {
  const double n = static_cast<double>(a.size());
  double observed = 0, expected = 0;
  for (std::size_t i = 0; i < a.size(); ++i) observed += (a[i] - b[i]) * (a[i] - b[i]);
  for (int x : a)
    for (int y : b) expected += (x - y) * (x - y);
  expected /= n;
  if (observed == 0 && expected == 0) return 1.0;
  return 1.0 - observed / expected;
}

inline double rank_of(const std::vector<double>& mags, double m) {
  double less = 0, equal = 0;
  for (double x : mags) {
    less += x < m;
    equal += x == m;
  }
  return less + (equal + 1) / 2;
}

// Exact two-sided p by listing all 2^n sign patterns.
inline double wilcoxon_enumerated(const std::vector<double>& deltas) {
  std::vector<double> nz;
  for (double d : deltas)
    if (d != 0) nz.push_back(d);
  std::vector<double> mags;
  for (double d : nz) mags.push_back(std::abs(d));
  std::vector<double> ranks;
  for (double m : mags) ranks.push_back(rank_of(mags, m));
  double w = 0;
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] > 0) w += ranks[i];
  const std::size_t n = nz.size();
  double le = 0, ge = 0;
  const double total = std::ldexp(1.0, static_cast<int>(n));
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) s += ranks[i];
    le += s <= w + 1e-9;
    ge += s >= w - 1e-9;
  }
  return std::min(1.0, 2 * std::min(le, ge) / total);
}

/// Four observers, twelve units, blanks missing (Krippendorff 2011). Alpha is
/// 0.7434210526 nominal, 0.8153875038 ordinal, 0.8491071429 interval.
inline ascore::metrics::RatingsTable krippendorff_textbook() {
  const int rows[4][12] = {{1, 2, 3, 3, 2, 1, 4, 1, 2, 0, 0, 0},
                           {1, 2, 3, 3, 2, 2, 4, 1, 2, 5, 0, 3},
                           {0, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, 0},
                           {1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, 0}};
  ascore::metrics::RatingsTable t;
  t.raters = {"A", "B", "C", "D"};
  for (int u = 0; u < 12; ++u) {
    t.units.push_back("u" + std::to_string(u + 1));
    std::vector<std::optional<int>> row;
    for (const auto& r : rows) row.push_back(r[u] == 0 ? std::nullopt : std::optional<int>(r[u]));
    t.values.push_back(std::move(row));
  }
  return t;
}

struct Vote {
  int label = 0;
  int used = 0;
};

/// Shortest prefix in which some label occurs three times.
inline std::optional<Vote> first_to_three(const std::vector<int>& seq) {
  for (std::size_t len = 1; len <= seq.size(); ++len) {
    for (int label = 0; label < 3; ++label) {
      if (std::count(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(len), label) == 3) {
        return Vote{label, static_cast<int>(len)};
      }
    }
  }
  return std::nullopt;
}

/// Every sequence over {0,1,2} of the given length, lexicographic.
inline std::vector<std::vector<int>> all_sequences(int length) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(length), 0);
  while (true) {
    out.push_back(cur);
    int pos = length - 1;
    while (pos >= 0 && cur[static_cast<std::size_t>(pos)] == 2) cur[static_cast<std::size_t>(pos--)] = 0;
    if (pos < 0) break;
    ++cur[static_cast<std::size_t>(pos)];
  }
  return out;
}

/// Central-difference gradient.
inline std::vector<double> numeric_gradient(const ascore::ordinal::Objective& obj,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = obj.evaluate(x, {});
    x[i] = keep - h;
    const double down = obj.evaluate(x, {});
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// |analytic - numeric| / max(|analytic| + |numeric|, 1e-8), in the 2-norm.
inline double gradient_relative_error(const ascore::ordinal::Objective& obj,
                                      const std::vector<double>& x) {
  std::vector<double> analytic(x.size());
  obj.evaluate(x, analytic);
  const auto numeric = numeric_gradient(obj, x);
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-8);
}

inline FeatureVector random_features(ascore::Rng& rng, std::size_t k, const std::string& id) {
  FeatureVector fv;
  fv.response_id = id;
  for (std::size_t i = 0; i < k; ++i) {
    fv.labels.push_back(ascore::featurizer::label_from_int(static_cast<int>(rng.uniform_index(3))));
  }
  return fv;
}

inline OrdinalModel random_model(ascore::Rng& rng, std::size_t k, int K) {
  OrdinalModel m;
  m.item_id = "synthetic";
  m.component_set_digest = "none";
  m.k = k;
  m.num_categories = K;
  for (std::size_t i = 0; i < k; ++i) m.weights.push_back({rng.normal(), rng.normal(), rng.normal()});
  double t = -1.0 - rng.uniform01();
  for (int j = 0; j < K - 1; ++j) {
    m.thresholds.push_back(t);
    t += 0.2 + 1.5 * rng.uniform01();
  }
  return m;
}

struct PlantedCorpus {
  OrdinalModel planted;
  std::vector<ascore::ordinal::Example> train, valid, test;
};

/// Labels drawn uniformly; scores follow the planted model's staircase of
/// eta plus Gaussian noise. Thresholds sit at eta quantiles so every
/// category is populated.
inline PlantedCorpus planted_corpus(std::uint64_t seed, std::size_t k, int K, std::size_t n,
                                    double noise_fraction) {
  ascore::Rng rng(seed);
  PlantedCorpus c;
  c.planted = random_model(rng, k, K);
  std::vector<FeatureVector> rows;
  std::vector<double> etas;
  for (std::size_t r = 0; r < n; ++r) {
    rows.push_back(random_features(rng, k, "s" + std::to_string(r)));
    etas.push_back(ascore::ordinal::eta(c.planted, rows.back()));
  }
  auto sorted = etas;
  std::sort(sorted.begin(), sorted.end());
  c.planted.thresholds.clear();
  for (int j = 1; j < K; ++j) {
    c.planted.thresholds.push_back(sorted[static_cast<std::size_t>(j) * n / static_cast<std::size_t>(K)]);
  }
  double mean = 0, var = 0;
  for (double e : etas) mean += e / static_cast<double>(n);
  for (double e : etas) var += (e - mean) * (e - mean) / static_cast<double>(n);
  const double sd = std::sqrt(var);
  for (std::size_t r = 0; r < n; ++r) {
    const double noisy = etas[r] + noise_fraction * sd * rng.normal();
    ascore::ordinal::Example ex{rows[r], ascore::ordinal::predict_from_eta(c.planted, noisy)};
    const double u = static_cast<double>(r) / static_cast<double>(n);
    (u < 0.6 ? c.train : u < 0.8 ? c.valid : c.test).push_back(std::move(ex));
  }
  return c;
}

/// All single-label edits that change the predicted score, found by
/// rescoring each edited vector with predict().
inline std::vector<ascore::explanation::Counterfactual> enumerate_counterfactuals(
    const OrdinalModel& model, const ascore::extraction::ComponentSet& components,
    const FeatureVector& features) {
  std::vector<ascore::explanation::Counterfactual> out;
  const int base = ascore::ordinal::predict(model, features);
  for (std::size_t i = 0; i < features.k(); ++i) {
    for (int l = 0; l < 3; ++l) {
      if (l == ascore::featurizer::to_int(features.labels[i])) continue;
      FeatureVector edited = features;
      edited.labels[i] = ascore::featurizer::label_from_int(l);
      const int score = ascore::ordinal::predict(model, edited);
      if (score != base) {
        out.push_back({components.components[i].id, edited.labels[i],
                       ascore::ordinal::eta(model, edited), score, true});
      }
    }
  }
  return out;
}

}  // namespace oracle
