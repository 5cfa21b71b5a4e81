#include "ascore/ordinal_scorer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "ascore/errors.hpp"
#include "ascore/metrics.hpp"
#include "ascore/util.hpp"

namespace ascore::ordinal {

namespace {

double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_dims(const OrdinalModel& model, const FeatureVector& features) {
  if (features.k() != model.k) {
    throw UsageError("feature vector of " + features.response_id + " has " +
                     std::to_string(features.k()) + " labels, model expects " +
                     std::to_string(model.k));
  }
}

int category_of(const Example& ex, int offset, int K) {
  const int y = ex.gold_score - offset;
  if (y < 0 || y >= K) {
    throw UsageError("gold score " + std::to_string(ex.gold_score) + " of " +
                     ex.features.response_id + " is outside the model's range");
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Minimized {
  std::vector<double> x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Limited-memory BFGS with Armijo backtracking; falls back to steepest
// descent whenever the quasi-Newton direction fails to make progress.
Minimized minimize(const Objective& obj, std::vector<double> x, int max_iterations,
                   double tolerance) {
  constexpr std::size_t kMemory = 10;
  constexpr double kArmijo = 1e-4;
  const std::size_t n = x.size();

  std::vector<double> g(n), g_new(n), d(n), x_new(n);
  double f = obj.evaluate(x, g);
  if (!std::isfinite(f)) throw TrainingError("objective is not finite at the starting point");

  std::deque<std::pair<std::vector<double>, std::vector<double>>> memory;  // (s, y)
  Minimized out;
  int it = 0;
  for (; it < max_iterations; ++it) {
    const double gnorm = std::sqrt(dot(g, g));
    if (gnorm < tolerance) {
      out.converged = true;
      break;
    }

    // Two-loop recursion.
    d = g;
    std::vector<double> alpha(memory.size());
    for (std::size_t m = memory.size(); m-- > 0;) {
      const auto& [s, y] = memory[m];
      alpha[m] = dot(s, d) / dot(y, s);
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[m] * y[i];
    }
    if (!memory.empty()) {
      const auto& [s, y] = memory.back();
      const double gamma = dot(s, y) / dot(y, y);
      for (auto& v : d) v *= gamma;
    }
    for (std::size_t m = 0; m < memory.size(); ++m) {
      const auto& [s, y] = memory[m];
      const double beta = dot(y, d) / dot(y, s);
      for (std::size_t i = 0; i < n; ++i) d[i] += s[i] * (alpha[m] - beta);
    }
    for (auto& v : d) v = -v;

    double slope = dot(g, d);
    if (!(slope < 0)) {
      memory.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      slope = -gnorm * gnorm;
    }

    double step = memory.empty() ? std::min(1.0, 1.0 / gnorm) : 1.0;
    double f_new = 0.0;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] + step * d[i];
      f_new = obj.evaluate(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + kArmijo * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!memory.empty()) {
        memory.clear();
        continue;
      }
      break;  // no descent possible at this precision
    }

    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - x[i];
      y[i] = g_new[i] - g[i];
    }
    if (dot(s, y) > 1e-12) {
      memory.emplace_back(std::move(s), std::move(y));
      if (memory.size() > kMemory) memory.pop_front();
    }
    x.swap(x_new);
    g.swap(g_new);
    f = f_new;
  }
  if (!std::isfinite(f)) throw TrainingError("objective became non-finite");
  out.x = std::move(x);
  out.value = f;
  out.iterations = it;
  return out;
}

std::vector<int> predictions(const OrdinalModel& model, std::span<const Example> set) {
  std::vector<int> out;
  out.reserve(set.size());
  for (const auto& ex : set) out.push_back(predict(model, ex.features));
  return out;
}

std::vector<int> golds(std::span<const Example> set) {
  std::vector<int> out;
  out.reserve(set.size());
  for (const auto& ex : set) out.push_back(ex.gold_score);
  return out;
}

}  // namespace

void OrdinalModel::validate() const {
  if (num_categories < 2) throw UsageError("model needs at least two categories");
  if (weights.size() != k) throw UsageError("model weights do not match k");
  if (thresholds.size() != static_cast<std::size_t>(num_categories - 1)) {
    throw UsageError("model needs K - 1 thresholds");
  }
  for (const auto& row : weights) {
    for (double w : row) {
      if (!std::isfinite(w)) throw UsageError("model weight is not finite");
    }
  }
  for (std::size_t j = 0; j < thresholds.size(); ++j) {
    if (!std::isfinite(thresholds[j])) throw UsageError("model threshold is not finite");
    if (j > 0 && !(thresholds[j - 1] < thresholds[j])) {
      throw UsageError("model thresholds are not strictly increasing");
    }
  }
}

double eta(const OrdinalModel& model, const FeatureVector& features) {
  check_dims(model, features);
  double s = 0.0;
  for (std::size_t i = 0; i < model.k; ++i) {
    s += model.weights[i][static_cast<std::size_t>(featurizer::to_int(features.labels[i]))];
  }
  return s;
}

double eta_dot(const OrdinalModel& model, const FeatureVector& features) {
  check_dims(model, features);
  const auto bits = features.one_hot();
  double s = 0.0;
  for (std::size_t b = 0; b < bits.size(); ++b) {
    s += model.weights[b / 3][b % 3] * static_cast<double>(bits[b]);
  }
  return s;
}

int category_index(const OrdinalModel& model, double eta) {
  return static_cast<int>(
      std::upper_bound(model.thresholds.begin(), model.thresholds.end(), eta) -
      model.thresholds.begin());
}

int predict_from_eta(const OrdinalModel& model, double eta) {
  return model.category_offset + category_index(model, eta);
}

int predict(const OrdinalModel& model, const FeatureVector& features) {
  return predict_from_eta(model, eta(model, features));
}

double sample_loss(std::span<const double> thresholds, int y, double eta) {
  const int K = static_cast<int>(thresholds.size()) + 1;
  double loss = 0.0;
  if (y > 0) loss += softplus(thresholds[static_cast<std::size_t>(y - 1)] - eta);
  if (y < K - 1) loss += softplus(eta - thresholds[static_cast<std::size_t>(y)]);
  return loss;
}

double it_loss(const OrdinalModel& model, std::span<const Example> batch) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : batch) {
    const int y = category_of(ex, model.category_offset, model.num_categories);
    total += sample_loss(model.thresholds, y, eta(model, ex.features));
  }
  return total / static_cast<double>(batch.size());
}

std::vector<double> thresholds_from_free(std::span<const double> u) {
  std::vector<double> t(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) {
    t[j] = j == 0 ? u[0] : t[j - 1] + kThresholdGap + softplus(u[j]);
  }
  return t;
}

std::vector<double> free_from_thresholds(std::span<const double> thresholds) {
  std::vector<double> u(thresholds.size());
  for (std::size_t j = 0; j < thresholds.size(); ++j) {
    if (j == 0) {
      u[0] = thresholds[0];
      continue;
    }
    const double gap = thresholds[j] - thresholds[j - 1] - kThresholdGap;
    if (!(gap > 0)) throw UsageError("thresholds are too close to reparameterize");
    // inverse softplus
    u[j] = gap > 30 ? gap : std::log(std::expm1(gap));
  }
  return u;
}

Objective::Objective(std::span<const Example> batch, std::size_t k, int num_categories,
                     int category_offset, double lambda)
    : k_(k), K_(num_categories), lambda_(lambda) {
  labels_.reserve(batch.size());
  y_.reserve(batch.size());
  for (const auto& ex : batch) {
    if (ex.features.k() != k) {
      throw UsageError("feature vector of " + ex.features.response_id +
                       " does not have " + std::to_string(k) + " labels");
    }
    std::vector<std::uint8_t> row(k);
    for (std::size_t i = 0; i < k; ++i) {
      row[i] = static_cast<std::uint8_t>(featurizer::to_int(ex.features.labels[i]));
    }
    labels_.push_back(std::move(row));
    y_.push_back(category_of(ex, category_offset, K_));
  }
}

double Objective::evaluate(std::span<const double> x, std::span<double> grad) const {
  const std::size_t nw = k_ * 3;
  const std::size_t nt = static_cast<std::size_t>(K_ - 1);
  const auto u = x.subspan(nw, nt);
  const auto theta = thresholds_from_free(u);
  const bool want_grad = !grad.empty();
  std::vector<double> dtheta(nt, 0.0);
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);

  const double inv_n = labels_.empty() ? 0.0 : 1.0 / static_cast<double>(labels_.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < labels_.size(); ++r) {
    const auto& row = labels_[r];
    double e = 0.0;
    for (std::size_t i = 0; i < k_; ++i) e += x[i * 3 + row[i]];
    const int y = y_[r];
    loss += sample_loss(theta, y, e);
    if (!want_grad) continue;
    double d_eta = 0.0;
    if (y > 0) {
      const double s = sigmoid(theta[static_cast<std::size_t>(y - 1)] - e);
      d_eta -= s;
      dtheta[static_cast<std::size_t>(y - 1)] += s * inv_n;
    }
    if (y < K_ - 1) {
      const double s = sigmoid(e - theta[static_cast<std::size_t>(y)]);
      d_eta += s;
      dtheta[static_cast<std::size_t>(y)] -= s * inv_n;
    }
    d_eta *= inv_n;
    for (std::size_t i = 0; i < k_; ++i) grad[i * 3 + row[i]] += d_eta;
  }

  double reg = 0.0;
  for (std::size_t i = 0; i < nw; ++i) {
    reg += x[i] * x[i];
    if (want_grad) grad[i] += 2.0 * lambda_ * x[i];
  }
  if (want_grad && nt > 0) {
    // theta_j depends on u_1 with slope 1 and on u_m (m >= 2, j >= m) with
    // slope sigmoid(u_m).
    double suffix = 0.0;
    for (std::size_t m = nt; m-- > 0;) {
      suffix += dtheta[m];
      grad[nw + m] = m == 0 ? suffix : sigmoid(u[m]) * suffix;
    }
  }
  return loss * inv_n + lambda_ * reg;
}

void TrainConfig::validate() const {
  if (lambda_grid.empty()) throw UsageError("lambda grid is empty");
  for (double l : lambda_grid) {
    if (!(l >= 0) || !std::isfinite(l)) throw UsageError("lambda values must be finite and >= 0");
  }
  if (!(gradient_tolerance > 0)) throw UsageError("gradient tolerance must be positive");
  if (max_iterations < 1) throw UsageError("max_iterations must be positive");
}

TrainResult train(const ModelSpec& spec, std::span<const Example> train_set,
                  std::span<const Example> valid_set, const TrainConfig& config) {
  config.validate();
  const int K = spec.score_max - spec.score_min + 1;
  if (K < 2) throw UsageError("score range needs at least two categories");
  if (train_set.empty()) throw TrainingError("training set is empty");
  if (train_set.size() < static_cast<std::size_t>(K)) {
    throw TrainingError("training set has " + std::to_string(train_set.size()) +
                        " rows, fewer than the " + std::to_string(K) + " categories");
  }

  TrainResult result;
  std::vector<int> seen(static_cast<std::size_t>(K), 0);
  for (const auto& ex : train_set) {
    ++seen[static_cast<std::size_t>(category_of(ex, spec.score_min, K))];
  }
  for (int c = 0; c < K; ++c) {
    if (seen[static_cast<std::size_t>(c)] == 0) {
      result.warnings.push_back("score " + std::to_string(spec.score_min + c) +
                                " does not occur in the training data");
    }
  }

  const std::size_t nw = spec.k * 3;
  std::vector<double> x0(nw + static_cast<std::size_t>(K - 1));
  Rng rng(config.seed);
  for (std::size_t i = 0; i < nw; ++i) x0[i] = (rng.uniform01() - 0.5) * 0.02;
  {
    std::vector<double> theta(static_cast<std::size_t>(K - 1));
    for (int j = 1; j < K; ++j) {
      theta[static_cast<std::size_t>(j - 1)] = j - K / 2.0;
    }
    const auto u = free_from_thresholds(theta);
    std::copy(u.begin(), u.end(), x0.begin() + static_cast<std::ptrdiff_t>(nw));
  }

  const bool use_valid = !valid_set.empty();
  const auto train_gold = golds(train_set);
  const auto valid_gold = golds(valid_set);
  bool have_best = false;
  double best_score = 0.0;

  for (double lambda : config.lambda_grid) {
    const Objective obj(train_set, spec.k, K, spec.score_min, lambda);
    const auto fit = minimize(obj, x0, config.max_iterations, config.gradient_tolerance);

    OrdinalModel model;
    model.item_id = spec.item_id;
    model.component_set_digest = spec.component_set_digest;
    model.k = spec.k;
    model.num_categories = K;
    model.category_offset = spec.score_min;
    model.lambda = lambda;
    model.weights.resize(spec.k);
    for (std::size_t i = 0; i < spec.k; ++i) {
      for (std::size_t l = 0; l < 3; ++l) model.weights[i][l] = fit.x[i * 3 + l];
    }
    model.thresholds = thresholds_from_free(std::span(fit.x).subspan(nw));
    model.training_meta = {config.seed, fit.iterations, fit.converged, fit.value};
    try {
      model.validate();
    } catch (const UsageError& e) {
      throw TrainingError(std::string("training produced an invalid model: ") + e.what());
    }

    LambdaScore score;
    score.lambda = lambda;
    score.meta = model.training_meta;
    score.train_qwk = metrics::qwk(predictions(model, train_set), train_gold,
                                   spec.score_min, spec.score_max);
    score.valid_qwk = use_valid ? metrics::qwk(predictions(model, valid_set), valid_gold,
                                               spec.score_min, spec.score_max)
                                : score.train_qwk;
    result.grid.push_back(score);

    const bool better = !have_best || score.valid_qwk > best_score ||
                        (score.valid_qwk == best_score && lambda < result.model.lambda);
    if (better) {
      have_best = true;
      best_score = score.valid_qwk;
      result.model = std::move(model);
    }
  }
  return result;
}

std::vector<Contribution> contribution_table(const OrdinalModel& model,
                                             const FeatureVector& features) {
  check_dims(model, features);
  std::vector<Contribution> rows;
  rows.reserve(model.k);
  for (std::size_t i = 0; i < model.k; ++i) {
    const Label l = features.labels[i];
    rows.push_back({i, l, model.weights[i][static_cast<std::size_t>(featurizer::to_int(l))]});
  }
  return rows;
}

nlohmann::json to_json(const OrdinalModel& model) {
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& row : model.weights) weights.push_back({row[0], row[1], row[2]});
  return {{"item_id", model.item_id},
          {"component_set_digest", model.component_set_digest},
          {"k", model.k},
          {"K", model.num_categories},
          {"category_offset", model.category_offset},
          {"weights", weights},
          {"thresholds", model.thresholds},
          {"lambda", model.lambda},
          {"training_meta",
           {{"seed", model.training_meta.seed},
            {"iterations", model.training_meta.iterations},
            {"converged", model.training_meta.converged},
            {"final_loss", model.training_meta.final_loss}}}};
}

OrdinalModel model_from_json(const nlohmann::json& j) {
  try {
    OrdinalModel m;
    m.item_id = j.at("item_id").get<std::string>();
    m.component_set_digest = j.at("component_set_digest").get<std::string>();
    m.k = j.at("k").get<std::size_t>();
    m.num_categories = j.at("K").get<int>();
    m.category_offset = j.at("category_offset").get<int>();
    for (const auto& row : j.at("weights")) {
      if (row.size() != 3) throw UsageError("model weight rows need three entries");
      m.weights.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
    }
    m.thresholds = j.at("thresholds").get<std::vector<double>>();
    m.lambda = j.at("lambda").get<double>();
    const auto& meta = j.at("training_meta");
    m.training_meta.seed = meta.at("seed").get<std::uint64_t>();
    m.training_meta.iterations = meta.at("iterations").get<int>();
    m.training_meta.converged = meta.at("converged").get<bool>();
    m.training_meta.final_loss = meta.at("final_loss").get<double>();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed model JSON: ") + e.what());
  }
}

OrdinalModel load_model(const std::filesystem::path& path) {
  try {
    return model_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_model(const std::filesystem::path& path, const OrdinalModel& model) {
  write_text_file_atomic(path, to_json(model).dump(2) + "\n");
}

}  // namespace ascore::ordinal
