#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ascore/featurizer.hpp"

namespace ascore::ordinal {

using featurizer::FeatureVector;
using featurizer::Label;

struct TrainingMeta {
  std::uint64_t seed = 0;
  int iterations = 0;
  bool converged = false;
  double final_loss = 0.0;

  bool operator==(const TrainingMeta&) const = default;
};

struct OrdinalModel {
  std::string item_id;
  std::string component_set_digest;
  std::size_t k = 0;
  int num_categories = 2;  // K
  std::vector<std::array<double, 3>> weights;  // weights[i][label]
  std::vector<double> thresholds;              // K - 1, strictly increasing
  int category_offset = 0;                     // score of category 0
  double lambda = 0.0;
  TrainingMeta training_meta;

  int score_min() const { return category_offset; }
  int score_max() const { return category_offset + num_categories - 1; }
  /// Throws UsageError on broken shape, ordering or non-finite values.
  void validate() const;

  bool operator==(const OrdinalModel&) const = default;
};

/// Sum of w[i][labels[i]], accumulated in component order.
double eta(const OrdinalModel& model, const FeatureVector& features);
/// Same quantity as a dot product of the flattened weights with one_hot().
double eta_dot(const OrdinalModel& model, const FeatureVector& features);

/// Number of thresholds at or below eta, so theta_j <= eta < theta_{j+1}.
int category_index(const OrdinalModel& model, double eta);
int predict_from_eta(const OrdinalModel& model, double eta);
int predict(const OrdinalModel& model, const FeatureVector& features);

struct Example {
  FeatureVector features;
  int gold_score = 0;
};

/// Immediate-threshold logistic loss of one sample with 0-based category y.
double sample_loss(std::span<const double> thresholds, int y, double eta);

/// Mean immediate-threshold loss over the batch (no regularization).
double it_loss(const OrdinalModel& model, std::span<const Example> batch);

inline constexpr double kThresholdGap = 1e-4;

/// theta_1 = u_1, theta_{j+1} = theta_j + gap + softplus(u_{j+1}).
std::vector<double> thresholds_from_free(std::span<const double> u);
/// Inverse of thresholds_from_free; throws UsageError unless consecutive
/// thresholds are more than the gap apart.
std::vector<double> free_from_thresholds(std::span<const double> thresholds);

/// Training objective over the flat parameter vector x = (w row-major k x 3,
/// u of length K - 1): mean loss plus lambda * |w|^2.
class Objective {
 public:
  Objective(std::span<const Example> batch, std::size_t k, int num_categories,
            int category_offset, double lambda);

  std::size_t dimension() const { return k_ * 3 + static_cast<std::size_t>(K_ - 1); }
  /// Value at x; writes the gradient when grad is non-empty.
  double evaluate(std::span<const double> x, std::span<double> grad) const;

 private:
  std::vector<std::vector<std::uint8_t>> labels_;
  std::vector<int> y_;
  std::size_t k_;
  int K_;
  double lambda_;
};

struct TrainConfig {
  std::vector<double> lambda_grid = {0.0, 0.001, 0.01, 0.1, 1.0};
  int max_iterations = 5000;
  double gradient_tolerance = 1e-6;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LambdaScore {
  double lambda = 0.0;
  double train_qwk = 0.0;
  double valid_qwk = 0.0;  // train QWK when there is no validation data
  TrainingMeta meta;
};

struct TrainResult {
  OrdinalModel model;
  std::vector<LambdaScore> grid;
  std::vector<std::string> warnings;
};

struct ModelSpec {
  std::string item_id;
  std::string component_set_digest;
  std::size_t k = 0;
  int score_min = 0;
  int score_max = 1;
};

/// Fits one model per lambda and keeps the one with the best validation QWK
/// (ties go to the smaller lambda). With an empty validation set the choice
/// falls back to training QWK. Throws TrainingError on empty or too-small
/// training data and on a non-finite objective.
TrainResult train(const ModelSpec& spec, std::span<const Example> train_set,
                  std::span<const Example> valid_set, const TrainConfig& config = {});

struct Contribution {
  std::size_t component_index = 0;
  Label label = Label::absent;
  double weight = 0.0;
};

std::vector<Contribution> contribution_table(const OrdinalModel& model,
                                             const FeatureVector& features);

nlohmann::json to_json(const OrdinalModel& model);
OrdinalModel model_from_json(const nlohmann::json& j);
OrdinalModel load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const OrdinalModel& model);

}  // namespace ascore::ordinal
