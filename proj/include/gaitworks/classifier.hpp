#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaitworks/model.hpp"

namespace gaitworks {

struct EpochStats {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  int max_epochs = 100;
  int patience = 10;          // epochs without training-loss improvement before stopping
  double min_delta = 1e-4;    // improvement below this does not reset patience
  double stop_loss = 0.0;     // stop once the epoch loss falls below this (0 disables)
  std::uint64_t seed = 1;
  std::function<void(const EpochStats&)> on_epoch;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> loss;
  std::vector<double> accuracy;
  bool early_stopped = false;
  int epochs_run() const { return static_cast<int>(loss.size()); }
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using SampleRefs = std::vector<const EnergyImage*>;
SampleRefs refs(std::span<const EnergyImage> samples);

inline int label_of(const EnergyImage& e) { return static_cast<int>(e.meta.gait_class); }

/// Mini-batch Nadam on softmax cross-entropy. Shuffling and dropout draw from `cfg.seed`, so two
/// runs with equal inputs produce identical histories. Batch-norm running statistics are
/// recomputed over the training set once training ends. Throws TrainingError on a non-finite loss.
TrainHistory train(Model& model, const SampleRefs& samples, const TrainConfig& cfg);
TrainHistory train(Model& model, std::span<const EnergyImage> samples, const TrainConfig& cfg);

/// Sets each batch-norm layer's running statistics to the pooled mean and variance over `samples`.
void finalize_batchnorm(Model& model, const SampleRefs& samples, std::size_t batch_size = 32);

struct Prediction {
  std::array<float, kNumClasses> probabilities{};
  int label = 0;
  GaitClass gait_class() const { return static_cast<GaitClass>(label); }
};

/// Index of the largest probability; ties go to the lowest index.
int argmax(std::span<const float> values);

Prediction predict(const Model& model, const EnergyImage& image);
Prediction predict(const Model& model, const GrayImage& image);
std::vector<Prediction> predict_batch(const Model& model, const SampleRefs& samples, std::size_t batch_size = 32);

struct Metrics {
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};  // [true][predicted]
  std::size_t total = 0;
  double accuracy = 0.0;
  std::array<double, kNumClasses> per_class_accuracy{};  // NaN for classes without samples
  std::array<std::array<double, kNumClasses>, kNumClasses> confusion{};  // row-normalized

  void add(int truth, int predicted);
  void merge(const Metrics& other);
  /// Recomputes the derived fields from `counts`.
  void finalize();
  std::string to_json() const;
};

Metrics evaluate(const Model& model, const SampleRefs& samples, std::vector<Prediction>* predictions = nullptr);

// --- subject-wise protocols

inline constexpr int kProtocolSubjects = 21;
inline constexpr int kProtocolFolds = 10;

struct FoldPlan {
  std::vector<std::array<int, 3>> folds;  // test subjects per fold, fold k at index k-1
};

/// Fold k tests subjects {2k-1, 2k, 2k+1}. Only 21 subjects are defined.
FoldPlan make_folds(int n_subjects = kProtocolSubjects);

struct Dataset {
  std::string name;
  std::vector<std::string> class_names{kClassNames.begin(), kClassNames.end()};
  std::vector<EnergyImage> samples;

  /// Sorted distinct subject ids.
  std::vector<int> subjects() const;
};

struct FoldResult {
  int fold = 0;  // 1-based
  std::array<int, 3> test_subjects{};
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  TrainHistory history;
  Metrics metrics;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  double mean_accuracy = 0.0;
  Metrics pooled;
  std::string to_json() const;
};

struct CrossValidationOptions {
  ModelConfig model = ModelConfig::gait_cnn();
  std::vector<int> only_folds;  // 1-based; empty = all
  std::function<void(const FoldResult&)> on_fold;
};

/// Trains a fresh model per fold on every non-test subject and evaluates on the fold's subjects.
/// Throws before training when a protocol subject has no samples; throws std::logic_error if a
/// test subject's sample ever reaches a training set.
CrossValidationResult cross_validate(const Dataset& data, const TrainConfig& cfg,
                                     const CrossValidationOptions& options = {});

struct CrossDatasetResult {
  Metrics metrics;
  TrainHistory history;
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  Model model;
};

/// Single training run on `train_set`, evaluated on `test_set`. Samples whose subject repeats an
/// earlier subject are skipped when `include_repeats` is false.
CrossDatasetResult cross_dataset_eval(const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                                      const ModelConfig& model = ModelConfig::gait_cnn(), bool include_repeats = true);

}  // namespace gaitworks
