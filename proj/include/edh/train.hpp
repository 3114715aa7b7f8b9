#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "edh/data.hpp"
#include "edh/losses.hpp"
#include "edh/nets.hpp"
#include "edh/optim.hpp"

namespace edh {

struct TrainConfig {
  enum class Profile { moon, signal };
  Profile profile = Profile::moon;
  double lr = 1e-3;
  LossWeights weights{3.0, 3.0, 1.0};
  int epochs = 50;
  int batch_size = 200;
  int n_g = 5;
  int n_c = 5;                // classifiers per generator (5 x 5 = 25 total)
  int generator_updates = 3;  // step-C repetitions per mini-batch
  std::uint64_t seed = 1;

  static TrainConfig moon_defaults();
  static TrainConfig signal_defaults();
};

/// One labeled source batch paired with one unlabeled target batch.
struct BatchPair {
  Matrix source_x;
  std::vector<int> source_y;
  Matrix target_x;
};

struct StepReport {
  double l_s = 0;
  double l_dc = 0;
  double l_dg = 0;
  double l_e = 0;
};

/// Step 1: one Adam update of all generators and classifiers on
/// L_s - xi_g * L_dg.
StepReport step_A(EnsembleModel& model, const BatchPair& batch,
                  const LossWeights& w, Adam& opt_g, Adam& opt_c);

/// Step 2: one Adam update of the classifiers only on
/// L_s - xi_c * L_dc + xi_e * L_e. Generator parameters and generator
/// batchnorm statistics are bit-identical before and after.
StepReport step_B(EnsembleModel& model, const BatchPair& batch,
                  const LossWeights& w, Adam& opt_c);

/// Step 3: one Adam update of the generators only on
/// L_dc - L_dg + xi_e * L_e (unit weight on L_dg). Classifier state is
/// bit-identical before and after.
StepReport step_C(EnsembleModel& model, const BatchPair& batch,
                  const LossWeights& w, Adam& opt_g);

struct EpochRow {
  int epoch = 0;
  double source_test_acc = 0;
  double target_test_acc = 0;
  double l_s = 0;
  double l_dc = 0;
  double l_dg = 0;
  double l_e = 0;
};

struct LearningCurve {
  std::vector<EpochRow> rows;
};

void write_curve_csv(const std::filesystem::path& path,
                     const LearningCurve& curve);

struct EvalSets {
  const DomainDataset* source_test = nullptr;
  const DomainDataset* target_test = nullptr;
};

struct EdhTrainResult {
  EnsembleModel model;
  LearningCurve curve;
};

/// Full three-step schedule: per mini-batch one step_A, one step_B and
/// generator_updates step_C repetitions, for a fixed number of epochs with
/// no early stopping. The target dataset contributes features only.
EdhTrainResult train_edh(const DomainDataset& source,
                         const DomainDataset& target, const TrainConfig& cfg,
                         const EvalSets& eval = {});

struct DistillResult {
  StudentModel student;
  LearningCurve curve;  // the l_s column carries the distillation loss
};

/// Trains a fresh single-hypothesis student on the teacher's average
/// predictions over the target training data (same epoch budget and
/// optimizer profile as the teacher).
DistillResult distill(EnsembleModel& teacher, const DomainDataset& target,
                      const TrainConfig& cfg, const EvalSets& eval = {});

enum class BaselineKind { source_only, mcd };

BaselineKind baseline_kind_from_string(const std::string& name);

/// source_only: supervised step_A updates with xi_g = 0, never reading the
/// target. mcd: the identical three-step loop with n_g = 1, n_c = 2.
EdhTrainResult train_baseline(BaselineKind kind, const DomainDataset& source,
                              const DomainDataset& target,
                              const TrainConfig& cfg,
                              const EvalSets& eval = {});

struct EvalMetrics {
  double accuracy = 0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  double forward_time_ms_per_sample = 0;
  int samples = 0;
};

/// Voted-class accuracy, per-class recall, confusion counts and the median
/// per-sample forward wall time over timing_repeats full passes.
EvalMetrics evaluate(EnsembleModel& model, const DomainDataset& ds,
                     int timing_repeats = 1);
EvalMetrics evaluate(StudentModel& model, const DomainDataset& ds,
                     int timing_repeats = 1);

/// Network configs implied by a training profile and dataset.
GeneratorConfig generator_config_for(TrainConfig::Profile profile,
                                     int input_dim);
ClassifierConfig classifier_config_for(TrainConfig::Profile profile,
                                       int n_classes);

}  // namespace edh
