#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "edh/matrix.hpp"
#include "edh/rng.hpp"
#include "edh/tensor.hpp"

namespace edh {

struct GeneratorConfig {
  enum class Kind { moon_ann, signal_dense };
  Kind kind = Kind::moon_ann;
  int input_dim = 2;
  /// Widths of the affine layers before the final feature layer. Empty means
  /// the profile default: {32} for moon_ann, {feature, feature} for
  /// signal_dense (the 1x1-conv stack collapsed to dense maps).
  std::vector<int> hidden_widths;
  int feature_length = 32;

  std::vector<int> layer_dims() const;  // input .. hidden .. feature
};

struct ClassifierConfig {
  int input_dim = 32;
  int hidden_width = 64;
  int n_classes = 2;
};

struct AffineLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  Tensor forward(const Tensor& x) const;
};

struct BatchNormLayer {
  explicit BatchNormLayer(int features);
  Tensor gamma;
  Tensor beta;
  BatchNormState state;
  Tensor forward(const Tensor& x, BnMode mode);
};

/// Affine + batchnorm + ReLU6 stack ending in the global feature vector.
class Generator {
 public:
  Generator(const GeneratorConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, BnMode mode);
  std::vector<Tensor> parameters();
  std::vector<AffineLayer>& affines() { return affines_; }
  std::vector<BatchNormLayer>& norms() { return norms_; }
  const GeneratorConfig& config() const { return cfg_; }

 private:
  GeneratorConfig cfg_;
  std::vector<AffineLayer> affines_;
  std::vector<BatchNormLayer> norms_;
};

/// Three affine layers; the first two are followed by batchnorm + ReLU6, the
/// last one emits raw class scores.
class Classifier {
 public:
  Classifier(const ClassifierConfig& cfg, Rng& rng);
  Tensor scores(const Tensor& features, BnMode mode);
  std::vector<Tensor> parameters();
  std::vector<AffineLayer>& affines() { return affines_; }
  std::vector<BatchNormLayer>& norms() { return norms_; }
  const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  std::vector<AffineLayer> affines_;  // l1, l2, l3
  std::vector<BatchNormLayer> norms_;  // after l1, l2
};

/// n_g generators, each shared by n_c classifiers; classifier k belongs to
/// generator k / n_c.
struct EnsembleModel {
  GeneratorConfig gcfg;
  ClassifierConfig ccfg;
  int n_g = 0;
  int n_c = 0;
  std::vector<Generator> generators;
  std::vector<Classifier> classifiers;

  int hypothesis_count() const { return n_g * n_c; }
  int generator_of(int classifier_index) const {
    return classifier_index / n_c;
  }
  std::vector<Tensor> generator_parameters();
  std::vector<Tensor> classifier_parameters();
  std::vector<Tensor> parameters();
  std::int64_t parameter_count();
};

EnsembleModel build_ensemble(const GeneratorConfig& gcfg,
                             const ClassifierConfig& ccfg, int n_g, int n_c,
                             std::uint64_t seed);

/// One generator plus one classifier with the same configs as an ensemble
/// member.
struct StudentModel {
  EnsembleModel net;  // n_g = n_c = 1
  Generator& generator() { return net.generators[0]; }
  Classifier& classifier() { return net.classifiers[0]; }
  std::vector<Tensor> parameters() { return net.parameters(); }
};

StudentModel build_student(const GeneratorConfig& gcfg,
                           const ClassifierConfig& ccfg, std::uint64_t seed);

// ---- forward / prediction ---------------------------------------------------

struct EnsembleActivations {
  std::vector<Tensor> features;             // per generator, [B x F]
  std::vector<std::vector<Tensor>> logits;  // [generator][local classifier]
};

/// Runs every generator and classifier on the full batch. With
/// detach_features the classifiers consume constants (no gradient flows back
/// into the generators).
EnsembleActivations ensemble_forward(EnsembleModel& model, const Tensor& x,
                                     BnMode gen_mode, BnMode cls_mode,
                                     bool detach_features = false);

/// Probabilities of hypothesis (generator i, classifier k); k is the global
/// classifier index and must be assigned to generator i.
Tensor hypothesis_forward(EnsembleModel& model, int generator_index,
                          int classifier_index, const Tensor& x,
                          BnMode mode = BnMode::eval);

struct Prediction {
  Matrix avg_probs;         // mean over all hypotheses
  std::vector<int> voted;   // argmax of avg_probs, ties to lowest index
};

Prediction ensemble_predict(EnsembleModel& model, const Matrix& x,
                            BnMode mode = BnMode::eval);

/// Average predictions over all hypotheses; used as soft labels downstream.
Matrix pseudo_labels(EnsembleModel& model, const Matrix& x);

Tensor tensor_from_matrix(const Matrix& m);

// ---- state inspection -----------------------------------------------------

/// FNV-1a over the exact bytes of all parameters and batchnorm running
/// statistics, in a fixed traversal order.
std::uint64_t generator_state_hash(EnsembleModel& model);
std::uint64_t classifier_state_hash(EnsembleModel& model);
std::uint64_t state_hash(EnsembleModel& model);

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
  std::string kind;  // "ensemble" or "student"
  EnsembleModel model;
};

void save_checkpoint(const std::filesystem::path& path, EnsembleModel& model,
                     const std::string& kind = "ensemble");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace edh
