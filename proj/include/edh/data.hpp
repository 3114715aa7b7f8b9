#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edh/matrix.hpp"

namespace edh {

enum class DomainRole { source, target };

/// Feature matrix + labels + subject ids. Target-role datasets hide their
/// labels from training code: train_labels() refuses, eval_labels() serves
/// the evaluation path only.
struct DomainDataset {
  Matrix features;
  std::vector<int> labels;  // empty when hidden
  std::vector<int> subjects;
  DomainRole role = DomainRole::source;
  int n_classes = 0;

  int size() const { return features.rows; }
  int dim() const { return features.cols; }

  const std::vector<int>& train_labels() const;
  const std::vector<int>& eval_labels() const;
  bool has_labels() const { return !labels.empty(); }
  DomainDataset without_labels() const;
};

std::uint64_t dataset_hash(const DomainDataset& ds);

// ---- synthetic: two moons ---------------------------------------------------

struct MoonSpec {
  int points_per_moon = 1500;
  double noise_sigma = 0.05;
  double rotation_deg = 0.0;
  std::array<double, 2> translation{0.0, 0.0};
};

/// Interleaved unit half-circles with isotropic Gaussian noise; upper moon is
/// class 0, lower moon class 1. Rotation about the origin and translation are
/// applied after the noise (target domains use nonzero transforms).
DomainDataset make_moons(const MoonSpec& spec, std::uint64_t seed,
                         DomainRole role = DomainRole::source);

// ---- synthetic: multi-view hidden features ----------------------------------

struct MultiViewSpec {
  double alpha = 0.4;  // fraction of target samples with all three features
  int n_samples = 600;
  int feature_dim = 8;
  /// Orthonormal hidden directions; generated from the seed when empty.
  std::vector<std::vector<double>> directions;
  std::array<double, 3> coefficients{1.0, 1.0, 1.0};
};

struct MultiViewData {
  DomainDataset source;  // half positive (all three features), half negative
  DomainDataset target;  // alpha all-three, (1-alpha)/3 each single feature
  std::vector<std::vector<double>> directions;
};

MultiViewData make_multiview(const MultiViewSpec& spec, std::uint64_t seed);

// ---- shallow features --------------------------------------------------

/// Per channel, in order: mean, population std, max, min, first, last.
/// window is [samples x channels]; result is channel-major (6 per channel).
std::vector<double> extract_imu_features(const Matrix& window);

struct EmgFeatureOptions {
  double ssc_threshold = 0.0;
  double zc_threshold = 0.0;
  int ar_order = 6;
};

/// MAV, waveform length, slope-sign changes, zero crossings, and the
/// autoregressive coefficients (Levinson-Durbin on the biased
/// autocorrelation; all-zero windows yield zero coefficients).
std::vector<double> extract_emg_features(const std::vector<double>& window,
                                         const EmgFeatureOptions& opts = {});

// ---- DSADS ingestion -------------------------------------------------------

enum class DsadsSensor { torso = 0, right_arm, left_arm, right_leg, left_leg };

struct DsadsOptions {
  /// Sensor subset (9-channel blocks); empty selects all 45 channels.
  std::vector<DsadsSensor> sensors;
};

/// Reads the public a{01..19}/p{1..8}/s{01..60}.txt layout (125 rows x 45
/// comma-separated values per file) and returns one dataset per subject with
/// the shallow IMU features extracted per segment.
std::map<int, DomainDataset> load_dsads(const std::filesystem::path& root,
                                        const DsadsOptions& opts = {});

DsadsSensor dsads_sensor_from_string(const std::string& name);

// ---- neutral feature-file format ---------------------------------------

/// CSV with header "subject,label,f0,...,f{D-1}"; deterministic row order.
DomainDataset load_feature_csv(const std::filesystem::path& path);
void write_feature_csv(const std::filesystem::path& path,
                       const DomainDataset& ds);

/// Splits one multi-subject dataset into per-subject datasets.
std::map<int, DomainDataset> split_by_subject(const DomainDataset& ds);

// ---- leave-one-subject-out ------------------------------------------------

struct LosoSplit {
  DomainDataset source_train;  // labeled, all non-target subjects
  DomainDataset source_test;
  DomainDataset target_train;  // labels hidden
  DomainDataset target_test;   // labels reserved for evaluation
};

/// 70/30 per-(subject, class) stratified split with a seeded shuffle; the
/// held-out subject becomes the (unlabeled) target domain.
LosoSplit split_loso(const std::map<int, DomainDataset>& per_subject,
                     int target_subject, std::uint64_t seed,
                     double train_fraction = 0.7);

}  // namespace edh
