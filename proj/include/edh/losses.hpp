#pragma once

#include <vector>

#include "edh/matrix.hpp"
#include "edh/tensor.hpp"

namespace edh {

struct LossWeights {
  double xi_g = 3.0;  // feature discrepancy
  double xi_c = 3.0;  // classifier discrepancy
  double xi_e = 1.0;  // entropy
};

/// Mean cross-entropy of every hypothesis against the source labels, divided
/// by the hypothesis count so the gradient scale is independent of ensemble
/// size. logits_by_gen[i][j] is classifier (i, j) on the source batch.
Tensor source_loss(const std::vector<std::vector<Tensor>>& logits_by_gen,
                   const std::vector<int>& labels);

/// Sum over hypotheses of the per-batch mean L1 deviation of each
/// classifier's probabilities from its generator-group mean, divided by the
/// class count. normalize_by_classes=false drops the 1/N factor (raw L1,
/// as used in the thought-experiment proofs).
Tensor classifier_discrepancy(
    const std::vector<std::vector<Tensor>>& probs_by_gen,
    bool normalize_by_classes = true);

/// Per-sample mean of the summed L1 distances between each generator's
/// features and the cross-generator mean. Zero for a single generator.
Tensor feature_discrepancy(const std::vector<Tensor>& features_by_gen);

/// Sum over hypotheses of the batch-mean Shannon entropy of the predicted
/// probabilities, with 0 ln 0 := 0.
Tensor entropy_loss(const std::vector<std::vector<Tensor>>& probs_by_gen);

/// Batch mean of -sum_n teacher_n * log student_n; teacher rows are
/// constants (soft labels), no temperature.
Tensor distillation_loss(const Tensor& student_probs,
                         const Matrix& teacher_probs);

}  // namespace edh
