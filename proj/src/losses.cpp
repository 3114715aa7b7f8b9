#include "edh/losses.hpp"

#include <stdexcept>

#include "edh/nets.hpp"

namespace edh {

namespace {

Tensor sum_tensors(const std::vector<Tensor>& ts) {
  Tensor acc = ts[0];
  for (std::size_t i = 1; i < ts.size(); ++i) acc = add(acc, ts[i]);
  return acc;
}

int hypothesis_count(const std::vector<std::vector<Tensor>>& by_gen) {
  int n = 0;
  for (const auto& group : by_gen) n += static_cast<int>(group.size());
  return n;
}

}  // namespace

Tensor source_loss(const std::vector<std::vector<Tensor>>& logits_by_gen,
                   const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("source_loss: empty batch");
  const int h = hypothesis_count(logits_by_gen);
  if (h == 0) throw std::invalid_argument("source_loss: no hypotheses");
  std::vector<Tensor> terms;
  terms.reserve(h);
  for (const auto& group : logits_by_gen)
    for (const Tensor& logits : group)
      terms.push_back(softmax_cross_entropy(logits, labels));
  return scale(sum_tensors(terms), 1.0 / h);
}

Tensor classifier_discrepancy(
    const std::vector<std::vector<Tensor>>& probs_by_gen,
    bool normalize_by_classes) {
  std::vector<Tensor> terms;
  for (const auto& group : probs_by_gen) {
    if (group.size() < 2) continue;  // a lone classifier has zero discrepancy
    const int n_c = static_cast<int>(group.size());
    Tensor mean = scale(sum_tensors(group), 1.0 / n_c);
    const int batch = group[0].rows();
    for (const Tensor& p : group) {
      Tensor dev = abs_val(sub(p, mean));
      terms.push_back(normalize_by_classes
                          ? mean_all(dev)
                          : scale(sum_all(dev), 1.0 / batch));
    }
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return sum_tensors(terms);
}

Tensor feature_discrepancy(const std::vector<Tensor>& features_by_gen) {
  const int n_g = static_cast<int>(features_by_gen.size());
  if (n_g < 2) return Tensor::scalar(0.0);
  Tensor mean = scale(sum_tensors(features_by_gen), 1.0 / n_g);
  const int batch = features_by_gen[0].rows();
  std::vector<Tensor> terms;
  terms.reserve(n_g);
  for (const Tensor& f : features_by_gen)
    terms.push_back(scale(sum_all(abs_val(sub(f, mean))), 1.0 / batch));
  return sum_tensors(terms);
}

Tensor entropy_loss(const std::vector<std::vector<Tensor>>& probs_by_gen) {
  std::vector<Tensor> terms;
  for (const auto& group : probs_by_gen)
    for (const Tensor& p : group) {
      const int batch = p.rows();
      terms.push_back(
          scale(sum_all(mul(p, log_floored(p))), -1.0 / batch));
    }
  if (terms.empty()) return Tensor::scalar(0.0);
  return sum_tensors(terms);
}

Tensor distillation_loss(const Tensor& student_probs,
                         const Matrix& teacher_probs) {
  if (student_probs.rows() != teacher_probs.rows ||
      student_probs.cols() != teacher_probs.cols)
    throw std::invalid_argument("distillation_loss: shape mismatch");
  const int batch = student_probs.rows();
  Tensor teacher = tensor_from_matrix(teacher_probs);
  return scale(sum_all(mul(teacher, log_floored(student_probs))),
               -1.0 / batch);
}

}  // namespace edh
