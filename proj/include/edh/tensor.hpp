#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace edh {

namespace detail {
struct TensorNode;
}

/// Dense 64-bit float array that doubles as a node in a reverse-mode
/// computation graph. Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  const std::vector<int>& shape() const;
  std::int64_t numel() const;
  int rows() const;  // 2-D only
  int cols() const;  // 2-D only

  std::vector<double>& data();
  const std::vector<double>& data() const;

  // Gradient buffer, allocated (zeroed) on first access.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool has_grad() const;
  void zero_grad();

  bool requires_grad() const;
  void set_requires_grad(bool v);

  double value() const;              // scalar tensors only
  double at(int i, int j) const;     // 2-D convenience

  /// Same data, detached from the graph (constant from autodiff's view).
  Tensor detach() const;

  bool defined() const { return node_ != nullptr; }

  detail::TensorNode* node() const { return node_.get(); }
  std::shared_ptr<detail::TensorNode> shared_node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node);
  std::shared_ptr<detail::TensorNode> node_;
  friend Tensor make_tensor(std::shared_ptr<detail::TensorNode>);
};

// ---- graph-building operations ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);        // elementwise
Tensor sub(const Tensor& a, const Tensor& b);        // elementwise
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] * [k x n]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // x[i,:] += bias

/// matmul(x, weight) with the bias row added in place (one graph node).
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu6(const Tensor& x);
Tensor abs_val(const Tensor& x);
/// ln(max(x, floor)); keeps logs finite at probability zero.
Tensor log_floored(const Tensor& x, double floor = 1e-12);
Tensor softmax_rows(const Tensor& logits);
Tensor sum_all(const Tensor& x);   // scalar
Tensor mean_all(const Tensor& x);  // scalar
Tensor slice_rows(const Tensor& x, int row_begin, int row_end);

/// Mean over the batch of -log softmax(logits)[label]; max-subtraction
/// stabilized. Labels must lie in [0, n_classes).
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels);

// ---- batch normalization --------------------------------------------------

enum class BnMode {
  train,         // batch statistics, running stats updated
  train_frozen,  // batch statistics, running stats untouched
  eval,          // running statistics
};

struct BatchNormState {
  explicit BatchNormState(int features, double eps = 1e-5,
                          double momentum = 0.1);
  int features;
  double eps;
  double momentum;
  std::vector<double> running_mean;  // init 0
  std::vector<double> running_var;   // init 1
};

/// x is [batch x features]; gamma/beta are [features]. Train modes require
/// batch >= 2 and normalize with biased (1/batch) variance.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, BnMode mode);

/// relu6(batch_norm(...)) in a single graph node; the layers' hot path.
Tensor batch_norm_relu6(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, BatchNormState& state,
                        BnMode mode);

// ---- backward pass ---------------------------------------------------------

/// Populates d(loss)/d(t) for every tensor reachable from `loss` that
/// requires grad. Repeated calls accumulate; zero_grad between steps.
void backward(const Tensor& loss);

// ---- finite-difference oracle ----------------------------------------------

struct GradCheckOptions {
  double step = 1e-5;
  /// Max coordinates probed per parameter tensor; <=0 means all of them.
  int max_coords_per_tensor = 0;
  std::uint64_t sample_seed = 0;
  /// Drop coordinates whose +/-h evaluations cross a relu6/abs/log-floor
  /// kink; the central difference does not estimate a derivative there.
  bool skip_nonsmooth = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;
};

/// Compares backward() gradients of f() against central finite differences,
/// coordinate by coordinate over `params`. Relative error uses an absolute
/// floor of 1e-8 in the denominator.
GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params,
                           const GradCheckOptions& opts = {});

}  // namespace edh
