#include "edh/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "edh/gemm.hpp"
#include "edh/rng.hpp"

namespace edh {

namespace detail {

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  ~TensorNode();

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad();
};

namespace {

// Active nonsmoothness trace used by grad_check; each kinked op appends a
// hash of its per-element region pattern so two evaluations can be compared.
thread_local std::vector<std::uint64_t>* g_region_trace = nullptr;

bool tracing_regions() { return g_region_trace != nullptr; }

void trace_regions(const std::uint8_t* codes, std::size_t n) {
  if (!g_region_trace) return;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= codes[i];
    h *= 0x100000001b3ULL;
  }
  g_region_trace->push_back(h);
}

// Freed node buffers are recycled; training steps allocate and drop the same
// shapes thousands of times.
struct BufferPool {
  static constexpr std::size_t kMaxBytes = 256u << 20;
  std::unordered_map<std::size_t, std::vector<std::vector<double>>> buckets;
  std::size_t held_bytes = 0;

  std::vector<double> acquire(std::size_t n, bool zeroed) {
    auto it = buckets.find(n);
    if (it == buckets.end() || it->second.empty())
      return std::vector<double>(n, 0.0);
    std::vector<double> v = std::move(it->second.back());
    it->second.pop_back();
    held_bytes -= n * sizeof(double);
    if (zeroed) std::fill(v.begin(), v.end(), 0.0);
    return v;
  }

  void release(std::vector<double>&& v) {
    std::size_t bytes = v.size() * sizeof(double);
    if (v.empty() || held_bytes + bytes > kMaxBytes) return;
    held_bytes += bytes;
    buckets[v.size()].push_back(std::move(v));
  }
};

thread_local BufferPool g_pool;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("tensor: " + msg);
}

void check(bool cond, const char* msg) {
  if (!cond) fail(msg);
}

std::shared_ptr<TensorNode> new_node(std::vector<int> shape) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = g_pool.acquire(static_cast<std::size_t>(n->numel()), false);
  return n;
}

std::shared_ptr<TensorNode> child_of(
    std::vector<int> shape, std::vector<std::shared_ptr<TensorNode>> parents) {
  auto n = new_node(std::move(shape));
  n->requires_grad = false;
  for (auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

}  // namespace

TensorNode::~TensorNode() {
  g_pool.release(std::move(data));
  g_pool.release(std::move(grad));
}

void TensorNode::ensure_grad() {
  if (grad.empty())
    grad = g_pool.acquire(static_cast<std::size_t>(numel()), true);
}

}  // namespace detail

using detail::TensorNode;

Tensor make_tensor(std::shared_ptr<TensorNode> node) {
  return Tensor(std::move(node));
}

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = detail::new_node(std::move(shape));
  std::fill(n->data.begin(), n->data.end(), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  auto n = detail::new_node(std::move(shape));
  if (static_cast<std::int64_t>(data.size()) != n->numel())
    detail::fail("data length does not match shape");
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const std::vector<int>& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::numel() const { return node_->numel(); }

int Tensor::rows() const {
  detail::check(node_->shape.size() == 2, "rows() needs a 2-D tensor");
  return node_->shape[0];
}
int Tensor::cols() const {
  detail::check(node_->shape.size() == 2, "cols() needs a 2-D tensor");
  return node_->shape[1];
}

std::vector<double>& Tensor::data() { return node_->data; }
const std::vector<double>& Tensor::data() const { return node_->data; }

std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}
const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}
bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty())
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

double Tensor::value() const {
  detail::check(node_->numel() == 1, "value() needs a scalar tensor");
  return node_->data[0];
}

double Tensor::at(int i, int j) const {
  return node_->data[static_cast<std::size_t>(i) * cols() + j];
}

Tensor Tensor::detach() const {
  auto n = detail::new_node(node_->shape);
  n->data = node_->data;
  return Tensor(std::move(n));
}

// ---- elementwise ------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    detail::fail(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = detail::child_of(a.shape(), {a.shared_node(), b.shared_node()});
  const std::size_t n = out->data.size();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = av[i] + bv[i];
  auto pa = a.shared_node(), pb = b.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, pa, pb] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] += o->grad[i];
    }
  };
  return make_tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = detail::child_of(a.shape(), {a.shared_node(), b.shared_node()});
  const std::size_t n = out->data.size();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = av[i] - bv[i];
  auto pa = a.shared_node(), pb = b.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, pa, pb] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) pa->grad[i] += o->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) pb->grad[i] -= o->grad[i];
    }
  };
  return make_tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = detail::child_of(a.shape(), {a.shared_node(), b.shared_node()});
  const std::size_t n = out->data.size();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = av[i] * bv[i];
  auto pa = a.shared_node(), pb = b.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, pa, pb] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i)
        pa->grad[i] += o->grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i)
        pb->grad[i] += o->grad[i] * pa->data[i];
    }
  };
  return make_tensor(out);
}

Tensor scale(const Tensor& a, double c) {
  auto out = detail::child_of(a.shape(), {a.shared_node()});
  const std::size_t n = out->data.size();
  const double* av = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = c * av[i];
  auto pa = a.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, pa, c] {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i)
      pa->grad[i] += c * o->grad[i];
  };
  return make_tensor(out);
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check(a.shape().size() == 2 && b.shape().size() == 2,
                "matmul needs 2-D tensors");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  detail::check(b.rows() == k, "matmul: inner dimensions differ");
  auto out = detail::child_of({m, n}, {a.shared_node(), b.shared_node()});
  detail::gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(),
               n, 0.0, out->data.data(), n);
  auto pa = a.shared_node(), pb = b.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, pa, pb, m, k, n] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      // dA += dY * B^T
      detail::gemm(false, true, m, k, n, 1.0, o->grad.data(), n,
                   pb->data.data(), n, 1.0, pa->grad.data(), k);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      // dB += A^T * dY
      detail::gemm(true, false, k, n, m, 1.0, pa->data.data(), k,
                   o->grad.data(), n, 1.0, pb->grad.data(), n);
    }
  };
  return make_tensor(out);
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::check(x.shape().size() == 2 && bias.shape().size() == 1,
                "add_row_bias: x must be 2-D, bias 1-D");
  const int m = x.rows(), n = x.cols();
  detail::check(bias.shape()[0] == n, "add_row_bias: width mismatch");
  auto out = detail::child_of({m, n}, {x.shared_node(), bias.shared_node()});
  const double* xv = x.data().data();
  const double* bv = bias.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<std::size_t>(i) * n + j] =
          xv[static_cast<std::size_t>(i) * n + j] + bv[j];
  auto px = x.shared_node(), pb = bias.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px, pb, m, n] {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          pb->grad[j] += o->grad[static_cast<std::size_t>(i) * n + j];
    }
  };
  return make_tensor(out);
}

// ---- nonlinearities ---------------------------------------------------------

Tensor relu6(const Tensor& x) {
  auto out = detail::child_of(x.shape(), {x.shared_node()});
  const std::size_t n = out->data.size();
  const double* xv = x.data().data();
  if (detail::tracing_regions()) {
    std::vector<std::uint8_t> region(n);
    for (std::size_t i = 0; i < n; ++i)
      region[i] = xv[i] <= 0.0 ? 0 : (xv[i] >= 6.0 ? 2 : 1);
    detail::trace_regions(region.data(), n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = xv[i];
    out->data[i] = v <= 0.0 ? 0.0 : (v >= 6.0 ? 6.0 : v);
  }
  auto px = x.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      double v = px->data[i];
      // subgradient 0 at both boundary points
      if (v > 0.0 && v < 6.0) px->grad[i] += o->grad[i];
    }
  };
  return make_tensor(out);
}

Tensor abs_val(const Tensor& x) {
  auto out = detail::child_of(x.shape(), {x.shared_node()});
  const std::size_t n = out->data.size();
  const double* xv = x.data().data();
  if (detail::tracing_regions()) {
    std::vector<std::uint8_t> region(n);
    for (std::size_t i = 0; i < n; ++i)
      region[i] = xv[i] < 0.0 ? 0 : (xv[i] > 0.0 ? 2 : 1);
    detail::trace_regions(region.data(), n);
  }
  for (std::size_t i = 0; i < n; ++i) out->data[i] = std::fabs(xv[i]);
  auto px = x.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      double v = px->data[i];
      if (v > 0.0)
        px->grad[i] += o->grad[i];
      else if (v < 0.0)
        px->grad[i] -= o->grad[i];
    }
  };
  return make_tensor(out);
}

Tensor log_floored(const Tensor& x, double floor) {
  detail::check(floor > 0.0, "log_floored: floor must be positive");
  auto out = detail::child_of(x.shape(), {x.shared_node()});
  const std::size_t n = out->data.size();
  const double* xv = x.data().data();
  if (detail::tracing_regions()) {
    std::vector<std::uint8_t> region(n);
    for (std::size_t i = 0; i < n; ++i)
      region[i] = xv[i] > floor ? 1 : 0;
    detail::trace_regions(region.data(), n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = xv[i];
    out->data[i] = std::log(v > floor ? v : floor);
  }
  auto px = x.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px, floor] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      double v = px->data[i];
      if (v > floor) px->grad[i] += o->grad[i] / v;
    }
  };
  return make_tensor(out);
}

Tensor softmax_rows(const Tensor& logits) {
  detail::check(logits.shape().size() == 2, "softmax_rows needs a 2-D tensor");
  const int m = logits.rows(), n = logits.cols();
  auto out = detail::child_of({m, n}, {logits.shared_node()});
  for (int i = 0; i < m; ++i) {
    const double* row = logits.data().data() + static_cast<std::size_t>(i) * n;
    double* prow = out->data.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < n; ++j) prow[j] /= sum;
  }
  auto px = logits.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px, m, n] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* p = o->data.data() + static_cast<std::size_t>(i) * n;
      const double* dy = o->grad.data() + static_cast<std::size_t>(i) * n;
      double* dx = px->grad.data() + static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += dy[j] * p[j];
      for (int j = 0; j < n; ++j) dx[j] += p[j] * (dy[j] - dot);
    }
  };
  return make_tensor(out);
}

// ---- reductions -------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  auto out = detail::child_of({}, {x.shared_node()});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out->data[0] = s;
  auto px = x.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    double g = o->grad[0];
    for (double& v : px->grad) v += g;
  };
  return make_tensor(out);
}

Tensor mean_all(const Tensor& x) {
  detail::check(x.numel() > 0, "mean_all of empty tensor");
  auto out = detail::child_of({}, {x.shared_node()});
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  out->data[0] = s * inv;
  auto px = x.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px, inv] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    double g = o->grad[0] * inv;
    for (double& v : px->grad) v += g;
  };
  return make_tensor(out);
}

Tensor slice_rows(const Tensor& x, int row_begin, int row_end) {
  detail::check(x.shape().size() == 2, "slice_rows needs a 2-D tensor");
  const int m = x.rows(), n = x.cols();
  detail::check(0 <= row_begin && row_begin <= row_end && row_end <= m,
                "slice_rows: bad range");
  const int rows = row_end - row_begin;
  auto out = detail::child_of({rows, n}, {x.shared_node()});
  std::copy_n(x.data().data() + static_cast<std::size_t>(row_begin) * n,
              static_cast<std::size_t>(rows) * n, out->data.data());
  auto px = x.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px, row_begin, rows, n] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    double* dst = px->grad.data() + static_cast<std::size_t>(row_begin) * n;
    for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * n; ++i)
      dst[i] += o->grad[i];
  };
  return make_tensor(out);
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels) {
  detail::check(logits.shape().size() == 2,
                "softmax_cross_entropy needs 2-D logits");
  const int m = logits.rows(), n = logits.cols();
  detail::check(static_cast<int>(labels.size()) == m,
                "softmax_cross_entropy: label count != batch");
  detail::check(m > 0, "softmax_cross_entropy: empty batch");
  for (int y : labels)
    detail::check(0 <= y && y < n, "softmax_cross_entropy: label out of range");

  auto out = detail::child_of({}, {logits.shared_node()});
  // Keep the probabilities for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(m) * n);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* row = logits.data().data() + static_cast<std::size_t>(i) * n;
    double* prow = probs->data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < n; ++j) prow[j] /= sum;
    total += (mx + std::log(sum)) - row[labels[i]];
  }
  out->data[0] = total / m;

  auto px = logits.shared_node();
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  TensorNode* o = out.get();
  out->backprop = [o, px, probs, labels_copy, m, n] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double g = o->grad[0] / m;
    for (int i = 0; i < m; ++i) {
      const double* prow = probs->data() + static_cast<std::size_t>(i) * n;
      double* dx = px->grad.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) dx[j] += g * prow[j];
      dx[(*labels_copy)[i]] -= g;
    }
  };
  return make_tensor(out);
}

// ---- batch normalization ------------------------------------------------

BatchNormState::BatchNormState(int features_, double eps_, double momentum_)
    : features(features_),
      eps(eps_),
      momentum(momentum_),
      running_mean(features_, 0.0),
      running_var(features_, 1.0) {}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, BnMode mode) {
  detail::check(x.shape().size() == 2, "batch_norm needs a 2-D input");
  const int b = x.rows(), f = x.cols();
  detail::check(f == state.features, "batch_norm: feature count mismatch");
  detail::check(gamma.shape() == std::vector<int>{f} &&
                    beta.shape() == std::vector<int>{f},
                "batch_norm: gamma/beta must be [features]");
  const bool use_batch_stats = mode != BnMode::eval;
  if (use_batch_stats && b < 2)
    detail::fail("batch_norm: train mode needs batch >= 2");

  auto out = detail::child_of(
      {b, f}, {x.shared_node(), gamma.shared_node(), beta.shared_node()});

  auto mean = std::make_shared<std::vector<double>>(f, 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(f, 0.0);
  auto xhat = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(b) * f);

  if (use_batch_stats) {
    const double* xv = x.data().data();
    std::vector<double> var(f, 0.0);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j)
        (*mean)[j] += xv[static_cast<std::size_t>(i) * f + j];
    for (int j = 0; j < f; ++j) (*mean)[j] /= b;
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j) {
        double d = xv[static_cast<std::size_t>(i) * f + j] - (*mean)[j];
        var[j] += d * d;
      }
    for (int j = 0; j < f; ++j) var[j] /= b;  // biased variance
    for (int j = 0; j < f; ++j)
      (*inv_std)[j] = 1.0 / std::sqrt(var[j] + state.eps);
    if (mode == BnMode::train) {
      for (int j = 0; j < f; ++j) {
        state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] +
                                state.momentum * (*mean)[j];
        state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] +
                               state.momentum * var[j];
      }
    }
  } else {
    *mean = state.running_mean;
    for (int j = 0; j < f; ++j)
      (*inv_std)[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
  }

  {
    const double* xv = x.data().data();
    const double* gv = gamma.data().data();
    const double* bv = beta.data().data();
    const double* mv = mean->data();
    const double* sv = inv_std->data();
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j) {
        std::size_t idx = static_cast<std::size_t>(i) * f + j;
        (*xhat)[idx] = (xv[idx] - mv[j]) * sv[j];
        out->data[idx] = gv[j] * (*xhat)[idx] + bv[j];
      }
  }

  auto px = x.shared_node(), pg = gamma.shared_node(), pb = beta.shared_node();
  TensorNode* o = out.get();
  out->backprop = [o, px, pg, pb, mean, inv_std, xhat, b, f,
                   use_batch_stats] {
    // dgamma / dbeta
    if (pg->requires_grad || pb->requires_grad) {
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < f; ++j) {
          std::size_t idx = static_cast<std::size_t>(i) * f + j;
          if (pg->requires_grad) pg->grad[j] += o->grad[idx] * (*xhat)[idx];
          if (pb->requires_grad) pb->grad[j] += o->grad[idx];
        }
    }
    if (!px->requires_grad) return;
    px->ensure_grad();
    if (!use_batch_stats) {
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < f; ++j) {
          std::size_t idx = static_cast<std::size_t>(i) * f + j;
          px->grad[idx] += o->grad[idx] * pg->data[j] * (*inv_std)[j];
        }
      return;
    }
    // Train-mode backward through the batch statistics.
    std::vector<double> s1(f, 0.0), s2(f, 0.0);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j) {
        std::size_t idx = static_cast<std::size_t>(i) * f + j;
        double dxhat = o->grad[idx] * pg->data[j];
        s1[j] += dxhat;
        s2[j] += dxhat * (*xhat)[idx];
      }
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < f; ++j) {
        std::size_t idx = static_cast<std::size_t>(i) * f + j;
        double dxhat = o->grad[idx] * pg->data[j];
        px->grad[idx] += (*inv_std)[j] / b *
                         (b * dxhat - s1[j] - (*xhat)[idx] * s2[j]);
      }
  };
  return make_tensor(out);
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  detail::check(loss.defined(), "backward of undefined tensor");
  if (loss.numel() != 1)
    detail::fail("backward: loss must be a scalar");
  TensorNode* root = loss.node();
  if (!root->requires_grad) return;  // nothing upstream wants gradients

  // Post-order over the subgraph that requires grad.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p) && p->backprop) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are transient per backward call; only leaves keep
  // accumulating across calls.
  for (TensorNode* node : order) {
    node->ensure_grad();
    std::fill(node->grad.begin(), node->grad.end(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop) node->backprop();
  }
}

// ---- gradient checking --------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& params,
                           const GradCheckOptions& opts) {
  GradCheckResult result;
  const double h = opts.step;

  // Analytic gradients at the base point.
  for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
  {
    Tensor loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  auto eval_traced = [&](std::vector<std::uint64_t>& trace) {
    trace.clear();
    detail::g_region_trace = opts.skip_nonsmooth ? &trace : nullptr;
    double v = f().value();
    detail::g_region_trace = nullptr;
    return v;
  };

  std::vector<std::uint64_t> trace_plus, trace_minus;
  Rng rng(Rng::splitmix(opts.sample_seed ^ 0x517cc1b727220a95ULL));

  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor p = params[t];
    const std::int64_t n = p.numel();
    std::vector<std::int64_t> coords;
    if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
      std::vector<std::int64_t> all(n);
      for (std::int64_t i = 0; i < n; ++i) all[i] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + opts.max_coords_per_tensor);
    } else {
      coords.resize(n);
      for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
    }
    for (std::int64_t idx : coords) {
      double saved = p.data()[idx];
      p.data()[idx] = saved + h;
      double f_plus = eval_traced(trace_plus);
      p.data()[idx] = saved - h;
      double f_minus = eval_traced(trace_minus);
      p.data()[idx] = saved;
      if (opts.skip_nonsmooth && trace_plus != trace_minus) {
        ++result.coords_skipped;
        continue;
      }
      double fd = (f_plus - f_minus) / (2.0 * h);
      double an = analytic[t][idx];
      double denom = std::max({1e-8, std::fabs(fd), std::fabs(an)});
      result.max_rel_error =
          std::max(result.max_rel_error, std::fabs(fd - an) / denom);
      ++result.coords_checked;
    }
  }
  return result;
}

}  // namespace edh
