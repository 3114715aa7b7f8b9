#include <doctest.h>

#include <cmath>

#include "edh/optim.hpp"
#include "edh/rng.hpp"
#include "edh/tensor.hpp"

using namespace edh;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad,
                     double lo = -1.0, double hi = 1.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("relu6 clamps and passes through") {
  Tensor x = Tensor::from_data({3}, {-1.0, 3.0, 7.0});
  Tensor y = relu6(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 3.0);
  CHECK(y.data()[2] == 6.0);
}

TEST_CASE("relu6 gradient is the open-interval indicator") {
  Tensor x = Tensor::from_data({5}, {-2.0, 0.0, 2.0, 6.0, 8.0}, true);
  Tensor loss = sum_all(relu6(x));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{0, 0, 1, 0, 0});
}

TEST_CASE("softmax rows sum to one and stay nonnegative") {
  Rng rng(7);
  Tensor logits = random_tensor({13, 6}, rng, false, -30.0, 30.0);
  Tensor p = softmax_rows(logits);
  for (int i = 0; i < 13; ++i) {
    double sum = 0;
    for (int j = 0; j < 6; ++j) {
      CHECK(p.at(i, j) >= 0.0);
      sum += p.at(i, j);
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax cross entropy matches hand-computed values") {
  SUBCASE("uniform prediction over two classes") {
    Tensor logits = Tensor::zeros({4, 2});
    Tensor loss = softmax_cross_entropy(logits, {0, 1, 0, 1});
    CHECK(loss.value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("logits [ln 3, 0] with label 1") {
    Tensor logits = Tensor::from_data({1, 2}, {std::log(3.0), 0.0});
    Tensor loss = softmax_cross_entropy(logits, {1});
    CHECK(loss.value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("confident correct prediction drives the loss to zero") {
    Tensor logits = Tensor::from_data({1, 2}, {50.0, -50.0});
    Tensor loss = softmax_cross_entropy(logits, {0});
    CHECK(loss.value() < 1e-12);
  }
  SUBCASE("label out of range is rejected") {
    Tensor logits = Tensor::zeros({1, 2});
    CHECK_THROWS(softmax_cross_entropy(logits, {2}));
  }
}

TEST_CASE("backward on sum of squares") {
  Tensor theta = Tensor::from_data({1}, {3.0}, true);
  Tensor loss = sum_all(mul(theta, theta));
  backward(loss);
  CHECK(theta.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward leaves detached parameters untouched") {
  Tensor theta = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor other = Tensor::from_data({2}, {5.0, 5.0}, true);
  Tensor loss = sum_all(mul(other, other));
  backward(loss);
  CHECK(theta.grad() == std::vector<double>{0, 0});
}

TEST_CASE("backward must see a scalar") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  CHECK_THROWS(backward(relu6(x)));
}

TEST_CASE("repeated backward accumulates") {
  Tensor theta = Tensor::from_data({1}, {3.0}, true);
  Tensor loss = sum_all(mul(theta, theta));
  backward(loss);
  backward(loss);
  CHECK(theta.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("composite loss gradient is linear in the weights") {
  Rng rng(11);
  Tensor theta = random_tensor({4}, rng, true);
  auto branch_grad = [&](double w) {
    theta.zero_grad();
    Tensor loss = scale(sum_all(abs_val(theta)), w);
    backward(loss);
    return theta.grad();
  };
  std::vector<double> g1 = branch_grad(0.7);
  std::vector<double> g2 = branch_grad(1.4);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == 2.0 * g1[i]);
}

TEST_CASE("batch norm train mode standardizes each feature") {
  Rng rng(3);
  const int b = 64, f = 5;
  // batch variance must dominate the 1e-5 epsilon for exact standardization
  Tensor x = random_tensor({b, f}, rng, false, -10.0, 10.0);
  Tensor gamma = Tensor::from_data({f}, std::vector<double>(f, 1.0));
  Tensor beta = Tensor::zeros({f});
  BatchNormState state(f);
  Tensor y = batch_norm(x, gamma, beta, state, BnMode::train);
  for (int j = 0; j < f; ++j) {
    double mean = 0, var = 0;
    for (int i = 0; i < b; ++i) mean += y.at(i, j);
    mean /= b;
    for (int i = 0; i < b; ++i) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= b;
    CHECK(std::fabs(mean) < 1e-9);
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
  // running statistics moved toward the batch statistics
  CHECK(state.running_mean[0] != 0.0);
}

TEST_CASE("batch norm constant batch collapses to zero") {
  const int b = 8, f = 3;
  Tensor x = Tensor::from_data({b, f}, std::vector<double>(b * f, 4.2));
  Tensor gamma = Tensor::from_data({f}, std::vector<double>(f, 1.0));
  Tensor beta = Tensor::zeros({f});
  BatchNormState state(f);
  Tensor y = batch_norm(x, gamma, beta, state, BnMode::train);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("batch norm eval with identity statistics is the identity") {
  Rng rng(5);
  Tensor x = random_tensor({4, 3}, rng, false);
  Tensor gamma = Tensor::from_data({3}, std::vector<double>(3, 1.0));
  Tensor beta = Tensor::zeros({3});
  BatchNormState state(3, /*eps=*/0.0);
  Tensor y = batch_norm(x, gamma, beta, state, BnMode::eval);
  for (std::size_t i = 0; i < y.data().size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("batch norm rejects a train batch of one") {
  Tensor x = Tensor::from_data({1, 3}, {1.0, 2.0, 3.0});
  Tensor gamma = Tensor::from_data({3}, std::vector<double>(3, 1.0));
  Tensor beta = Tensor::zeros({3});
  BatchNormState state(3);
  CHECK_THROWS(batch_norm(x, gamma, beta, state, BnMode::train));
}

TEST_CASE("train_frozen leaves running statistics untouched") {
  Rng rng(9);
  Tensor x = random_tensor({16, 4}, rng, false);
  Tensor gamma = Tensor::from_data({4}, std::vector<double>(4, 1.0));
  Tensor beta = Tensor::zeros({4});
  BatchNormState state(4);
  std::vector<double> rm = state.running_mean, rv = state.running_var;
  batch_norm(x, gamma, beta, state, BnMode::train_frozen);
  CHECK(state.running_mean == rm);
  CHECK(state.running_var == rv);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  std::vector<double> before = p.data();
  Adam opt({p}, AdamConfig{0.01});
  p.zero_grad();
  opt.step();
  CHECK(p.data() == before);
}

TEST_CASE("adam first step moves by roughly lr against the gradient sign") {
  Tensor p = Tensor::from_data({1}, {0.0}, true);
  Adam opt({p}, AdamConfig{0.01});
  p.grad()[0] = 0.37;
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam descends monotonically under a constant gradient") {
  Tensor p = Tensor::from_data({1}, {1.0}, true);
  Adam opt({p}, AdamConfig{0.01});
  double prev = p.data()[0];
  for (int i = 0; i < 2; ++i) {
    p.zero_grad();
    p.grad()[0] = 2.5;
    opt.step();
    CHECK(p.data()[0] < prev);
    prev = p.data()[0];
  }
}

TEST_CASE("adam updates are bit-identical across same-seed runs") {
  auto run = [] {
    Rng rng(1234);
    Tensor p = random_tensor({8}, rng, true);
    Adam opt({p}, AdamConfig{1e-3});
    for (int i = 0; i < 25; ++i) {
      p.zero_grad();
      Tensor loss = sum_all(mul(p, p));
      backward(loss);
      opt.step();
    }
    return p.data();
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check is exact for quadratics") {
  Rng rng(21);
  Tensor theta = random_tensor({6}, rng, true);
  auto f = [&] { return sum_all(mul(theta, theta)); };
  GradCheckResult r = grad_check(f, {theta});
  CHECK(r.max_rel_error < 1e-8);
  CHECK(r.coords_checked == 6);
}

TEST_CASE("grad_check reports zero error for constants") {
  Tensor theta = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  auto f = [] { return Tensor::scalar(5.0); };
  GradCheckResult r = grad_check(f, {theta});
  CHECK(r.max_rel_error == 0.0);
}

TEST_CASE("every differentiable op matches central finite differences") {
  Rng rng(31);
  const GradCheckOptions opts;  // h = 1e-5

  SUBCASE("matmul + bias") {
    Tensor a = random_tensor({5, 4}, rng, true);
    Tensor w = random_tensor({4, 3}, rng, true);
    Tensor b = random_tensor({3}, rng, true);
    auto f = [&] { return mean_all(add_row_bias(matmul(a, w), b)); };
    CHECK(grad_check(f, {a, w, b}, opts).max_rel_error < 1e-4);
  }
  SUBCASE("relu6 and abs") {
    Tensor x = random_tensor({40}, rng, true);
    auto f = [&] { return mean_all(abs_val(relu6(scale(x, 3.0)))); };
    CHECK(grad_check(f, {x}, opts).max_rel_error < 1e-4);
  }
  SUBCASE("softmax + floored log") {
    Tensor x = random_tensor({6, 4}, rng, true);
    auto f = [&] {
      Tensor p = softmax_rows(x);
      return scale(sum_all(mul(p, log_floored(p))), -1.0);
    };
    CHECK(grad_check(f, {x}, opts).max_rel_error < 1e-4);
  }
  SUBCASE("batch norm through the batch statistics") {
    Tensor x = random_tensor({12, 3}, rng, true);
    Tensor gamma = random_tensor({3}, rng, true, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng, true);
    BatchNormState state(3);
    auto f = [&] {
      return mean_all(
          mul(batch_norm(x, gamma, beta, state, BnMode::train_frozen),
              batch_norm(x, gamma, beta, state, BnMode::train_frozen)));
    };
    CHECK(grad_check(f, {x, gamma, beta}, opts).max_rel_error < 1e-4);
  }
  SUBCASE("softmax cross entropy") {
    Tensor logits = random_tensor({9, 5}, rng, true);
    std::vector<int> labels;
    for (int i = 0; i < 9; ++i) labels.push_back(rng.below(5));
    auto f = [&] { return softmax_cross_entropy(logits, labels); };
    CHECK(grad_check(f, {logits}, opts).max_rel_error < 1e-4);
  }
  SUBCASE("slicing") {
    Tensor x = random_tensor({8, 3}, rng, true);
    auto f = [&] { return sum_all(mul(slice_rows(x, 2, 6), slice_rows(x, 2, 6))); };
    CHECK(grad_check(f, {x}, opts).max_rel_error < 1e-4);
  }
}

TEST_CASE("slice_rows gradients scatter into the right rows") {
  Tensor x = Tensor::from_data({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  Tensor loss = sum_all(slice_rows(x, 1, 3));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{0, 0, 1, 1, 1, 1, 0, 0});
}
