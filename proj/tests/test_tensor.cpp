#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "srlkit/ops.hpp"
#include "srlkit/tensor.hpp"
#include "test_util.hpp"

using namespace srlkit;
using testing::max_grad_rel_error;
using testing::random_tensor;
using testing::random_tensor_away_from_zero;

namespace {

// Naive triple-loop product, the independent oracle for matmul.
std::vector<double> matmul_oracle(const Tensor<double>& a,
                                  const Tensor<double>& b) {
  const Index m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * p), 0.0);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < p; ++j)
      for (Index l = 0; l < k; ++l)
        out[static_cast<std::size_t>(i * p + j)] += a.at(i, l) * b.at(l, j);
  return out;
}

// Direct nested-loop valid cross-correlation oracle for conv1d.
std::vector<double> conv1d_oracle(const Tensor<double>& x,
                                  const Tensor<double>& w, Index stride) {
  const Index c_in = x.dim(0), t_in = x.dim(1);
  const Index c_out = w.dim(0), kernel = w.dim(2);
  const Index t_out = (t_in - kernel) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(c_out * t_out), 0.0);
  for (Index o = 0; o < c_out; ++o)
    for (Index i = 0; i < t_out; ++i)
      for (Index c = 0; c < c_in; ++c)
        for (Index j = 0; j < kernel; ++j)
          out[static_cast<std::size_t>(o * t_out + i)] +=
              x.values()[c * t_in + i * stride + j] *
              w.values()[(o * c_in + c) * kernel + j];
  return out;
}

constexpr int kSeeds = 20;

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  Rng rng(7);
  Tensor<double> eye = Tensor<double>::from_data(
      {3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<double> b = random_tensor({3, 4}, rng, 1.0, false);
  Tensor<double> prod = matmul(eye, b);
  for (Index i = 0; i < b.numel(); ++i)
    CHECK(prod.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-15));

  Tensor<double> z = Tensor<double>::zeros({2, 4});
  Tensor<double> any = random_tensor({4, 5}, rng, 1.0, false);
  Tensor<double> zp = matmul(z, any);
  CHECK(zp.shape() == Shape{2, 5});
  for (Index i = 0; i < zp.numel(); ++i) CHECK(zp.values()[i] == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(100 + seed);
    Tensor<double> a = random_tensor({7, 5}, rng, 1.0, false);
    Tensor<double> b = random_tensor({5, 3}, rng, 1.0, false);
    Tensor<double> c = matmul(a, b);
    const auto expect = matmul_oracle(a, b);
    for (Index i = 0; i < c.numel(); ++i) {
      const double rel = std::abs(c.values()[i] - expect[i]) /
                         std::max(1.0, std::abs(expect[i]));
      CHECK(rel < 1e-12);
    }
  }
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2x3]"), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("conv1d analytic filters") {
  // Sum filter: all-ones kernel of width 2 on [1, 2, 3].
  Tensor<double> x = Tensor<double>::from_data({1, 3}, {1, 2, 3});
  Tensor<double> w = Tensor<double>::from_data({1, 1, 2}, {1, 1});
  Tensor<double> y = conv1d(x, w, 1);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y.values()[0] == doctest::Approx(3.0));
  CHECK(y.values()[1] == doctest::Approx(5.0));

  // Delta kernel passes a shifted copy through.
  Tensor<double> x2 = Tensor<double>::from_data({1, 5}, {4, 5, 6, 7, 8});
  Tensor<double> delta = Tensor<double>::from_data({1, 1, 3}, {1, 0, 0});
  Tensor<double> y2 = conv1d(x2, delta, 1);
  CHECK(y2.shape() == Shape{1, 3});
  CHECK(y2.values()[0] == doctest::Approx(4.0));
  CHECK(y2.values()[1] == doctest::Approx(5.0));
  CHECK(y2.values()[2] == doctest::Approx(6.0));
}

TEST_CASE("conv1d matches nested-loop oracle") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(200 + seed);
    Tensor<double> x = random_tensor({3, 17}, rng, 1.0, false);
    Tensor<double> w = random_tensor({4, 3, 5}, rng, 1.0, false);
    const Index stride = 1 + seed % 3;
    Tensor<double> y = conv1d(x, w, stride);
    const auto expect = conv1d_oracle(x, w, stride);
    CHECK(y.numel() == static_cast<Index>(expect.size()));
    for (Index i = 0; i < y.numel(); ++i) {
      const double rel = std::abs(y.values()[i] - expect[i]) /
                         std::max(1.0, std::abs(expect[i]));
      CHECK(rel < 1e-12);
    }
  }
}

TEST_CASE("conv1d rejects too-short input") {
  Tensor<double> x = Tensor<double>::zeros({1, 3});
  Tensor<double> w = Tensor<double>::zeros({1, 1, 5});
  CHECK_THROWS_AS(conv1d(x, w, 1), ShapeError);
}

TEST_CASE("backward computes d(x.x)/dx = 2x") {
  Tensor<double> x = Tensor<double>::from_data({3}, {1, -2, 3}, true);
  Tensor<double> loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));
  CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward leaves unconnected leaves at zero") {
  Tensor<double> x = Tensor<double>::from_data({2}, {1, 2}, true);
  Tensor<double> y = Tensor<double>::from_data({2}, {3, 4}, true);
  backward(sum(mul(y, y)));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("backward accumulates over all paths") {
  Tensor<double> x = Tensor<double>::from_data({2}, {1.5, -0.5}, true);
  backward(sum(add(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("backward errors: non-scalar root and graph re-entry") {
  Tensor<double> x = Tensor<double>::from_data({2}, {1, 2}, true);
  Tensor<double> y = mul(x, x);
  CHECK_THROWS_AS(backward(y), GraphError);

  Tensor<double> loss = sum(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), GraphError);

  // A fresh root through an already-consumed subgraph is also re-entry.
  Tensor<double> loss2 = sum(mul(y, y));
  CHECK_THROWS_AS(backward(loss2), GraphError);
}

TEST_CASE("non-finite input data is rejected") {
  CHECK_THROWS_AS(Tensor<double>::from_data(
                      {2}, {1.0, std::numeric_limits<double>::quiet_NaN()}),
                  ValueError);
  CHECK_THROWS_AS(Tensor<double>::from_data(
                      {1}, {std::numeric_limits<double>::infinity()}),
                  ValueError);
}

TEST_CASE("softmax rows are a probability distribution") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(300 + seed);
    Tensor<double> x = random_tensor({5, 9}, rng, 3.0, false);
    Tensor<double> y = softmax(x);
    for (Index i = 0; i < 5; ++i) {
      double total = 0.0;
      for (Index j = 0; j < 9; ++j) {
        CHECK(y.at(i, j) >= 0.0);
        total += y.at(i, j);
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm standardizes each position before gain and bias") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(400 + seed);
    Tensor<double> x = random_tensor({6, 32}, rng, 2.0, false);
    Tensor<double> gain = Tensor<double>::full({32}, 1.0);
    Tensor<double> bias = Tensor<double>::zeros({32});
    Tensor<double> y = layer_norm(x, gain, bias);
    for (Index i = 0; i < 6; ++i) {
      double mu = 0.0, var = 0.0;
      for (Index j = 0; j < 32; ++j) mu += y.at(i, j);
      mu /= 32.0;
      for (Index j = 0; j < 32; ++j) {
        const double d = y.at(i, j) - mu;
        var += d * d;
      }
      var /= 32.0;
      CHECK(std::abs(mu) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs") {
  Rng rng1(5), rng2(5);
  Tensor<float> a1 = Tensor<float>::randn({8, 8}, rng1);
  Tensor<float> a2 = Tensor<float>::randn({8, 8}, rng2);
  for (Index i = 0; i < a1.numel(); ++i) CHECK(a1.values()[i] == a2.values()[i]);
  Tensor<float> y1 = softmax(matmul(a1, a1));
  Tensor<float> y2 = softmax(matmul(a2, a2));
  for (Index i = 0; i < y1.numel(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per primitive, 20 seeds each.
// ---------------------------------------------------------------------------

TEST_CASE("gradient check: elementwise and reduction primitives") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + seed);
    Tensor<double> a = random_tensor({4, 6}, rng);
    Tensor<double> b = random_tensor({4, 6}, rng);
    Tensor<double> row = random_tensor({6}, rng);

    CHECK(max_grad_rel_error([&] { return sum(add(a, b)); }, {a, b}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(add(a, row)); }, {a, row}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(mul(sub(a, b), a)); }, {a, b}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(scale(a, -2.5)); }, {a}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return mean(mul(a, a)); }, {a}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(exp(scale(a, 0.3))); }, {a}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(sigmoid(a)); }, {a}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(gelu(a)); }, {a}) < 1e-4);

    Tensor<double> away = random_tensor_away_from_zero({5, 4}, rng);
    CHECK(max_grad_rel_error([&] { return sum(abs(away)); }, {away}) < 1e-4);

    Tensor<double> pos = random_tensor({4, 3}, rng, 0.3);
    for (Index i = 0; i < pos.numel(); ++i)
      pos.mutable_values()[i] = std::abs(pos.values()[i]) + 0.5;
    CHECK(max_grad_rel_error([&] { return sum(log(pos)); }, {pos}) < 1e-4);
  }
}

TEST_CASE("gradient check: structured primitives") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(2000 + seed);
    Tensor<double> a = random_tensor({5, 7}, rng);
    Tensor<double> gain = random_tensor({7}, rng, 0.5);
    Tensor<double> bias = random_tensor({7}, rng, 0.5);

    CHECK(max_grad_rel_error([&] { return sum(mul(softmax(a), a)); }, {a}) < 1e-4);
    CHECK(max_grad_rel_error(
              [&] { return sum(mul(layer_norm(a, gain, bias), a)); },
              {a, gain, bias}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(mul(l2_normalize(a), a)); }, {a}) <
          1e-4);
    CHECK(max_grad_rel_error([&] { return sum(mul(transpose(a), transpose(a))); },
                             {a}) < 1e-4);
    CHECK(max_grad_rel_error(
              [&] { return sum(slice(a, 1, 2, 3)) + sum(slice(a, 0, 1, 2)); },
              {a}) < 1e-4);
    CHECK(max_grad_rel_error(
              [&] {
                return sum(mul(concat<double>({a, a}, 0),
                               concat<double>({a, a}, 0)));
              },
              {a}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(mul(mean_pool_rows(a), mean_pool_rows(a))); },
                             {a}) < 1e-4);
    CHECK(max_grad_rel_error([&] { return sum(reshape(a, {7, 5})); }, {a}) < 1e-4);

    Tensor<double> b = random_tensor({5, 7}, rng);
    CHECK(max_grad_rel_error([&] { return sum(cosine_similarity(a, b)); }, {a, b}) <
          1e-4);
  }
}

TEST_CASE("gradient check: matmul, conv1d, dropout") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(3000 + seed);
    Tensor<double> a = random_tensor({4, 5}, rng);
    Tensor<double> b = random_tensor({5, 3}, rng);
    CHECK(max_grad_rel_error([&] { return sum(mul(matmul(a, b), matmul(a, b))); },
                             {a, b}) < 1e-4);

    Tensor<double> x = random_tensor({2, 14}, rng);
    Tensor<double> w = random_tensor({3, 2, 4}, rng);
    CHECK(max_grad_rel_error([&] { return sum(mul(conv1d(x, w, 2), conv1d(x, w, 2))); },
                             {x, w}) < 1e-4);

    // Fixed mask stream keeps dropout deterministic across rebuilds.
    CHECK(max_grad_rel_error(
              [&] {
                Rng mask_rng(777);
                return sum(dropout(a, 0.4, mask_rng, true));
              },
              {a}) < 1e-4);
  }
}

TEST_CASE("cosine similarity guards degenerate rows") {
  Tensor<double> a = Tensor<double>::from_data({2, 3}, {0, 0, 0, 1, 2, 3}, true);
  Tensor<double> b = Tensor<double>::from_data({2, 3}, {1, 1, 1, 1, 2, 3}, true);
  Tensor<double> c = cosine_similarity(a, b);
  CHECK(c.values()[0] == 0.0);
  CHECK(c.values()[1] == doctest::Approx(1.0).epsilon(1e-9));
  backward(sum(c));
  for (Index j = 0; j < 3; ++j) CHECK(a.grad()[j] == 0.0);  // zero-norm row
}

TEST_CASE("dropout is identity in eval mode and rescales in train mode") {
  Rng rng(11);
  Tensor<float> x = Tensor<float>::full({1000}, 1.0f);
  Tensor<float> eval_out = dropout(x, 0.5, rng, false);
  CHECK(eval_out.node_ptr().get() == x.node_ptr().get());
  Tensor<float> train_out = dropout(x, 0.5, rng, true);
  double mean_kept = 0.0;
  for (Index i = 0; i < train_out.numel(); ++i)
    mean_kept += train_out.values()[i];
  mean_kept /= static_cast<double>(train_out.numel());
  CHECK(mean_kept == doctest::Approx(1.0).epsilon(0.15));
}
