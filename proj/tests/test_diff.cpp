#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "flockpf/diff.hpp"
#include "test_helpers.hpp"

using namespace flockpf;
using diff::Tape;
using diff::Tensor;
using testing::gradient_check;
using testing::random_tensor;

TEST_CASE("affine identity and bias gradient") {
  Tensor x = Tensor::constant(1, 3, {1, 2, 3});
  Tensor w = Tensor::param(3, 3);
  for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0;
  Tensor b = Tensor::param(1, 3);
  Tape tape;
  Tensor y = diff::affine(&tape, x, w, b);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);

  Tensor s = diff::sum_all(&tape, y);
  b.zero_grad();
  tape.backward(s);
  for (int j = 0; j < 3; ++j) CHECK(b.grad()[j] == doctest::Approx(1.0));  // d sum / d bias = ones
}

TEST_CASE("affine gradient matches central finite differences") {
  Rng rng(7);
  Tensor x = random_tensor(3, 4, rng);
  Tensor w = random_tensor(4, 2, rng);
  Tensor b = random_tensor(1, 2, rng);
  auto build = [&](Tape* t) {
    return diff::sum_all(t, diff::square(t, diff::affine(t, x, w, b)));
  };
  CHECK(gradient_check(build, {x, w, b}) < 1e-6);
}

TEST_CASE("softmax attention basics") {
  Rng rng(11);
  SUBCASE("single row returns V") {
    Tensor q = random_tensor(1, 8, rng), k = random_tensor(1, 8, rng), v = random_tensor(1, 8, rng);
    Tensor y = diff::softmax_attention(nullptr, q, k, v);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(y.data()[i] == doctest::Approx(v.data()[i]));
  }
  SUBCASE("identical query rows give uniform attention (column means of V)") {
    Tensor q(4, 8), k(4, 8);
    Rng r2(3);
    for (int c = 0; c < 8; ++c) {
      const double qa = r2.normal(), ka = r2.normal();
      for (int i = 0; i < 4; ++i) {
        q.at(i, c) = qa;
        k.at(i, c) = ka;
      }
    }
    Tensor v = random_tensor(4, 8, r2);
    Tensor y = diff::softmax_attention(nullptr, q, k, v);
    for (int c = 0; c < 8; ++c) {
      double mean = 0.0;
      for (int i = 0; i < 4; ++i) mean += v.at(i, c) / 4;
      for (int i = 0; i < 4; ++i) CHECK(y.at(i, c) == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("gradients wrt Q, K, V match finite differences") {
    Tensor q = random_tensor(4, 8, rng), k = random_tensor(4, 8, rng), v = random_tensor(4, 8, rng);
    auto build = [&](Tape* t) { return diff::sum_all(t, diff::square(t, diff::softmax_attention(t, q, k, v))); };
    CHECK(gradient_check(build, {q, k, v}) < 1e-5);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum of squares gives 2p") {
    Tensor p = Tensor::param(1, 3);
    p.values() = {1.5, -2.0, 0.25};
    Tape tape;
    Tensor out = diff::sum_all(&tape, diff::square(&tape, p));
    p.zero_grad();
    tape.backward(out);
    for (int i = 0; i < 3; ++i) CHECK(p.grad()[i] == doctest::Approx(2.0 * p.values()[i]));
  }
  SUBCASE("output independent of a parameter leaves its gradient zero") {
    Tensor p = Tensor::param(2, 2);
    Tensor q = Tensor::param(1, 1);
    q.values() = {3.0};
    Tape tape;
    Tensor out = diff::sum_all(&tape, diff::square(&tape, q));
    p.zero_grad();
    q.zero_grad();
    tape.backward(out);
    CHECK_FALSE(p.has_grad());
    CHECK(q.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("two backward calls accumulate exactly twice the gradient") {
    Rng rng(5);
    Tensor p = random_tensor(2, 3, rng);
    Tape tape;
    Tensor out = diff::sum_all(&tape, diff::square(&tape, diff::leaky_relu(&tape, p, 0.01)));
    p.zero_grad();
    tape.backward(out);
    const auto once = p.grad();
    tape.backward(out);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(p.grad()[i] == doctest::Approx(2.0 * once[i]));
  }
}

TEST_CASE("forward values identical with and without tape") {
  Rng rng(9);
  Tensor a = random_tensor(3, 5, rng), b = random_tensor(3, 5, rng), w = random_tensor(5, 4, rng),
         bias = random_tensor(1, 4, rng);
  Tape tape;
  Tensor with_tape =
      diff::sum_all(&tape, diff::leaky_relu(&tape, diff::affine(&tape, diff::mul(&tape, a, b), w, bias)));
  Tensor without =
      diff::sum_all(nullptr, diff::leaky_relu(nullptr, diff::affine(nullptr, diff::mul(nullptr, a, b), w, bias)));
  CHECK(with_tape.at(0, 0) == without.at(0, 0));
}

TEST_CASE("gauss kernel op gradients (all inputs)") {
  Rng rng(13);
  Tensor query = random_tensor(5, 2, rng);
  Tensor centers = random_tensor(3, 2, rng);
  Tensor coef = random_tensor(3, 1, rng, 0.5);
  Tensor sigma = Tensor::param(3, 1);
  sigma.values() = {0.8, 1.3, 0.6};
  auto build = [&](Tape* t) {
    return diff::sum_all(t, diff::square(t, diff::gauss_kde(t, query, centers, coef, sigma)));
  };
  CHECK(gradient_check(build, {query, centers, coef, sigma}) < 1e-5);
}

TEST_CASE("primitive gradient property over random shapes") {
  Rng rng(21);
  for (int draw = 0; draw < 20; ++draw) {
    const int m = 1 + static_cast<int>(rng.uniform_int(4));
    const int n = 1 + static_cast<int>(rng.uniform_int(4));
    Tensor a = random_tensor(m, n, rng);
    Tensor b = random_tensor(m, n, rng);
    // keep leaky-relu inputs away from the kink, sqrt/pow domains positive
    for (auto& v : a.values())
      if (std::abs(v) < 1e-3) v = 0.5;
    Tensor w = random_tensor(n, 3, rng);
    Tensor r = random_tensor(1, n, rng);
    Tensor pos = random_tensor(m, n, rng);
    for (auto& v : pos.values()) v = 0.5 + std::abs(v);

    auto build = [&](Tape* t) {
      Tensor u = diff::add(t, diff::mul(t, a, b), diff::sub(t, a, b));
      u = diff::leaky_relu(t, u, 0.01);
      u = diff::add_rowvec(t, u, r);
      Tensor v1 = diff::matmul(t, u, w);
      Tensor s1 = diff::sum_all(t, diff::square(t, v1));
      Tensor p1 = diff::sum_all(t, diff::sqrt_guard(t, pos));
      Tensor p2 = diff::sum_all(t, diff::pow_const(t, pos, -0.5));
      Tensor mr = diff::sum_all(t, diff::mean_rows(t, u));
      Tensor total = diff::add(t, diff::add(t, s1, p1), diff::add(t, p2, mr));
      return diff::div_scalar(t, total, diff::sum_all(t, pos));
    };
    CAPTURE(draw);
    CHECK(gradient_check(build, {a, b, w, r, pos}) < 1e-4);
  }
}

TEST_CASE("weighted sum, slices, concat, clamp gradients") {
  Rng rng(31);
  Tensor x = random_tensor(4, 3, rng);
  Tensor w = random_tensor(4, 1, rng, 0.3);
  for (auto& v : w.values()) v = 0.1 + std::abs(v);
  auto build = [&](Tape* t) {
    Tensor parts = diff::concat_cols(t, {diff::slice_cols(t, x, 0, 2), diff::slice_cols(t, x, 2, 3)});
    Tensor wm = diff::weighted_sum_rows(t, parts, w);
    Tensor cl = diff::clamp_min(t, diff::sub_rowvec(t, parts, wm), -0.4);
    return diff::sum_all(t, diff::square(t, cl));
  };
  CHECK(gradient_check(build, {x, w}) < 1e-5);
}

TEST_CASE("tape structural bookkeeping") {
  Tensor p = Tensor::param(1, 2);
  p.values() = {1.0, 2.0};
  Tape tape;
  Tensor out = diff::sum_all(&tape, diff::square(&tape, p));
  CHECK(tape.size() == 2);
  CHECK(tape.node_outputs().size() == 2);
  CHECK(tape.node_outputs().back().same_storage(out));
}
