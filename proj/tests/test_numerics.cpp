#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "flowact/rng.hpp"
#include "flowact/tensor.hpp"

using namespace flowact;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::from_data({3}, {0.0, 0.0, 0.0});
  Tensor y = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(7);
  Tensor x = random_tensor({5, 9}, rng, false);
  Tensor y = softmax(x);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 9; ++j) s += y.at(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("swish at zero is zero") {
  Tensor y = swish(Tensor::scalar(0.0));
  CHECK(y.item() == 0.0);
}

TEST_CASE("sinusoidal encode at tau zero is sin block then cos block") {
  Tensor e = sinusoidal_encode(0.0, 4);
  CHECK(e.at(0) == 0.0);
  CHECK(e.at(1) == 0.0);
  CHECK(e.at(2) == 1.0);
  CHECK(e.at(3) == 1.0);
}

TEST_CASE("sinusoidal encode frequencies span 1 to 1e4") {
  const double tau = 1e-4;
  Tensor e = sinusoidal_encode(tau, 8);
  CHECK(e.at(0) == doctest::Approx(std::sin(tau)));      // lowest frequency 1
  CHECK(e.at(3) == doctest::Approx(std::sin(tau * 1e4)));  // highest frequency 1e4
}

TEST_CASE("rms_norm output has unit rms before gain") {
  Rng rng(11);
  Tensor gain = Tensor::constant({16}, 1.0);
  Tensor x = random_tensor({6, 16}, rng, false);
  Tensor y = rms_norm(x, gain);
  for (int i = 0; i < 6; ++i) {
    double ms = 0.0;
    for (int j = 0; j < 16; ++j) ms += y.at(i, j) * y.at(i, j);
    CHECK(std::fabs(std::sqrt(ms / 16.0) - 1.0) < 1e-6);
  }
}

TEST_CASE("shape mismatch errors name the kernel and both shapes") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& err) {
    const std::string msg = err.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(3x4)") != std::string::npos);
    CHECK(msg.find("(5x2)") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, Tensor::zeros({3, 5})), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, Tensor::zeros({2})), std::invalid_argument);
}

TEST_CASE("non-finite kernel output is a hard error") {
  Tensor a = Tensor::from_data({2}, {1e308, 1e308});
  CHECK_THROWS_AS(add(a, a), std::runtime_error);
  Tensor nan_in = Tensor::from_data({2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(softmax(nan_in), std::runtime_error);
}

TEST_CASE("embedding gather rejects out-of-range ids") {
  Tensor table = Tensor::zeros({4, 8});
  CHECK_THROWS_AS(embedding_gather(table, {0, 4}), std::invalid_argument);
  CHECK_THROWS_AS(embedding_gather(table, {-1}), std::invalid_argument);
}

TEST_CASE("forward passes are bit-identical") {
  Rng rng(3);
  Tensor a = random_tensor({7, 13}, rng, false);
  Tensor b = random_tensor({13, 5}, rng, false);
  Tensor g = Tensor::constant({5}, 1.0);
  auto run = [&]() {
    Tensor h = matmul(a, b);
    h = gelu(h);
    h = rms_norm(h, g);
    return softmax(h);
  };
  Tensor y1 = run();
  Tensor y2 = run();
  CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * y1.numel()) == 0);
}

TEST_CASE("grad_check on x squared at x = 3") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  auto f = [&]() { return mul(x, x); };
  double err = grad_check(f, {x}, 1e-4);
  CHECK(err < 1e-8);

  // The analytic gradient itself.
  Graph graph;
  Tensor loss = f();
  graph.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("grad_check rejects bad inputs") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  auto vector_fn = [&]() { return add(x, x); };
  CHECK_THROWS_AS(grad_check(vector_fn, {x}, 1e-4), std::invalid_argument);
  auto scalar_fn = [&]() { return sum(x); };
  CHECK_THROWS_AS(grad_check(scalar_fn, {x}, 1e-2), std::invalid_argument);
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Graph graph;
  Tensor y = add(x, x);
  CHECK_THROWS_AS(graph.backward(y), std::invalid_argument);
}

TEST_CASE("every kernel matches finite differences on random inputs") {
  Rng rng(42);

  SUBCASE("matmul") {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    auto f = [&]() { return sum(gelu(matmul(a, b))); };
    CHECK(grad_check(f, {a, b}, 1e-5) < 1e-4);
  }
  SUBCASE("matmul_nt") {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
    auto f = [&]() { return sum(swish(matmul_nt(a, b))); };
    CHECK(grad_check(f, {a, b}, 1e-5) < 1e-4);
  }
  SUBCASE("add and row broadcast") {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng);
    auto f = [&]() { return sum(gelu(add(a, b))); };
    CHECK(grad_check(f, {a, b}, 1e-5) < 1e-4);
  }
  SUBCASE("sub") {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    auto f = [&]() { return sum(swish(sub(a, b))); };
    CHECK(grad_check(f, {a, b}, 1e-5) < 1e-4);
  }
  SUBCASE("mul and row broadcast") {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4}, rng);
    auto f = [&]() { return sum(gelu(mul(a, b))); };
    CHECK(grad_check(f, {a, b}, 1e-5) < 1e-4);
  }
  SUBCASE("scale") {
    Tensor a = random_tensor({3, 4}, rng);
    auto f = [&]() { return sum(swish(scale(a, -1.7))); };
    CHECK(grad_check(f, {a}, 1e-5) < 1e-4);
  }
  SUBCASE("softmax") {
    Tensor a = random_tensor({3, 6}, rng);
    Tensor w = random_tensor({3, 6}, rng, false);
    auto f = [&]() { return sum(mul(softmax(a), w)); };
    CHECK(grad_check(f, {a}, 1e-5) < 1e-4);
  }
  SUBCASE("rms_norm") {
    Tensor a = random_tensor({3, 8}, rng);
    Tensor gain = random_tensor({8}, rng);
    auto f = [&]() { return sum(swish(rms_norm(a, gain))); };
    CHECK(grad_check(f, {a, gain}, 1e-5) < 1e-4);
  }
  SUBCASE("swish") {
    Tensor a = random_tensor({11}, rng);
    auto f = [&]() { return sum(swish(a)); };
    CHECK(grad_check(f, {a}, 1e-5) < 1e-4);
  }
  SUBCASE("gelu") {
    Tensor a = random_tensor({11}, rng);
    auto f = [&]() { return sum(gelu(a)); };
    CHECK(grad_check(f, {a}, 1e-5) < 1e-4);
  }
  SUBCASE("embedding_gather") {
    Tensor table = random_tensor({6, 4}, rng);
    std::vector<int> ids = {1, 5, 1, 0};
    auto f = [&]() { return sum(gelu(embedding_gather(table, ids))); };
    CHECK(grad_check(f, {table}, 1e-5) < 1e-4);
  }
  SUBCASE("concat rows and cols") {
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({4, 3}, rng);
    Tensor c = random_tensor({2, 5}, rng);
    auto f0 = [&]() { return sum(gelu(concat({a, b}, 0))); };
    CHECK(grad_check(f0, {a, b}, 1e-5) < 1e-4);
    auto f1 = [&]() { return sum(gelu(concat({a, c}, 1))); };
    CHECK(grad_check(f1, {a, c}, 1e-5) < 1e-4);
  }
  SUBCASE("slice") {
    Tensor a = random_tensor({5, 6}, rng);
    auto f = [&]() {
      Tensor r = slice(a, 0, 1, 3);
      Tensor c = slice(r, 1, 2, 4);
      return sum(gelu(c));
    };
    CHECK(grad_check(f, {a}, 1e-5) < 1e-4);
  }
  SUBCASE("rotary_apply") {
    Tensor a = random_tensor({4, 8}, rng);  // 2 heads of dim 4
    std::vector<int> pos = {0, 1, 2, 7};
    auto f = [&]() { return sum(gelu(rotary_apply(a, pos, 4))); };
    CHECK(grad_check(f, {a}, 1e-5) < 1e-4);
  }
}

TEST_CASE("single attention layer matches finite differences") {
  // Two tokens, width 8, one head: q/k/v projections, scaled scores, softmax,
  // weighted values. Composed purely from kernels.
  Rng rng(5);
  const int width = 8;
  Tensor x = random_tensor({2, width}, rng, false);
  Tensor wq = random_tensor({width, width}, rng);
  Tensor wk = random_tensor({width, width}, rng);
  Tensor wv = random_tensor({width, width}, rng);
  for (Tensor* w : {&wq, &wk, &wv}) {
    for (int64_t i = 0; i < w->numel(); ++i) w->data()[i] *= 0.35;
  }
  auto f = [&]() {
    Tensor q = matmul(x, wq);
    Tensor k = matmul(x, wk);
    Tensor v = matmul(x, wv);
    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(width)));
    Tensor probs = softmax(scores);
    return sum(swish(matmul(probs, v)));
  };
  CHECK(grad_check(f, {wq, wk, wv}, 1e-5) < 1e-4);
}

TEST_CASE("rotary rotation preserves pairwise norms") {
  Rng rng(9);
  Tensor x = random_tensor({3, 8}, rng, false);
  std::vector<int> pos = {4, 9, 13};
  Tensor y = rotary_apply(x, pos, 8);
  for (int i = 0; i < 3; ++i) {
    for (int p = 0; p < 4; ++p) {
      const double n_in = x.at(i, p) * x.at(i, p) + x.at(i, p + 4) * x.at(i, p + 4);
      const double n_out = y.at(i, p) * y.at(i, p) + y.at(i, p + 4) * y.at(i, p + 4);
      CHECK(n_out == doctest::Approx(n_in).epsilon(1e-12));
    }
  }
}

TEST_CASE("position zero rotary is the identity") {
  Rng rng(10);
  Tensor x = random_tensor({1, 8}, rng, false);
  Tensor y = rotary_apply(x, {0}, 8);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("float32 mode rounds kernel outputs through float") {
  Tensor a = Tensor::from_data({1}, {0.1});
  Tensor b = Tensor::from_data({1}, {0.2});
  Float32Mode f32;
  Tensor y = add(a, b);
  CHECK(y.item() == static_cast<double>(static_cast<float>(0.1 + 0.2)));
}

TEST_CASE("kernel name registry matches the implemented set") {
  const auto& names = kernel_names();
  CHECK(names.size() == 12);
  for (const char* expected :
       {"matmul", "softmax", "rms_norm", "swish", "gelu", "sinusoidal_encode", "rotary_apply"}) {
    bool found = false;
    for (const auto& n : names) found = found || n == expected;
    CHECK_MESSAGE(found, expected);
  }
}
