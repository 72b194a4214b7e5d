#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cmret/error.hpp"
#include "cmret/graph.hpp"
#include "cmret/ops.hpp"
#include "cmret/tensor.hpp"

using namespace cmret;

namespace {

Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev, Dtype::f64, true);
}

}  // namespace

TEST_CASE("matmul shape rule and mismatch error") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<int>{2, 2});

  Tensor bad = random_tensor({4, 2}, rng);
  CHECK_THROWS_WITH_AS(matmul(a, bad),
                       doctest::Contains("matmul: inner dimensions disagree"), Error);
  try {
    matmul(a, bad);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("[2, 3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("softmax of zeros is uniform and rows are stochastic") {
  Tensor x = Tensor::from_values({1, 3}, {0.0, 0.0, 0.0}, Dtype::f64);
  Tensor y = softmax_rows(x);
  for (int i = 0; i < 3; ++i) CHECK(y.values()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  std::mt19937_64 rng(7);
  Tensor r = Tensor::randn({20, 9}, rng, 3.0, Dtype::f32);
  Tensor s = softmax_rows(r);
  for (int row = 0; row < 20; ++row) {
    double sum = 0.0;
    for (int c = 0; c < 9; ++c) {
      const double v = s.values()[row * 9 + c];
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("layer norm of a constant vector is zero before affine") {
  Tensor x = Tensor::full({1, 8}, 3.7);
  Tensor gamma = Tensor::full({8}, 1.0);
  Tensor beta = Tensor::zeros({8});
  Tensor y = layer_norm_rows(x, gamma, beta);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("backward of sum gives ones; non-scalar loss rejected") {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor loss = sum_all(x);
  backward(loss);
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

  Tensor not_scalar = add(x, x);
  CHECK_THROWS_AS(backward(not_scalar), Error);
}

TEST_CASE("d/dx of x*x at 3 is 6") {
  Tensor x = Tensor::from_values({1}, {3.0}, Dtype::f64, true);
  Tensor loss = mul(x, x);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("grad_check closed-form anchors") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 5}, rng);

  SUBCASE("sum of squares") {
    const double err = grad_check(
        [](const Tensor& t) { return sum_all(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-7);
  }
  SUBCASE("constant function has zero gradient") {
    const double err =
        grad_check([](const Tensor&) { return Tensor::scalar(4.0, Dtype::f64); }, x, 1e-5);
    CHECK(err == 0.0);
  }
}

TEST_CASE("softmax + cross-entropy matches finite differences") {
  std::mt19937_64 rng(4);
  Tensor logits = random_tensor({4, 6}, rng);
  const std::vector<int> ids{1, 3, 0, 5};
  const double err = grad_check(
      [&]() { return cross_entropy_mean(logits, ids); }, {logits}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("every differentiable op matches central finite differences") {
  std::mt19937_64 rng(5);

  SUBCASE("add/sub/mul/scale") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(add(a, b), sub(a, scale(b, 0.3)))); },
                     {a, b}, 1e-5) < 1e-6);
  }
  SUBCASE("matmul and matmul_nt") {
    Tensor a = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({5, 2}, rng);
    Tensor c = random_tensor({4, 5}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b}, 1e-5) <
          1e-5);
    CHECK(grad_check([&]() { return sum_all(mul(matmul_nt(a, c), matmul_nt(a, c))); }, {a, c},
                     1e-5) < 1e-5);
  }
  SUBCASE("gelu") {
    Tensor x = random_tensor({2, 7}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(gelu(x), gelu(x))); }, {x}, 1e-5) < 1e-5);
  }
  SUBCASE("softmax") {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor w = random_tensor({3, 5}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(softmax_rows(x), w)); }, {x, w}, 1e-5) < 1e-5);
  }
  SUBCASE("layer norm") {
    Tensor x = random_tensor({3, 6}, rng);
    Tensor g = random_tensor({6}, rng);
    Tensor b = random_tensor({6}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(layer_norm_rows(x, g, b), x)); }, {x, g, b},
                     1e-5) < 1e-5);
  }
  SUBCASE("gather, concat, tiled add, rowwise add, embedding") {
    Tensor x = random_tensor({6, 3}, rng);
    Tensor pos = random_tensor({3, 3}, rng);
    Tensor bias = random_tensor({1, 3}, rng);
    Tensor table = random_tensor({5, 3}, rng);
    auto f = [&]() {
      Tensor g1 = gather_rows(x, {0, 2, 2});
      Tensor emb = embedding_lookup(table, {1, 4, 0});
      Tensor cat = concat_rows({g1, emb});        // 6 rows
      Tensor tiled = add_tiled_rows(cat, pos);    // pos tiled over rows
      Tensor shifted = add_rowwise(tiled, bias);
      return sum_all(mul(shifted, shifted));
    };
    CHECK(grad_check(f, {x, pos, bias, table}, 1e-5) < 1e-5);
  }
  SUBCASE("l2 normalize") {
    Tensor x = random_tensor({4, 5}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(l2_normalize_rows(x), w)); }, {x, w}, 1e-5) <
          1e-5);
  }
  SUBCASE("multi-head attention, full and causal") {
    const int batch = 2, seq = 4, heads = 2, dim = 6;
    Tensor q = random_tensor({batch * seq, dim}, rng, 0.7);
    Tensor k = random_tensor({batch * seq, dim}, rng, 0.7);
    Tensor v = random_tensor({batch * seq, dim}, rng, 0.7);
    Tensor w = random_tensor({batch * seq, dim}, rng);
    for (bool causal : {false, true}) {
      auto f = [&]() {
        Tensor o = multihead_self_attention(q, k, v, batch, seq, heads, causal);
        return sum_all(mul(o, w));
      };
      CHECK(grad_check(f, {q, k, v}, 1e-5) < 1e-5);
    }
  }
  SUBCASE("gpo pooling") {
    Tensor tokens = random_tensor({5, 4}, rng);
    Tensor logits = random_tensor({8}, rng);
    Tensor w = random_tensor({1, 4}, rng);
    CHECK(grad_check([&]() { return sum_all(mul(gpo_pool(tokens, logits), w)); },
                     {tokens, logits}, 1e-5) < 1e-5);
  }
  SUBCASE("tal loss") {
    Tensor sims = random_tensor({4, 4}, rng, 0.4);
    const std::vector<int> ids{0, 1, 2, 0};
    CHECK(grad_check([&]() { return tal_loss(sims, ids, ids, 0.1, 0.1); }, {sims}, 1e-6) < 1e-5);
  }
}

TEST_CASE("causal attention has exact zeros above the diagonal") {
  std::mt19937_64 rng(6);
  const int batch = 1, seq = 5, heads = 2, dim = 4;
  Tensor q = random_tensor({batch * seq, dim}, rng);
  Tensor k = random_tensor({batch * seq, dim}, rng);
  Tensor v = random_tensor({batch * seq, dim}, rng);
  std::vector<Mat> capture;
  multihead_self_attention(q, k, v, batch, seq, heads, true, &capture);
  REQUIRE(capture.size() == 1);
  for (int i = 0; i < seq; ++i) {
    double sum = 0.0;
    for (int j = 0; j < seq; ++j) {
      if (j > i) CHECK(capture[0](i, j) == 0.0);
      sum += capture[0](i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("forward is deterministic for identical inputs") {
  std::mt19937_64 rng1(42), rng2(42);
  Tensor a1 = Tensor::randn({8, 8}, rng1, 1.0);
  Tensor a2 = Tensor::randn({8, 8}, rng2, 1.0);
  Tensor o1 = softmax_rows(matmul(a1, a1));
  Tensor o2 = softmax_rows(matmul(a2, a2));
  CHECK(o1.values() == o2.values());
}

TEST_CASE("float32 tensors store float-precision values") {
  Tensor t = Tensor::from_values({2}, {0.1, 1.0 / 3.0}, Dtype::f32);
  CHECK(t.values()[0] == static_cast<double>(0.1f));
  CHECK(t.values()[1] == static_cast<double>(1.0f / 3.0f));
}

TEST_CASE("checkpoint round-trip with manifest validation") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cmret_ckpt_test";
  fs::create_directories(dir);
  const fs::path base = dir / "model";

  std::mt19937_64 rng(11);
  Graph g;
  g.add_parameter("w1", Tensor::randn({3, 4}, rng, 1.0, Dtype::f32));
  g.add_parameter("w2", Tensor::randn({2}, rng, 1.0, Dtype::f64));
  const std::uint64_t checksum = g.value_checksum();

  CheckpointMeta meta;
  meta.config_hash = "deadbeef";
  meta.seed = 9;
  meta.step = 120;
  save_checkpoint(g.parameters(), meta, base);

  Graph g2;
  std::mt19937_64 rng2(99);
  g2.add_parameter("w1", Tensor::randn({3, 4}, rng2, 1.0, Dtype::f32));
  g2.add_parameter("w2", Tensor::randn({2}, rng2, 1.0, Dtype::f64));
  LoadedCheckpoint loaded = load_checkpoint(base);
  CHECK(loaded.meta.config_hash == "deadbeef");
  CHECK(loaded.meta.step == 120);
  restore_parameters(g2, loaded);
  CHECK(g2.value_checksum() == checksum);

  SUBCASE("truncated blob is rejected") {
    fs::resize_file(base.string() + ".bin", 5);
    CHECK_THROWS_AS(load_checkpoint(base), Error);
  }
  fs::remove_all(dir);
}
