#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cmret/error.hpp"
#include "cmret/mars.hpp"

using namespace cmret;

namespace {

Mat random_stochastic(int s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.01, 1.0);
  Mat m(s, s);
  for (int r = 0; r < s; ++r) {
    double sum = 0.0;
    for (int c = 0; c < s; ++c) {
      m(r, c) = dist(rng);
      sum += m(r, c);
    }
    for (int c = 0; c < s; ++c) m(r, c) /= sum;
  }
  return m;
}

void check_row_stochastic(const Mat& m, double tol) {
  for (int r = 0; r < m.rows; ++r) {
    double sum = 0.0;
    for (int c = 0; c < m.cols; ++c) {
      CHECK(m(r, c) >= 0.0);
      sum += m(r, c);
    }
    CHECK(std::abs(sum - 1.0) < tol);
  }
}

// Definition-literal top-k: i is selected iff fewer than k indices beat it,
// where j beats i when score_j > score_i, or equal score with j < i.
std::vector<int> brute_force_topk(const std::vector<double>& scores, int k) {
  std::vector<int> selected;
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (!std::isfinite(scores[i])) continue;
    int beaten_by = 0;
    for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
      if (j == i || !std::isfinite(scores[j])) continue;
      if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++beaten_by;
    }
    if (beaten_by < k) selected.push_back(i);
  }
  std::sort(selected.begin(), selected.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return selected;
}

}  // namespace

TEST_CASE("prune keeps the identity fixed point at delta 0") {
  Mat eye = Mat::identity(4);
  Mat out = prune_attention(eye, 0.0);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(out(r, c) == doctest::Approx(eye(r, c)).epsilon(1e-12));
}

TEST_CASE("prune hand-computed row") {
  Mat a(3, 3);
  const double rows[3][3] = {{0.5, 0.3, 0.2}, {0.2, 0.5, 0.3}, {0.3, 0.2, 0.5}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = rows[r][c];
  Mat out = prune_attention(a, 1.0 / 3.0);
  CHECK(out(0, 0) == doctest::Approx(0.75 / 0.9).epsilon(1e-9));
  CHECK(out(0, 1) == doctest::Approx(0.15 / 0.9).epsilon(1e-9));
  CHECK(out(0, 2) == 0.0);
}

TEST_CASE("full discard collapses to the identity") {
  std::mt19937_64 rng(3);
  Mat a = random_stochastic(5, rng);
  Mat out = prune_attention(a, 1.0);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) CHECK(out(r, c) == doctest::Approx(r == c ? 1.0 : 0.0));
}

TEST_CASE("prune output is row-stochastic for any delta; discard zero bound holds") {
  std::mt19937_64 rng(4);
  for (double delta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    for (int trial = 0; trial < 20; ++trial) {
      const int s = 2 + static_cast<int>(rng() % 12);
      Mat a = random_stochastic(s, rng);  // strictly positive entries
      Mat dropped = discard_smallest(a, delta);
      const int expected_zeros = static_cast<int>(std::floor(delta * s));
      for (int r = 0; r < s; ++r) {
        int zeros = 0;
        for (int c = 0; c < s; ++c) zeros += dropped(r, c) == 0.0 ? 1 : 0;
        CHECK(zeros >= expected_zeros);
      }
      Mat out = prune_attention(a, delta);
      check_row_stochastic(out, 1e-6);
    }
  }
}

TEST_CASE("negative attention entries are rejected") {
  Mat a = Mat::identity(3);
  a(0, 1) = -0.1;
  CHECK_THROWS_AS(prune_attention(a, 0.0), Error);
}

TEST_CASE("aggregation composes left to right over depth") {
  SUBCASE("identity stack") {
    std::vector<Mat> stack{Mat::identity(3), Mat::identity(3)};
    AggregatedMap m = aggregate_layers(stack, 0, std::vector<bool>(3, true));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) CHECK(m.R(r, c) == doctest::Approx(r == c ? 1.0 : 0.0));
  }
  SUBCASE("hand product") {
    Mat a1(2, 2), a2(2, 2);
    a1(0, 0) = 0.5; a1(0, 1) = 0.5; a1(1, 0) = 0.0; a1(1, 1) = 1.0;
    a2(0, 0) = 1.0; a2(0, 1) = 0.0; a2(1, 0) = 0.5; a2(1, 1) = 0.5;
    std::vector<Mat> stack{a1, a2};
    AggregatedMap m = aggregate_layers(stack, 0, std::vector<bool>(2, true));
    CHECK(m.R(0, 0) == doctest::Approx(0.75));
    CHECK(m.R(0, 1) == doctest::Approx(0.25));
    CHECK(m.R(1, 0) == doctest::Approx(0.5));
    CHECK(m.R(1, 1) == doctest::Approx(0.5));
  }
  SUBCASE("random stacks stay row-stochastic") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const int s = 2 + static_cast<int>(rng() % 10);
      const int layers = 1 + static_cast<int>(rng() % 6);
      std::vector<Mat> stack;
      for (int l = 0; l < layers; ++l) stack.push_back(prune_attention(random_stochastic(s, rng), 0.25));
      AggregatedMap m = aggregate_layers(stack, 0, std::vector<bool>(static_cast<size_t>(s), true));
      check_row_stochastic(m.R, 1e-5);
    }
  }
  SUBCASE("dimension mismatch is a conformance error") {
    std::vector<Mat> stack{Mat::identity(3), Mat::identity(4)};
    CHECK_THROWS_AS(aggregate_layers(stack, 0, std::vector<bool>(3, true)), Error);
  }
}

TEST_CASE("token scores mask invalid positions") {
  SUBCASE("identity map leaves all token scores zero") {
    AggregatedMap m;
    m.R = Mat::identity(4);
    m.anchor_index = 0;
    m.valid = {false, true, true, true};
    auto scores = token_scores(m);
    CHECK(!std::isfinite(scores[0]));
    for (int i = 1; i < 4; ++i) CHECK(scores[i] == 0.0);
    auto top = select_topk(scores, 2);
    CHECK(top == std::vector<int>{1, 2});
  }
  SUBCASE("anchor row passes through") {
    AggregatedMap m;
    m.R = Mat(4, 4);
    m.R(3, 0) = 0.0; m.R(3, 1) = 0.1; m.R(3, 2) = 0.5; m.R(3, 3) = 0.4;
    m.anchor_index = 3;
    m.valid = {false, true, true, false};
    auto scores = token_scores(m);
    CHECK(scores[1] == doctest::Approx(0.1));
    CHECK(scores[2] == doctest::Approx(0.5));
    CHECK(!std::isfinite(scores[0]));
    CHECK(!std::isfinite(scores[3]));
  }
  SUBCASE("padded text yields exactly the valid count of finite scores") {
    AggregatedMap m;
    m.R = Mat::identity(5);
    m.anchor_index = 3;  // EOS slot
    m.valid = {false, true, true, false, false};
    auto scores = token_scores(m);
    int finite = 0;
    for (double v : scores) finite += std::isfinite(v) ? 1 : 0;
    CHECK(finite == 2);
  }
  SUBCASE("anchor outside the map is a contract error") {
    AggregatedMap m;
    m.R = Mat::identity(3);
    m.anchor_index = 7;
    m.valid = std::vector<bool>(3, true);
    CHECK_THROWS_AS(token_scores(m), Error);
  }
}

TEST_CASE("select_topk matches the spec examples") {
  std::vector<double> scores{0.1, 0.4, 0.4, 0.2};
  CHECK(select_topk(scores, 2) == std::vector<int>{1, 2});
  CHECK(select_topk(scores, 4) == std::vector<int>{1, 2, 3, 0});

  std::vector<double> equal(5, 0.7);
  CHECK(select_topk(equal, 3) == std::vector<int>{0, 1, 2});

  CHECK_THROWS_AS(select_topk(scores, 5), Error);
}

TEST_CASE("select_topk equals the brute-force oracle on 1000 random vectors") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> quantized(0, 6);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 24);
    std::vector<double> scores(static_cast<size_t>(n));
    for (auto& v : scores) v = quantized(rng) / 7.0;  // duplicates are common
    if (trial % 3 == 0 && n > 2) scores[rng() % n] = kneg_inf;
    int finite = 0;
    for (double v : scores) finite += std::isfinite(v) ? 1 : 0;
    if (finite == 0) continue;
    const int k = 1 + static_cast<int>(rng() % finite);
    CHECK(select_topk(scores, k) == brute_force_topk(scores, k));
  }
}

TEST_CASE("positive rescaling never changes the selected set") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 12);
    std::vector<double> scores(static_cast<size_t>(n));
    for (auto& v : scores) v = dist(rng);
    const int k = 1 + static_cast<int>(rng() % n);
    auto base = select_topk(scores, k);
    std::vector<double> scaled = scores;
    const double factor = 0.001 + 17.0 * dist(rng);
    for (auto& v : scaled) v *= factor;
    CHECK(select_topk(scaled, k) == base);
  }
}

TEST_CASE("baseline selection strategies") {
  SUBCASE("uniform attention gives constant scores") {
    AttentionStack stack;
    Mat uniform(4, 4);
    for (auto& v : uniform.v) v = 0.25;
    stack.layers.push_back(uniform);
    std::vector<bool> all(4, true);
    for (auto strat : {SelectionStrategy::MinMean, SelectionStrategy::MaxMean,
                       SelectionStrategy::MinStd, SelectionStrategy::MaxStd}) {
      auto scores = baseline_strategy_scores(stack, strat, all, all);
      for (int i = 1; i < 4; ++i) CHECK(scores[i] == doctest::Approx(scores[0]));
      CHECK(select_topk(scores, 2) == std::vector<int>{0, 1});
    }
  }
  SUBCASE("token with double incoming mass: B ranks it first, A last") {
    AttentionStack stack;
    Mat a(3, 3);
    // each row stochastic; column 1 receives twice the mass of columns 0/2
    for (int r = 0; r < 3; ++r) {
      a(r, 0) = 0.25; a(r, 1) = 0.5; a(r, 2) = 0.25;
    }
    stack.layers.push_back(a);
    std::vector<bool> all(3, true);
    auto b_scores = baseline_strategy_scores(stack, SelectionStrategy::MaxMean, all, all);
    CHECK(select_topk(b_scores, 1) == std::vector<int>{1});
    auto a_scores = baseline_strategy_scores(stack, SelectionStrategy::MinMean, all, all);
    auto order = select_topk(a_scores, 3);
    CHECK(order.back() == 1);
  }
  SUBCASE("constant incoming values give zero std everywhere") {
    AttentionStack stack;
    Mat a(3, 3);
    for (int r = 0; r < 3; ++r) {
      a(r, 0) = 0.2; a(r, 1) = 0.3; a(r, 2) = 0.5;
    }
    stack.layers.push_back(a);
    std::vector<bool> all(3, true);
    auto scores = baseline_strategy_scores(stack, SelectionStrategy::MaxStd, all, all);
    for (double v : scores) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("attention entropy closed forms") {
  SUBCASE("uniform rows over 4 valid tokens") {
    Mat a(4, 4);
    for (auto& v : a.v) v = 0.25;
    CHECK(attention_entropy(a, std::vector<bool>(4, true)) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-9));
  }
  SUBCASE("one-hot rows have zero entropy") {
    Mat a = Mat::identity(5);
    CHECK(attention_entropy(a, std::vector<bool>(5, true)) == doctest::Approx(0.0));
  }
  SUBCASE("half-mass rows") {
    Mat a(4, 4);
    for (int r = 0; r < 4; ++r) {
      a(r, 0) = 0.5;
      a(r, 1) = 0.5;
    }
    std::vector<bool> valid{true, true, true, true};
    CHECK(attention_entropy(a, valid) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SUBCASE("empty valid set is a contract error") {
    Mat a = Mat::identity(3);
    CHECK_THROWS_AS(attention_entropy(a, std::vector<bool>(3, false)), Error);
  }
}

TEST_CASE("layer thirds and layer-set parsing") {
  CHECK(layer_group_indices(6, LayerGroup::Early) == std::vector<int>{0, 1});
  CHECK(layer_group_indices(6, LayerGroup::Middle) == std::vector<int>{2, 3});
  CHECK(layer_group_indices(6, LayerGroup::Late) == std::vector<int>{4, 5});

  CHECK(parse_layer_set("ml", 6) == std::vector<int>{2, 3, 4, 5});
  CHECK(parse_layer_set("eml", 6) == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(parse_layer_set("single:3", 6) == std::vector<int>{3});
  CHECK(parse_layer_set("0,2,5", 6) == std::vector<int>{0, 2, 5});
  CHECK_THROWS_AS(parse_layer_set("single:9", 6), Error);
  CHECK_THROWS_AS(parse_layer_set("xq", 6), Error);
}

TEST_CASE("diverse selection reduces to plain top-k at beta 0 and penalizes duplicates") {
  std::vector<double> scores{0.9, 0.89, 0.2};
  Mat tokens(3, 2);
  tokens(0, 0) = 1.0; tokens(0, 1) = 0.0;   // same direction as token 1
  tokens(1, 0) = 1.0; tokens(1, 1) = 0.001;
  tokens(2, 0) = 0.0; tokens(2, 1) = 1.0;   // orthogonal
  CHECK(select_topk_diverse(scores, 2, tokens, 0.0) == std::vector<int>{0, 1});
  CHECK(select_topk_diverse(scores, 2, tokens, 10.0) == std::vector<int>{0, 2});
}
