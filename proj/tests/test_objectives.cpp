#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cmret/error.hpp"
#include "cmret/graph.hpp"
#include "cmret/objectives.hpp"

using namespace cmret;

namespace {

BatchSimilarity sims_from(std::vector<double> vals, int b, std::vector<int> row_ids,
                          std::vector<int> col_ids) {
  BatchSimilarity s;
  s.sims = Tensor::from_values({b, b}, std::move(vals), Dtype::f64);
  s.row_ids = std::move(row_ids);
  s.col_ids = std::move(col_ids);
  return s;
}

LossConfig paper_config() {
  LossConfig c;
  c.temperature = 0.015;
  c.margin = 0.1;
  return c;
}

}  // namespace

TEST_CASE("tal is ~0 on a separated batch") {
  auto s = sims_from({1.0, 0.0, 0.0, 1.0}, 2, {0, 1}, {0, 1});
  const double loss = tal_loss(s, paper_config()).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-6);
}

TEST_CASE("tal approaches the margin when negatives equal positives") {
  auto s = sims_from({0.5, 0.5, 0.5, 0.5}, 2, {0, 1}, {0, 1});
  const double loss = tal_loss(s, paper_config()).item();
  CHECK(loss == doctest::Approx(0.1).epsilon(0.02));
}

TEST_CASE("tal is exactly zero with no negatives") {
  auto s = sims_from({0.2, 0.3, 0.1, 0.4}, 2, {7, 7}, {7, 7});
  CHECK(tal_loss(s, paper_config()).item() == 0.0);
}

TEST_CASE("tal rejects anchors without positives") {
  auto s = sims_from({0.2, 0.3, 0.1, 0.4}, 2, {0, 1}, {2, 3});
  CHECK_THROWS_AS(tal_loss(s, paper_config()), Error);
}

TEST_CASE("tal is nonnegative and symmetric under role swap") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int b = 2 + static_cast<int>(rng() % 5);
    std::vector<double> vals(static_cast<size_t>(b) * b);
    for (auto& v : vals) v = dist(rng);
    // symmetric matrix
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < i; ++j) vals[static_cast<size_t>(i) * b + j] = vals[static_cast<size_t>(j) * b + i];
    std::vector<int> ids(static_cast<size_t>(b));
    for (auto& id : ids) id = static_cast<int>(rng() % 3);

    auto s = sims_from(vals, b, ids, ids);
    const double a = tal_loss(s, paper_config()).item();
    CHECK(a >= 0.0);

    // transpose equals itself for a symmetric matrix; swap roles explicitly
    std::vector<double> tvals(vals.size());
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < b; ++j) tvals[static_cast<size_t>(j) * b + i] = vals[static_cast<size_t>(i) * b + j];
    auto st = sims_from(tvals, b, ids, ids);
    const double c = tal_loss(st, paper_config()).item();
    CHECK(a == c);  // exact
  }
}

TEST_CASE("cid closed forms") {
  SUBCASE("uniform logits give ln C") {
    const int c = 10, d = 6, b = 4;
    Tensor cls = Tensor::zeros({c, d}, Dtype::f64);
    std::mt19937_64 rng(2);
    Tensor img = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
    Tensor txt = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
    const double loss = cid_loss(img, txt, {0, 3, 5, 9}, cls).item();
    CHECK(loss == doctest::Approx(std::log(10.0)).epsilon(1e-9));
  }
  SUBCASE("saturated logits give ~0") {
    const int c = 10, d = 10, b = 3;
    std::vector<double> wvals(static_cast<size_t>(c) * d, 0.0);
    for (int i = 0; i < c; ++i) wvals[static_cast<size_t>(i) * d + i] = 50.0;
    Tensor cls = Tensor::from_values({c, d}, std::move(wvals), Dtype::f64);
    std::vector<double> evals(static_cast<size_t>(b) * d, 0.0);
    const std::vector<int> ids{1, 4, 7};
    for (int r = 0; r < b; ++r) evals[static_cast<size_t>(r) * d + ids[static_cast<size_t>(r)]] = 1.0;
    Tensor emb = Tensor::from_values({b, d}, std::move(evals), Dtype::f64);
    const double loss = cid_loss(emb, emb, ids, cls).item();
    CHECK(loss < 1e-20);
  }
  SUBCASE("hand-computed single-row cross entropy") {
    Tensor logits = Tensor::from_values({1, 2}, {1.0, 0.0}, Dtype::f64);
    const double loss = cross_entropy_mean(logits, {0}).item();
    CHECK(loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  }
  SUBCASE("out-of-range identity is a data error") {
    Tensor logits = Tensor::from_values({1, 2}, {1.0, 0.0}, Dtype::f64);
    CHECK_THROWS_AS(cross_entropy_mean(logits, {2}), Error);
  }
}

TEST_CASE("cid is exactly permutation-equivariant in batch order") {
  std::mt19937_64 rng(3);
  const int b = 6, d = 5, c = 4;
  Tensor img = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
  Tensor txt = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
  Tensor cls = Tensor::randn({c, d}, rng, 1.0, Dtype::f64);
  std::vector<int> ids{0, 1, 2, 3, 1, 0};
  const double base = cid_loss(img, txt, ids, cls).item();

  std::vector<int> perm(b);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> pi(img.values().size()), pt(txt.values().size());
  std::vector<int> pids(ids.size());
  for (int r = 0; r < b; ++r) {
    for (int j = 0; j < d; ++j) {
      pi[static_cast<size_t>(r) * d + j] = img.values()[static_cast<size_t>(perm[r]) * d + j];
      pt[static_cast<size_t>(r) * d + j] = txt.values()[static_cast<size_t>(perm[r]) * d + j];
    }
    pids[static_cast<size_t>(r)] = ids[static_cast<size_t>(perm[r])];
  }
  const double permuted =
      cid_loss(Tensor::from_values({b, d}, pi, Dtype::f64),
               Tensor::from_values({b, d}, pt, Dtype::f64), pids, cls)
          .item();
  CHECK(base == permuted);  // exact
}

TEST_CASE("total loss equals the global-only baseline when local is disabled") {
  std::mt19937_64 rng(4);
  const int b = 4, d = 8, c = 3;
  Tensor gi = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
  Tensor gt = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
  Tensor li = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
  Tensor lt = Tensor::randn({b, d}, rng, 1.0, Dtype::f64);
  Tensor cls = Tensor::randn({c, d}, rng, 1.0, Dtype::f64);
  const std::vector<int> ids{0, 1, 2, 0};
  LossConfig cfg = paper_config();

  const double baseline = pair_loss(gi, gt, ids, cls, cfg).item();
  const double no_local = total_loss(gi, gt, li, lt, ids, cls, cfg, false).item();
  CHECK(no_local == baseline);

  const double with_local = total_loss(gi, gt, li, lt, ids, cls, cfg, true).item();
  CHECK(with_local > baseline);  // local term is nonnegative and CID > 0 here
}

TEST_CASE("perfect embeddings on both branches reach the cid floor") {
  const int c = 4, d = 4, b = 4;
  std::vector<double> wvals(static_cast<size_t>(c) * d, 0.0);
  for (int i = 0; i < c; ++i) wvals[static_cast<size_t>(i) * d + i] = 50.0;
  Tensor cls = Tensor::from_values({c, d}, std::move(wvals), Dtype::f64);
  std::vector<double> evals(static_cast<size_t>(b) * d, 0.0);
  const std::vector<int> ids{0, 1, 2, 3};
  for (int r = 0; r < b; ++r) evals[static_cast<size_t>(r) * d + r] = 1.0;
  Tensor emb = Tensor::from_values({b, d}, evals, Dtype::f64);

  const double cid_floor = cid_loss(emb, emb, ids, cls).item();
  const double total = total_loss(emb, emb, emb, emb, ids, cls, paper_config(), true).item();
  CHECK(std::abs(total - 2.0 * cid_floor) < 1e-12);
  CHECK(total < 1e-9);
}

TEST_CASE("gradient of pair loss matches finite differences") {
  std::mt19937_64 rng(5);
  const int b = 3, d = 5, c = 3;
  Tensor img = Tensor::randn({b, d}, rng, 1.0, Dtype::f64, true);
  Tensor txt = Tensor::randn({b, d}, rng, 1.0, Dtype::f64, true);
  Tensor cls = Tensor::randn({c, d}, rng, 1.0, Dtype::f64, true);
  const std::vector<int> ids{0, 1, 2};
  LossConfig cfg = paper_config();
  cfg.temperature = 0.05;  // keep exponents tame for the finite-difference probe
  const double err = grad_check([&]() { return pair_loss(img, txt, ids, cls, cfg); },
                                {img, txt, cls}, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("similarity fusion") {
  Mat g(2, 2), l(2, 2);
  g(0, 0) = 0.8; g(0, 1) = 0.2; g(1, 0) = -0.5; g(1, 1) = 0.9;
  l(0, 0) = 0.6; l(0, 1) = 0.4; l(1, 0) = 0.5; l(1, 1) = -0.1;

  SUBCASE("endpoints are exact") {
    CHECK(fuse_similarity(g, l, 1.0).v == g.v);
    CHECK(fuse_similarity(g, l, 0.0).v == l.v);
  }
  SUBCASE("midpoint arithmetic") {
    CHECK(fuse_similarity(g, l, 0.5)(0, 0) == doctest::Approx(0.7));
  }
  SUBCASE("lambda linearity under argument swap") {
    // dyadic lambdas, where 1 - (1 - lambda) is exact, give bitwise equality
    for (double lam : {0.0, 0.125, 0.25, 0.5, 0.75, 0.875, 1.0}) {
      Mat a = fuse_similarity(g, l, lam);
      Mat b = fuse_similarity(l, g, 1.0 - lam);
      for (size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == b.v[i]);
    }
    for (double lam : {0.3, 0.77}) {
      Mat a = fuse_similarity(g, l, lam);
      Mat b = fuse_similarity(l, g, 1.0 - lam);
      for (size_t i = 0; i < a.v.size(); ++i) CHECK(a.v[i] == doctest::Approx(b.v[i]).epsilon(1e-15));
    }
  }
  SUBCASE("ranking is invariant to a shared constant shift") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      Mat ga(4, 4), la(4, 4);
      for (auto& v : ga.v) v = dist(rng);
      for (auto& v : la.v) v = dist(rng);
      Mat gs = ga, ls = la;
      const double shift = 10.0 * dist(rng);
      for (auto& v : gs.v) v += shift;
      for (auto& v : ls.v) v += shift;
      Mat a = fuse_similarity(ga, la, 0.3);
      Mat b = fuse_similarity(gs, ls, 0.3);
      auto order = [](const Mat& m) {
        std::vector<int> o(m.v.size());
        std::iota(o.begin(), o.end(), 0);
        std::sort(o.begin(), o.end(), [&](int x, int y) {
          if (m.v[static_cast<size_t>(x)] != m.v[static_cast<size_t>(y)])
            return m.v[static_cast<size_t>(x)] > m.v[static_cast<size_t>(y)];
          return x < y;
        });
        return o;
      };
      CHECK(order(a) == order(b));
    }
  }
  SUBCASE("shape mismatch is a conformance error") {
    Mat bad(2, 3);
    CHECK_THROWS_AS(fuse_similarity(g, bad, 0.5), Error);
  }
  SUBCASE("lambda outside [0,1] is a configuration error") {
    CHECK_THROWS_AS(fuse_similarity(g, l, 1.5), Error);
  }
}
