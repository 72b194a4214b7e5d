#include <doctest.h>

#include <cmath>

#include "cmret/ats.hpp"
#include "cmret/error.hpp"

using namespace cmret;

namespace {

RetentionSchedule paper_schedule(int n, std::int64_t horizon) {
  RetentionSchedule s;
  s.token_count = n;
  s.rho_start = 0.65;
  s.rho_end = 0.5;
  s.horizon = horizon;
  return s;
}

}  // namespace

TEST_CASE("budget matches direct schedule arithmetic") {
  RetentionSchedule s = paper_schedule(192, 1000);
  CHECK(budget_at(s, 0) == 124);          // floor(192 * 0.65)
  CHECK(budget_at(s, 1000) == 96);        // floor(192 * 0.5)
  CHECK(budget_at(s, 2000) == 96);        // plateau

  RetentionSchedule s100 = paper_schedule(192, 100);
  CHECK(budget_at(s100, 50) == 109);      // floor(124.8 * (0.5/0.65)^0.5)
}

TEST_CASE("invalid rho ordering is a configuration error") {
  RetentionSchedule s = paper_schedule(192, 100);
  s.rho_start = 0.4;  // below rho_end
  CHECK_THROWS_AS(budget_at(s, 0), Error);

  RetentionSchedule zero = paper_schedule(192, 100);
  zero.rho_end = 0.0;
  CHECK_THROWS_AS(budget_at(zero, 0), Error);

  RetentionSchedule tiny = paper_schedule(1, 100);
  tiny.rho_end = 0.5;  // floor(1 * 0.5) = 0
  CHECK_THROWS_AS(budget_at(tiny, 0), Error);
}

TEST_CASE("budget is monotone non-increasing and bounded by the endpoints") {
  RetentionSchedule s = paper_schedule(77, 321);
  const int hi = static_cast<int>(std::floor(77 * 0.65));
  const int lo = static_cast<int>(std::floor(77 * 0.5));
  int prev = budget_at(s, 0);
  CHECK(prev == hi);
  for (std::int64_t t = 1; t <= 2 * s.horizon; ++t) {
    const int k = budget_at(s, t);
    CHECK(k <= prev);
    CHECK(k >= lo);
    CHECK(k <= hi);
    prev = k;
  }
  CHECK(budget_at(s, s.horizon) == lo);
}

TEST_CASE("equal ratios collapse to a constant schedule") {
  RetentionSchedule s = paper_schedule(50, 200);
  s.rho_start = s.rho_end = 0.6;
  for (std::int64_t t : {0LL, 1LL, 57LL, 200LL, 500LL}) CHECK(budget_at(s, t) == 30);
}

TEST_CASE("step and epoch schedules agree at epoch boundaries") {
  const int steps_per_epoch = 37;
  RetentionSchedule epoch = paper_schedule(100, 12);
  epoch.granularity = ScheduleGranularity::Epoch;
  RetentionSchedule step = paper_schedule(100, 12 * steps_per_epoch);
  for (int e = 0; e <= 20; ++e) {
    CHECK(budget_at(epoch, e) == budget_at(step, static_cast<std::int64_t>(e) * steps_per_epoch));
  }
}

TEST_CASE("clamp keeps budgets within the available tokens") {
  CHECK(clamp_budget(96, 12) == 12);
  CHECK(clamp_budget(5, 32) == 5);
  CHECK(clamp_budget(1, 1) == 1);
  CHECK_THROWS_AS(clamp_budget(3, 0), Error);
}

TEST_CASE("negative step is rejected") {
  RetentionSchedule s = paper_schedule(10, 5);
  CHECK_THROWS_AS(budget_at(s, -1), Error);
}
