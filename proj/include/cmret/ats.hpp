#pragma once

#include <cstdint>

namespace cmret {

enum class ScheduleGranularity { Step, Epoch };

// Exponential annealing of the retention budget from a coarse start ratio to
// a fine end ratio over a horizon of T steps (or epochs).
struct RetentionSchedule {
  int token_count{0};            // N
  double rho_start{0.65};
  double rho_end{0.5};
  std::int64_t horizon{1};       // T
  ScheduleGranularity granularity{ScheduleGranularity::Step};
};

// Throws a configuration error unless 0 < rho_end <= rho_start <= 1,
// floor(N * rho_end) >= 1 and horizon >= 1.
void validate_schedule(const RetentionSchedule& schedule);

// k_t = floor(N * rho_start * (rho_end / rho_start)^(t/T)) for t <= T,
// floor(N * rho_end) afterwards; never below 1.
int budget_at(const RetentionSchedule& schedule, std::int64_t t);

// min(k, finite_scores); keeps short captions from over-committing the bank.
int clamp_budget(int k, int finite_scores);

}  // namespace cmret
