#include "cmret/ats.hpp"

#include <cmath>
#include <string>

#include "cmret/error.hpp"

namespace cmret {

void validate_schedule(const RetentionSchedule& s) {
  if (!(s.rho_end > 0.0 && s.rho_end <= s.rho_start && s.rho_start <= 1.0)) {
    fail(ErrorKind::Config, "retention schedule requires 0 < rho_end <= rho_start <= 1, got " +
                                std::to_string(s.rho_start) + " -> " + std::to_string(s.rho_end));
  }
  if (s.token_count < 1) {
    fail(ErrorKind::Config, "retention schedule needs a positive token count");
  }
  if (std::floor(s.token_count * s.rho_end) < 1.0) {
    fail(ErrorKind::Config, "retention schedule floor(N * rho_end) must be at least 1");
  }
  if (s.horizon < 1) {
    fail(ErrorKind::Config, "retention schedule horizon must be at least 1");
  }
}

int budget_at(const RetentionSchedule& s, std::int64_t t) {
  validate_schedule(s);
  if (t < 0) fail(ErrorKind::Contract, "budget_at: step must be non-negative");
  double k;
  if (t <= s.horizon) {
    const double exponent = static_cast<double>(t) / static_cast<double>(s.horizon);
    k = std::floor(s.token_count * s.rho_start * std::pow(s.rho_end / s.rho_start, exponent));
  } else {
    k = std::floor(s.token_count * s.rho_end);
  }
  return std::max(1, static_cast<int>(k));
}

int clamp_budget(int k, int finite_scores) {
  if (finite_scores < 1) {
    fail(ErrorKind::Contract, "clamp_budget: need at least one selectable token");
  }
  return std::min(k, finite_scores);
}

}  // namespace cmret
