#include "perp/optim.hpp"

#include <cmath>
#include <string>

namespace perp {

LrSchedule::LrSchedule(double peak, std::int64_t total, std::int64_t warmup)
    : peak_(peak), total_(total), warmup_(warmup) {
  if (total <= 0) throw ConfigError("schedule: total_iters must be positive");
  // warmup == total only arises for single-step budgets; the decay segment is then empty.
  if (warmup <= 0 || warmup > total || (warmup == total && total > 1)) {
    throw ConfigError("schedule: need 0 < warmup_iters < total_iters, got warmup=" + std::to_string(warmup) +
                      " total=" + std::to_string(total));
  }
  if (!(peak >= 0.0) || !std::isfinite(peak)) throw ConfigError("schedule: peak lr must be finite and >= 0");
}

LrSchedule LrSchedule::with_default_warmup(double peak, std::int64_t total) {
  if (total <= 0) throw ConfigError("schedule: total_iters must be positive");
  auto warmup = static_cast<std::int64_t>(std::ceil(0.10 * static_cast<double>(total)));
  return LrSchedule(peak, total, warmup);
}

double LrSchedule::at(std::int64_t iter) const {
  if (iter < 0 || iter > total_) {
    throw ContractError("lr_at: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(total_) + "]");
  }
  if (iter <= warmup_) return peak_ * static_cast<double>(iter) / static_cast<double>(warmup_);
  return peak_ * static_cast<double>(total_ - iter) / static_cast<double>(total_ - warmup_);
}

}  // namespace perp
