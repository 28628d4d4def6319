#pragma once

#include <cstddef>
#include <cstdint>

namespace lmnet {

// Multiply-accumulate tally. Ops report into the meter installed on the
// current thread, if any.
struct CostMeter {
  std::uint64_t macs = 0;
};

inline thread_local CostMeter* g_cost_meter = nullptr;

inline void report_macs(std::uint64_t macs) {
  if (g_cost_meter) g_cost_meter->macs += macs;
}

class CostScope {
 public:
  explicit CostScope(CostMeter& meter) : prev_(g_cost_meter) { g_cost_meter = &meter; }
  // Suspends counting for internal helper work.
  explicit CostScope(std::nullptr_t) : prev_(g_cost_meter) { g_cost_meter = nullptr; }
  ~CostScope() { g_cost_meter = prev_; }
  CostScope(const CostScope&) = delete;
  CostScope& operator=(const CostScope&) = delete;

 private:
  CostMeter* prev_;
};

}  // namespace lmnet
