#pragma once

#include <cstdint>

namespace unorm::opcount {

// Thread-local counters for divisions and square roots performed by
// normalization layers at inference time. The fused inference path never
// touches these; the benchmark reads them to attribute per-item costs.

struct Counts {
  std::uint64_t divisions = 0;
  std::uint64_t sqrts = 0;
};

inline Counts& counters() {
  thread_local Counts c;
  return c;
}

inline void reset() { counters() = Counts{}; }
inline void add_divisions(std::uint64_t n) { counters().divisions += n; }
inline void add_sqrts(std::uint64_t n) { counters().sqrts += n; }
inline std::uint64_t divisions() { return counters().divisions; }
inline std::uint64_t sqrts() { return counters().sqrts; }

}  // namespace unorm::opcount
