#pragma once

#include <cstdint>

namespace lmn {

/// Work counters incremented by the kernels that do the counted work.
/// Monotone during a forward pass; reset between measurements.
struct OpCounter {
  std::uint64_t score_macs = 0;        // multiply-accumulates spent on attention scores
  std::uint64_t summarizer_apps = 0;   // pair merges performed by summarizers
  std::uint64_t expander_apps = 0;     // expander (transposed conv) applications

  void reset() { *this = OpCounter{}; }
};

inline OpCounter& op_counter() {
  thread_local OpCounter counter;
  return counter;
}

}  // namespace lmn
