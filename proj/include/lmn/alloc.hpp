#pragma once

// Byte accounting for every tensor buffer. Peak memory in benchmarks is read
// from these counters instead of OS RSS.

#include <atomic>
#include <cstddef>
#include <new>
#include <vector>

namespace lmn {

struct AllocCounters {
  std::atomic<std::size_t> current{0};
  std::atomic<std::size_t> peak{0};
  std::atomic<std::size_t> allocations{0};
  std::atomic<std::size_t> limit{0};  // 0: unlimited
};

inline AllocCounters& alloc_counters() {
  static AllocCounters counters;
  return counters;
}

inline std::size_t allocated_bytes() { return alloc_counters().current.load(std::memory_order_relaxed); }
inline std::size_t peak_allocated_bytes() { return alloc_counters().peak.load(std::memory_order_relaxed); }

/// Tracked allocations that would push the live total above `bytes` throw
/// std::bad_alloc. 0 removes the limit.
inline void set_allocation_limit(std::size_t bytes) { alloc_counters().limit.store(bytes, std::memory_order_relaxed); }

namespace detail {

inline void note_alloc(std::size_t bytes) {
  auto& c = alloc_counters();
  const std::size_t now = c.current.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  c.allocations.fetch_add(1, std::memory_order_relaxed);
  std::size_t seen = c.peak.load(std::memory_order_relaxed);
  while (now > seen && !c.peak.compare_exchange_weak(seen, now, std::memory_order_relaxed)) {
  }
}

inline void note_free(std::size_t bytes) {
  alloc_counters().current.fetch_sub(bytes, std::memory_order_relaxed);
}

}  // namespace detail

/// Allocator used by all tensor storage. 64-byte aligned so the compiler can
/// use aligned vector loads in the inner kernels.
template <class T>
struct TrackedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    const std::size_t limit = alloc_counters().limit.load(std::memory_order_relaxed);
    if (limit != 0 && allocated_bytes() + bytes > limit) throw std::bad_alloc();
    T* p = static_cast<T*>(::operator new(bytes, alignment));
    detail::note_alloc(bytes);
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    detail::note_free(n * sizeof(T));
    ::operator delete(p, alignment);
  }

  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, TrackedAllocator<T>>;

/// Measures the high-water mark of tracked bytes above the level live at
/// construction. Scopes must not nest.
class PeakScope {
 public:
  PeakScope() : start_(allocated_bytes()) { alloc_counters().peak.store(start_, std::memory_order_relaxed); }

  std::size_t peak_bytes() const {
    const std::size_t p = peak_allocated_bytes();
    return p > start_ ? p - start_ : 0;
  }

 private:
  std::size_t start_;
};

}  // namespace lmn
