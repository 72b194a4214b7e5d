#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace cmret {

// 64-byte aligned allocator for numeric buffers. SIMD kernels peel loops
// based on pointer alignment; pinning the alignment makes every run of a
// computation take the identical code path, which the bit-exact determinism
// contracts (checkpoints, metric reports) rely on.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    ::operator delete(p, n * sizeof(T), std::align_val_t(alignment));
  }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

}  // namespace cmret
