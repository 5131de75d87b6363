#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mmdense {

/// Keeps large feature-map buffers on the heap instead of fresh mmap pages,
/// which otherwise dominate step time through page faults. Call once at
/// program start.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace mmdense
