#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace chprune {

// Keeps large activation buffers on the heap instead of fresh mmap/munmap
// pairs per allocation; training otherwise spends a third of its time in
// page faults. Call once at program start.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace chprune
