#pragma once

// Process-level allocator settings for training runs.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace densepipe {

/// Training allocates and frees multi-megabyte activations every step. glibc
/// would otherwise hand those back to the kernel and fault them in again, so
/// keep freed memory in the heap instead.
inline void keep_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace densepipe
