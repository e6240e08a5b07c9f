#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cutout {

/// Training allocates and frees multi-megabyte im2col buffers every batch.
/// With glibc's defaults each of those becomes an mmap/munmap pair, which
/// costs more than the convolutions themselves on small images. Keeping them
/// on the heap removes that overhead. Call once at program start.
inline void configure_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
}

} // namespace cutout
