#include "patchlens/runtime.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace patchlens {

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace patchlens
