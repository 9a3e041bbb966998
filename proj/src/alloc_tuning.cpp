#include "ctxseg/common.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ctxseg {

void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace ctxseg
