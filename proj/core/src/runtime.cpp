#include "pbrl/runtime.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pbrl {

void tune_allocator_for_tensors() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace pbrl
