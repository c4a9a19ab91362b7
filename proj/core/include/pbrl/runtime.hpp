#pragma once

namespace pbrl {

/// Population tensors are allocated and freed at a high rate.  With glibc's
/// default mmap threshold every ~128KB block becomes an mmap/munmap pair plus
/// page faults, which costs more than the arithmetic on small networks.
/// Raising the threshold keeps those blocks on the reusable heap.  Safe to
/// call more than once; a no-op on non-glibc platforms.
void tune_allocator_for_tensors();

}  // namespace pbrl
