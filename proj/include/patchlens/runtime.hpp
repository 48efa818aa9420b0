#pragma once

namespace patchlens {

/// Keeps large tensor buffers on the heap instead of fresh mmap pages. Every
/// training step allocates and frees the same sizes, and page faults on new
/// mappings otherwise cost about a quarter of the step time. No-op outside
/// glibc.
void tune_allocator();

}  // namespace patchlens
