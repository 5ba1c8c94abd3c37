#pragma once

namespace sslab {

// Keeps freed blocks in the heap instead of returning them to the kernel.
// Training churns through many short-lived buffers; without this most time
// goes to page faults. No-op off glibc.
void tune_allocator();

}  // namespace sslab
