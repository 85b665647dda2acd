#pragma once

namespace csformer {

/// Keeps large freed blocks in the heap instead of returning them to the OS,
/// so repeated forward/backward passes reuse already-mapped pages. Call once
/// at program start; a no-op outside glibc.
void tune_allocator();

}  // namespace csformer
