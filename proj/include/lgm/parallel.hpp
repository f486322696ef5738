#pragma once

#include <cstddef>
#include <functional>

namespace lgm {

// Worker count used by the kernels. 1 (the default) runs everything on the
// calling thread. Work is split into fixed contiguous chunks and every output
// element is reduced by exactly one worker in a fixed order, so results are
// bit-identical for any thread count.
void set_num_threads(int n);
int num_threads();

// Calls body(begin, end) over a static partition of [0, n).
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace lgm
