#pragma once

#include <cstddef>
#include <functional>

namespace keycache {

/// Runs body(i) for i in [0, n) on up to `threads` workers, each taking a
/// contiguous block. threads <= 1 runs inline in index order. Bodies must
/// write only to slots owned by their index.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace keycache
