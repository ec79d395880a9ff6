#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace qmoe::detail {

// Runs fn(begin, end) over contiguous ranges of [0, count) on up to `workers`
// threads. The first exception thrown by any range is rethrown.
template <typename Fn>
void parallel_ranges(std::size_t count, unsigned workers, Fn&& fn) {
  const std::size_t n = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (n <= 1) {
    fn(std::size_t{0}, count);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> threads;
    threads.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t begin = count * t / n;
      const std::size_t end = count * (t + 1) / n;
      threads.emplace_back([&, t, begin, end] {
        try {
          fn(begin, end);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace qmoe::detail
