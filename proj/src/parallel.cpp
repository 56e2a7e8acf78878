#include "rlab/parallel.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace rlab {

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  const size_t w = std::min(n, static_cast<size_t>(std::max(1, workers)));
  if (w <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(w);
  std::vector<std::thread> threads;
  threads.reserve(w);
  const size_t chunk = (n + w - 1) / w;
  for (size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (size_t i = t * chunk; i < std::min(n, (t + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace rlab
