#include "perc/threads.hpp"

#include <cstdlib>
#include <thread>

namespace perc {

int max_threads() {
  static int cached = [] {
    if (const char* env = std::getenv("PERCO_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cached;
}

}  // namespace perc
