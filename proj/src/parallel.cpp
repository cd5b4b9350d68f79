#include "specbench/parallel.hpp"

#include <cstdlib>
#include <string>

namespace specbench {

int worker_count() {
  if (const char* env = std::getenv("SPECBENCH_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace specbench
