#pragma once

#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#define STNREID_VERSION "stnreid-0.1.0"

namespace stnreid {

// Hard-error type carrying the subsystem that raised it. The CLI turns these
// into a single "ERROR:<module>:<message>" line and exit code 1.
class Error : public std::runtime_error {
public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(module + ":" + message), module_(std::move(module)) {}

  const std::string& module() const { return module_; }

private:
  std::string module_;
};

[[noreturn]] inline void fail(const std::string& module, const std::string& message) {
  throw Error(module, message);
}

inline void require(bool cond, const std::string& module, const std::string& message) {
  if (!cond) fail(module, message);
}

// Runs fn(i) for i in [0, n). Work items must be independent; results must not
// depend on scheduling. Used only on read-only (inference) paths.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  std::exception_ptr first_error = nullptr;
  std::mutex mtx;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (int i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mtx);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace stnreid
