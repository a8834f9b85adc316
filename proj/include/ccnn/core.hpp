#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ccnn {

class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

class parse_error : public error {
 public:
  parse_error(const std::string& what, int line)
      : error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw error(msg);
}

// Shortest decimal form that round-trips exactly through parsing.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline int hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Static range split. Each index is owned by exactly one worker and the
// per-index work is order-independent across workers, so outputs are
// identical for any thread count.
inline void parallel_for(std::int64_t count,
                         const std::function<void(std::int64_t, std::int64_t)>& body,
                         std::int64_t serial_below = 4096) {
  if (count <= 0) return;
  int workers = hardware_threads();
  if (workers <= 1 || count < serial_below) {
    body(0, count);
    return;
  }
  if (static_cast<std::int64_t>(workers) > count) workers = static_cast<int>(count);
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers) - 1);
  std::int64_t chunk = (count + workers - 1) / workers;
  for (int t = 1; t < workers; ++t) {
    std::int64_t lo = t * chunk;
    std::int64_t hi = std::min<std::int64_t>(count, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(0, std::min<std::int64_t>(count, chunk));
  for (auto& th : threads) th.join();
}

}  // namespace ccnn
