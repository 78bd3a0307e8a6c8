#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace parefine {

/// Worker count: PAREFINE_THREADS if set and positive, else logical cores.
inline std::size_t configured_threads() {
  if (const char* env = std::getenv("PAREFINE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Fixed-size pool running static partitions of an index range. Each index is
// owned by exactly one task, so per-index results never depend on scheduling.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads) {
    for (std::size_t i = 1; i < threads; ++i) workers_.emplace_back([this, i] { loop(i); });
  }
  ~ThreadPool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }
  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  std::size_t size() const noexcept { return workers_.size() + 1; }

  static ThreadPool& global() {
    static ThreadPool pool(configured_threads());
    return pool;
  }

  void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t parts = std::min(n, size());
    bool expected = false;
    if (parts <= 1 || !busy_.compare_exchange_strong(expected, true)) {
      if (n) body(0, n);
      return;
    }
    std::unique_lock lock(mu_);
    body_ = &body;
    n_ = n;
    parts_ = parts;
    pending_ = parts - 1;
    ++generation_;
    lock.unlock();
    cv_.notify_all();
    body(0, chunk_end(0));
    lock.lock();
    done_.wait(lock, [this] { return pending_ == 0; });
    busy_ = false;
  }

 private:
  std::size_t chunk_end(std::size_t part) const { return n_ * (part + 1) / parts_; }

  void loop(std::size_t id) {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      if (id >= parts_) continue;
      const auto* body = body_;
      const std::size_t begin = n_ * id / parts_, end = chunk_end(id);
      lock.unlock();
      (*body)(begin, end);
      lock.lock();
      if (--pending_ == 0) done_.notify_one();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_;
  const std::function<void(std::size_t, std::size_t)>* body_ = nullptr;
  std::size_t n_ = 0, parts_ = 0, pending_ = 0, generation_ = 0;
  bool stop_ = false;
  std::atomic<bool> busy_{false};
};

template <typename Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::function<void(std::size_t, std::size_t)> fn = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) body(i);
  };
  ThreadPool::global().run(n, fn);
}

}  // namespace parefine
