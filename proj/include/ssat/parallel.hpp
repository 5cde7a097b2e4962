#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ssat/common.hpp"

namespace ssat {

// Persistent worker pool with static range partitioning. Every index is owned
// by exactly one contiguous chunk and each chunk runs sequentially, so results
// are bitwise reproducible for any worker count.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int workers() const { return workers_; }

  // fn(begin, end) over [0, n). Serial when n is small or when called from
  // inside a worker (no nested parallelism).
  void parallel_for(std::size_t n, std::size_t grain, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const int parts = workers_;
    if (parts <= 1 || n < grain * 2 || in_worker_) {
      fn(0, n);
      return;
    }
    std::lock_guard<std::mutex> run_lock(run_mutex_);
    job_ = &fn;
    job_n_ = n;
    job_parts_ = static_cast<std::size_t>(parts);
    pending_.store(parts - 1, std::memory_order_relaxed);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      ++generation_;
    }
    cv_.notify_all();
    in_worker_ = true;  // nested calls from this chunk run serial
    run_chunk(0);
    in_worker_ = false;
    std::unique_lock<std::mutex> lk(done_mutex_);
    done_cv_.wait(lk, [&] { return pending_.load(std::memory_order_acquire) == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

 private:
  ThreadPool() {
#if defined(__GLIBC__)
    // keep multi-MB tensor buffers on the heap instead of mmap round trips
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("SSAT_THREADS")) {
      const int cap = std::atoi(env);
      if (cap >= 1) n = cap;
    }
    workers_ = n;
    for (int i = 1; i < n; ++i) {
      threads_.emplace_back([this, i] { worker_loop(static_cast<std::size_t>(i)); });
    }
  }

  void run_chunk(std::size_t part) {
    const std::size_t chunk = (job_n_ + job_parts_ - 1) / job_parts_;
    const std::size_t begin = part * chunk;
    const std::size_t end = std::min(job_n_, begin + chunk);
    if (begin < end) (*job_)(begin, end);
  }

  void worker_loop(std::size_t part) {
    in_worker_ = true;
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      run_chunk(part);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(done_mutex_);
        done_cv_.notify_one();
      }
    }
  }

  int workers_ = 1;
  std::vector<std::thread> threads_;
  std::mutex run_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::mutex done_mutex_;
  std::condition_variable done_cv_;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
  std::size_t job_n_ = 0;
  std::size_t job_parts_ = 1;
  std::atomic<int> pending_{0};
  static thread_local bool in_worker_;
};

inline thread_local bool ThreadPool::in_worker_ = false;

inline void parallel_for(std::size_t n, std::size_t grain, const std::function<void(std::size_t, std::size_t)>& fn) {
  ThreadPool::instance().parallel_for(n, grain, fn);
}

}  // namespace ssat
