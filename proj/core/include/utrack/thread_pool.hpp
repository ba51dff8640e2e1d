#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace utrack {

/// Persistent worker pool. parallel_for(n, fn) runs fn(0..n) across the
/// workers plus the calling thread and blocks until every item finished.
///
/// Claims go through one generation-tagged ticket word (CAS), so a worker
/// waking up late can never consume or execute items of a newer job. Work
/// items must touch disjoint state; execution order is unspecified, so
/// callers own determinism by construction.
class ThreadPool {
 public:
  explicit ThreadPool(int workers = 0) {
    if (workers <= 0)
      workers = static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    workers_ = workers;
    threads_.reserve(static_cast<std::size_t>(workers - 1));
    for (int i = 0; i < workers - 1; ++i)
      threads_.emplace_back([this] { worker_loop(); });
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int workers() const { return workers_; }

  void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (workers_ == 1 || n == 1) {
      for (int i = 0; i < n; ++i) fn(i);
      return;
    }

    std::uint32_t gen;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      job_fn_ = fn;
      job_total_ = n;
      done_.store(0, std::memory_order_relaxed);
      error_ = nullptr;
      gen = ++generation_;
      ticket_.store(static_cast<std::uint64_t>(gen) << 32,
                    std::memory_order_release);
    }
    cv_.notify_all();

    run_items(gen, n);

    std::unique_lock<std::mutex> lock(mutex_);
    done_cv_.wait(lock, [this, n] {
      return done_.load(std::memory_order_acquire) == n;
    });
    if (error_) {
      auto err = error_;
      error_ = nullptr;
      std::rethrow_exception(err);
    }
  }

 private:
  // Claims are CAS-guarded: a ticket is consumed only when its generation
  // matches the job this thread saw, so indices per job stay contiguous.
  void run_items(std::uint32_t gen, int total) {
    std::uint64_t s = ticket_.load(std::memory_order_acquire);
    while (true) {
      if (static_cast<std::uint32_t>(s >> 32) != gen) return;
      const auto i = static_cast<int>(s & 0xffffffffu);
      if (i >= total) return;
      if (!ticket_.compare_exchange_weak(s, s + 1, std::memory_order_acq_rel,
                                         std::memory_order_acquire))
        continue;
      try {
        job_fn_(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mutex_);
        if (!error_) error_ = std::current_exception();
      }
      if (done_.fetch_add(1, std::memory_order_acq_rel) + 1 == total) {
        std::lock_guard<std::mutex> lock(mutex_);
        done_cv_.notify_all();
      }
      s = ticket_.load(std::memory_order_acquire);
    }
  }

  void worker_loop() {
    std::uint32_t seen = 0;
    while (true) {
      std::uint32_t gen;
      int total;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [this, seen] { return stop_ || generation_ != seen; });
        if (stop_) return;
        gen = generation_;
        total = job_total_;
        seen = gen;
      }
      run_items(gen, total);
    }
  }

  int workers_ = 1;
  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable cv_, done_cv_;
  std::function<void(int)> job_fn_;
  int job_total_ = 0;
  std::atomic<std::uint64_t> ticket_{0};
  std::atomic<int> done_{0};
  std::uint32_t generation_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

}  // namespace utrack
