#pragma once

#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace mrsim {

/// Fixed-size worker pool running static-partition parallel loops.
///
/// Work is split into contiguous chunks by index; callers write results into
/// per-index slots and reduce them afterwards with pairwise_sum, so numeric
/// output is independent of the thread count.
class ThreadPool {
public:
    explicit ThreadPool(unsigned threads = 1);
    ~ThreadPool();
    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    unsigned size() const noexcept { return threads_; }

    /// Smallest index range handed to one worker; shorter loops run inline.
    static constexpr std::size_t kGrain = 1024;

    /// Calls body(begin, end) over a partition of [0, n). Blocks until done.
    /// The first exception thrown by any chunk is rethrown on the caller.
    void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

private:
    void worker_loop(unsigned id);

    unsigned threads_;
    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable start_cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t, std::size_t)>* body_ = nullptr;
    std::size_t n_ = 0;
    unsigned parts_ = 1;
    std::size_t generation_ = 0;
    unsigned pending_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

/// Thread count from MR_SIM_THREADS, or 1 when unset or invalid.
unsigned threads_from_env();

/// Fixed-order pairwise summation; the result depends only on the values.
double pairwise_sum(std::span<const double> values) noexcept;

}  // namespace mrsim
