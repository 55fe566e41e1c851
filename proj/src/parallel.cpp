#include "mrsim/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

namespace mrsim {

ThreadPool::ThreadPool(unsigned threads) : threads_(threads == 0 ? 1 : threads) {
    for (unsigned id = 1; id < threads_; ++id) workers_.emplace_back([this, id] { worker_loop(id); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard lock(mutex_);
        stop_ = true;
    }
    start_cv_.notify_all();
    for (auto& w : workers_) w.join();
}

namespace {
std::pair<std::size_t, std::size_t> chunk(std::size_t n, unsigned parts, unsigned id) {
    const std::size_t base = n / parts, extra = n % parts;
    const std::size_t begin = id * base + std::min<std::size_t>(id, extra);
    return {begin, begin + base + (id < extra ? 1 : 0)};
}
}  // namespace

void ThreadPool::parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    const unsigned parts = static_cast<unsigned>(std::min<std::size_t>(threads_, n / kGrain));
    if (parts <= 1) {
        body(0, n);
        return;
    }
    {
        std::lock_guard lock(mutex_);
        body_ = &body;
        n_ = n;
        parts_ = parts;
        pending_ = threads_ - 1;
        error_ = nullptr;
        ++generation_;
    }
    start_cv_.notify_all();

    std::exception_ptr mine;
    try {
        const auto [b, e] = chunk(n, parts, 0);
        body(b, e);
    } catch (...) {
        mine = std::current_exception();
    }

    std::unique_lock lock(mutex_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
    if (mine) std::rethrow_exception(mine);
    if (error_) std::rethrow_exception(error_);
}

void ThreadPool::worker_loop(unsigned id) {
    std::size_t seen = 0;
    for (;;) {
        const std::function<void(std::size_t, std::size_t)>* body = nullptr;
        std::size_t n = 0;
        unsigned parts = 1;
        {
            std::unique_lock lock(mutex_);
            start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            body = body_;
            n = n_;
            parts = parts_;
        }
        std::exception_ptr err;
        try {
            if (id < parts) {
                const auto [b, e] = chunk(n, parts, id);
                if (b < e) (*body)(b, e);
            }
        } catch (...) {
            err = std::current_exception();
        }
        {
            std::lock_guard lock(mutex_);
            if (err && !error_) error_ = err;
            if (--pending_ == 0) done_cv_.notify_one();
        }
    }
}

unsigned threads_from_env() {
    if (const char* v = std::getenv("MR_SIM_THREADS")) {
        try {
            const long parsed = std::stol(v);
            if (parsed > 0 && parsed < 4096) return static_cast<unsigned>(parsed);
        } catch (...) {
        }
    }
    return 1;
}

double pairwise_sum(std::span<const double> values) noexcept {
    constexpr std::size_t kLeaf = 32;
    if (values.size() <= kLeaf) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

}  // namespace mrsim
