#pragma once

#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace invflow {

/// Fixed-size worker pool for per-diagonal fan-out. parallel_for blocks until
/// every chunk finished, which is the barrier the wavefront contract needs
/// between stages. Chunks are static contiguous ranges, so any schedule
/// writes each element exactly once from fully determined inputs.
class ThreadPool {
public:
    /// `lanes` total execution lanes; the calling thread is one of them.
    explicit ThreadPool(int lanes);
    ~ThreadPool();

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    int lanes() const { return lanes_; }

    /// Runs fn(begin, end) over a static partition of [0, n); returns after
    /// all chunks complete. fn must be safe to call concurrently on disjoint
    /// ranges.
    void parallel_for(long long n, const std::function<void(long long, long long)>& fn);

    /// Lane count resolved from the INVFLOW_THREADS env var (if set), else
    /// the requested count, clamped to at least 1.
    static int resolve_lanes(int requested);

private:
    void worker_loop(int slot);

    int lanes_;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_start_;
    std::condition_variable cv_done_;
    const std::function<void(long long, long long)>* job_ = nullptr;
    long long job_n_ = 0;
    unsigned long long generation_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

}  // namespace invflow
