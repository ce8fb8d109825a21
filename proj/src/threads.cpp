#include "invflow/threads.hpp"

#include <cstdlib>
#include <string>

namespace invflow {

ThreadPool::ThreadPool(int lanes) : lanes_(lanes < 1 ? 1 : lanes) {
    workers_.reserve(static_cast<std::size_t>(lanes_) - 1);
    for (int slot = 1; slot < lanes_; ++slot)
        workers_.emplace_back([this, slot] { worker_loop(slot); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard<std::mutex> lock(mu_);
        stop_ = true;
    }
    cv_start_.notify_all();
    for (auto& t : workers_) t.join();
}

int ThreadPool::resolve_lanes(int requested) {
    if (const char* env = std::getenv("INVFLOW_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return requested < 1 ? 1 : requested;
}

namespace {

inline void run_chunk(const std::function<void(long long, long long)>& fn,
                      long long n, int slot, int lanes) {
    const long long begin = n * slot / lanes;
    const long long end = n * (slot + 1) / lanes;
    if (begin < end) fn(begin, end);
}

}  // namespace

void ThreadPool::parallel_for(long long n,
                              const std::function<void(long long, long long)>& fn) {
    if (n <= 0) return;
    if (lanes_ == 1 || n == 1) {
        fn(0, n);
        return;
    }
    {
        std::lock_guard<std::mutex> lock(mu_);
        job_ = &fn;
        job_n_ = n;
        pending_ = lanes_ - 1;
        ++generation_;
    }
    cv_start_.notify_all();
    run_chunk(fn, n, 0, lanes_);  // caller is lane 0
    std::unique_lock<std::mutex> lock(mu_);
    cv_done_.wait(lock, [this] { return pending_ == 0; });
    job_ = nullptr;
}

void ThreadPool::worker_loop(int slot) {
    unsigned long long seen = 0;
    for (;;) {
        const std::function<void(long long, long long)>* job;
        long long n;
        {
            std::unique_lock<std::mutex> lock(mu_);
            cv_start_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            job = job_;
            n = job_n_;
        }
        run_chunk(*job, n, slot, lanes_);
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (--pending_ == 0) cv_done_.notify_one();
        }
    }
}

}  // namespace invflow
