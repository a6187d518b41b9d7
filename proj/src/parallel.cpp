#include "voxalign/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace voxalign {

namespace {

int resolve_default_workers() {
    if (const char* env = std::getenv("VOXALIGN_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int> g_workers{0};  // 0 = not resolved yet

// Persistent helper threads. The calling thread executes chunk 0 itself, so a
// pool of size N keeps N-1 helpers.
class Pool {
  public:
    explicit Pool(int helpers) {
        for (int i = 0; i < helpers; ++i)
            threads_.emplace_back([this, i] { worker_loop(i + 1); });
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int size() const { return static_cast<int>(threads_.size()) + 1; }

    void run(int chunks, const std::function<void(int)>& chunk_fn) {
        {
            std::lock_guard<std::mutex> lk(m_);
            chunk_fn_ = &chunk_fn;
            chunks_ = chunks;
            pending_ = chunks - 1;  // chunk 0 runs on this thread
            ++generation_;
        }
        cv_.notify_all();
        chunk_fn(0);
        std::unique_lock<std::mutex> lk(m_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        chunk_fn_ = nullptr;
    }

  private:
    void worker_loop(int id) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* fn = nullptr;
            int my_chunk = -1;
            {
                std::unique_lock<std::mutex> lk(m_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                if (id < chunks_) {
                    fn = chunk_fn_;
                    my_chunk = id;
                }
            }
            if (fn) {
                (*fn)(my_chunk);
                std::lock_guard<std::mutex> lk(m_);
                if (--pending_ == 0) done_cv_.notify_one();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* chunk_fn_ = nullptr;
    int chunks_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool& pool_for(int workers) {
    static Pool* pool = nullptr;
    static int pool_workers = 0;
    if (!pool || pool_workers != workers) {
        delete pool;
        pool = new Pool(workers - 1);
        pool_workers = workers;
    }
    return *pool;
}

std::mutex g_pool_mutex;

}  // namespace

int worker_count() {
    int n = g_workers.load();
    if (n == 0) {
        n = resolve_default_workers();
        g_workers.store(n);
    }
    return n;
}

void set_worker_count(int n) { g_workers.store(n < 1 ? 1 : n); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    const int workers = worker_count();
    if (workers == 1 || n < 2) {
        body(0, n);
        return;
    }
    const int chunks = static_cast<int>(std::min<int64_t>(workers, n));
    // parallel_for can be re-entered only from a single orchestrating thread;
    // nested calls from worker chunks are not supported and ops do not nest.
    std::lock_guard<std::mutex> lk(g_pool_mutex);
    Pool& pool = pool_for(workers);
    pool.run(chunks, [&](int c) {
        const int64_t lo = n * c / chunks;
        const int64_t hi = n * (c + 1) / chunks;
        if (lo < hi) body(lo, hi);
    });
}

}  // namespace voxalign
