#include "lgm/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace lgm {
namespace {

class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this, i] { loop(i); });
    }
  }

  ~Pool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()) + 1; }

  void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t parts = static_cast<std::size_t>(size());
    {
      std::lock_guard lock(mu_);
      body_ = &body;
      n_ = n;
      parts_ = parts;
      pending_ = threads_.size();
      ++generation_;
    }
    cv_.notify_all();
    run_part(0, n, parts, body);
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
  }

 private:
  static void run_part(std::size_t part, std::size_t n, std::size_t parts,
                       const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t chunk = (n + parts - 1) / parts;
    const std::size_t begin = std::min(n, part * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    if (begin < end) body(begin, end);
  }

  void loop(int index) {
    std::size_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t, std::size_t)>* body = nullptr;
      std::size_t n = 0, parts = 0;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        body = body_;
        n = n_;
        parts = parts_;
      }
      run_part(static_cast<std::size_t>(index) + 1, n, parts, *body);
      {
        std::lock_guard lock(mu_);
        --pending_;
      }
      done_cv_.notify_one();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t, std::size_t)>* body_ = nullptr;
  std::size_t n_ = 0;
  std::size_t parts_ = 1;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
};

std::mutex g_config_mu;
int g_threads = 1;
std::unique_ptr<Pool> g_pool;

}  // namespace

void set_num_threads(int n) {
  std::lock_guard lock(g_config_mu);
  g_threads = std::max(1, n);
  g_pool.reset();
  if (g_threads > 1) g_pool = std::make_unique<Pool>(g_threads - 1);
}

int num_threads() { return g_threads; }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  if (g_threads <= 1 || n == 1 || !g_pool) {
    body(0, n);
    return;
  }
  // Nested calls from inside a worker run serially.
  thread_local bool inside = false;
  if (inside) {
    body(0, n);
    return;
  }
  inside = true;
  {
    std::lock_guard lock(g_config_mu);
    g_pool->run(n, [&](std::size_t b, std::size_t e) {
      inside = true;
      body(b, e);
    });
  }
  inside = false;
}

}  // namespace lgm
