// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace triedit {

inline int default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

inline int resolve_workers(int requested) { return requested > 0 ? requested : default_workers(); }

/// Runs fn(task, worker) for task in [0, n_tasks). Task k always runs on
/// worker k % workers, and each worker visits its tasks in increasing order,
/// so per-worker accumulation is reproducible for a fixed worker count.
template <typename Fn>
void parallel_for(int workers, int n_tasks, Fn&& fn) {
  workers = std::max(1, std::min(workers, n_tasks));
  if (workers <= 1) {
    for (int t = 0; t < n_tasks; ++t) fn(t, 0);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> threads;
    threads.reserve(workers);
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (int t = w; t < n_tasks; t += workers) fn(t, w);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace triedit
