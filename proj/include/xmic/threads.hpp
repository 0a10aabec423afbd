#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "xmic/common.hpp"

namespace xmic {

// Worker cap: XMIC_THREADS env var when set, hardware concurrency otherwise.
inline std::size_t max_threads() {
    if (const char* env = std::getenv("XMIC_THREADS")) {
        try {
            long n = std::stol(env);
            if (n >= 1) return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
            throw ConfigError("XMIC_THREADS must be a positive integer, got '" + std::string(env) + "'");
        }
        throw ConfigError("XMIC_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    std::size_t hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

// Static block partition of [0, n). Each index is processed exactly once and
// results must be written to preallocated per-index slots, so the outcome is
// independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    std::size_t workers = std::min(max_threads(), n ? n : std::size_t{1});
    if (n == 0) return;
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::atomic<bool> failed{false};
    std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn, &first_error, &error_mutex, &failed] {
            try {
                for (std::size_t i = begin; i < end; ++i) {
                    if (failed.load(std::memory_order_relaxed)) return;
                    fn(i);
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                failed.store(true, std::memory_order_relaxed);
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace xmic
