#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <thread>
#include <vector>

#include "repa/model.hpp"
#include "repa/tensor.hpp"

namespace repa {

// Batched inference over independent items; with threads > 1 the batch is
// split into contiguous per-thread chunks. Forward is pure, so the outputs
// are bit-identical at any thread count.
template <ScalarType T>
std::vector<Tensor<T>> batched_forward(const BackboneGraph<T>& model,
                                       const std::vector<Tensor<T>>& inputs,
                                       std::size_t threads = 1) {
  std::vector<Tensor<T>> out(inputs.size());
  auto run_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = model_forward(model, inputs[i]);
  };
  if (threads <= 1 || inputs.size() <= 1) {
    run_range(0, inputs.size());
    return out;
  }
  const std::size_t workers = std::min<std::size_t>(threads, inputs.size());
  const std::size_t chunk = (inputs.size() + workers - 1) / workers;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back(run_range, w * chunk, std::min(inputs.size(), (w + 1) * chunk));
  for (auto& t : pool) t.join();
  return out;
}

struct BenchResult {
  std::string variant;
  std::size_t batch = 1;
  std::size_t reps = 0;
  std::size_t threads = 1;
  double median_ms = 0, p10_ms = 0, p90_ms = 0;
  double best_ms = 0;        // minimum over reps, the least noisy estimate
  double throughput = 0;      // items / second at the median
  double peak_throughput = 0; // items / second at the best rep
  std::size_t op_count = 0;
};

// Wall-clock of a batched forward over `reps` repetitions, warmup excluded.
// At least 30 repetitions.
template <ScalarType T>
BenchResult bench_forward(const BackboneGraph<T>& model, const std::vector<Tensor<T>>& inputs,
                          std::size_t reps, const std::string& variant,
                          std::size_t threads = 1, std::size_t warmup = 5) {
  detail::require(reps >= 30, "bench: need at least 30 repetitions");
  detail::require(!inputs.empty(), "bench: empty batch");
  volatile T guard{};
  for (std::size_t i = 0; i < warmup; ++i) {
    auto r = batched_forward(model, inputs, threads);
    guard = guard + r.back()[0];
  }
  std::vector<double> ms(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = batched_forward(model, inputs, threads);
    const auto t1 = std::chrono::steady_clock::now();
    guard = guard + r.back()[0];
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  std::sort(ms.begin(), ms.end());
  BenchResult res;
  res.variant = variant;
  res.batch = inputs.size();
  res.reps = reps;
  res.threads = threads;
  res.median_ms = ms[reps / 2];
  res.p10_ms = ms[reps / 10];
  res.p90_ms = ms[(reps * 9) / 10];
  res.best_ms = ms.front();
  const auto items = static_cast<double>(inputs.size());
  res.throughput = res.median_ms > 0 ? items / (res.median_ms / 1e3) : 0.0;
  res.peak_throughput = res.best_ms > 0 ? items / (res.best_ms / 1e3) : 0.0;
  res.op_count = op_count(model);
  return res;
}

}  // namespace repa
