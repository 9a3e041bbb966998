#pragma once

#include "ctxseg/fusion.hpp"

#include <algorithm>
#include <chrono>
#include <vector>

namespace ctxseg {

struct FusionBenchResult {
  int n_small = 0, n_large = 0;
  double seconds_small = 0.0, seconds_large = 0.0;
  double ratio = 0.0;
};

// Median forward wall time of one fusion block at n and factor*n voxels with
// a fixed token count. Linear-cost variants should scale close to `factor`;
// the joint block scales quadratically.
template <typename T = double>
FusionBenchResult bench_fusion(FusionVariant variant, int n_small, int factor, int n_tokens,
                               int width, int heads, int reps) {
  ParamStore<T> store;
  FusionBlock<T> block(store, "bench", width, heads, 4 * width, variant);
  Rng rng = make_rng(0xBE7Cu);
  block.init(rng);

  std::vector<int> task_ids(static_cast<size_t>(n_tokens));
  for (int i = 0; i < n_tokens; ++i) task_ids[static_cast<size_t>(i)] = i;
  MatrixX<T> tokens(n_tokens, width);
  fill_gaussian(tokens, T(1), rng);

  auto time_at = [&](int n) {
    MatrixX<T> fmap(n, width);
    fill_gaussian(fmap, T(1), rng);
    block.forward(tokens, task_ids, fmap, nullptr);  // warm up
    std::vector<double> times;
    for (int r = 0; r < reps; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      auto out = block.forward(tokens, task_ids, fmap, nullptr);
      auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count() +
                      1e-30 * static_cast<double>(out.tokens(0, 0)));
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };

  FusionBenchResult res;
  res.n_small = n_small;
  res.n_large = n_small * factor;
  res.seconds_small = time_at(res.n_small);
  res.seconds_large = time_at(res.n_large);
  res.ratio = res.seconds_large / res.seconds_small;
  return res;
}

}  // namespace ctxseg
