// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

namespace opadpo {

/// Execution strategy for batch kernels. `serial` is the reference path;
/// `parallel` fans out over OpenMP threads and must produce bit-identical
/// results because every reduction runs in fixed index order afterwards.
enum class Exec { serial, parallel };

/// Sets the OpenMP worker count (no-op without OpenMP). n <= 0 keeps the
/// runtime default.
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [0, n). Iterations must write to disjoint outputs.
template <class Fn>
void for_each_index(std::size_t n, Exec exec, Fn&& fn) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
}

/// Sums per-item gradient buffers in index order.
inline void reduce_in_order(const std::vector<std::vector<double>>& parts,
                            std::vector<double>& out) {
  for (const auto& p : parts)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += p[j];
}

}  // namespace opadpo
