#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invflow/model.hpp"

namespace invflow {

/// One benchmark measurement. `checksum` is FNV-1a over the output values
/// rounded to a 1e-6 grid, so methods that agree within the correctness
/// tolerance report identical checksums.
struct BenchCase {
    std::string name;    // case label
    int m = 0;           // spatial side (m x m)
    int k = 0;           // kernel size
    int c = 0;           // channels
    std::string method;  // dense-lu | sequential-diag | parallel-diag | ...
    double median_s = 0.0;
    std::uint64_t checksum = 0;
    long long stages = 0;  // sequential wavefront stages for this shape
    bool skipped = false;
};

struct BenchReport {
    std::vector<BenchCase> cases;

    /// `case,m,k,C,method,median_s,checksum` with a header row.
    std::string to_csv() const;
    /// Human-readable table with stage counts and per-case speedups.
    std::string to_table() const;
};

std::uint64_t checksum_values(const std::vector<double>& values);

/// Times the inverse convolution on random kernels/inputs for every
/// (m, k, C) combination: dense LU (factorize + solve per repeat, skipped
/// above the n <= 4096 capacity guard), the sequential wavefront solve, and
/// the thread-parallel wavefront solve. Two warm-up runs are discarded and
/// the median of `repeats` timings is reported. Timing is only reported when
/// the method's output agrees with the sequential reference within 1e-9
/// (checksum gate).
BenchReport bench_inverse(const std::vector<int>& sizes,
                          const std::vector<int>& kernel_sizes,
                          const std::vector<int>& channels, int repeats,
                          int threads = 0);

/// Times the sampling direction (decode; inv-conv runs the direct
/// convolution) against the training direction (model_forward; inv-conv runs
/// the wavefront solve) for each config, over a small fixed batch.
BenchReport bench_sampling(const std::vector<ModelConfig>& configs, int repeats);

}  // namespace invflow
