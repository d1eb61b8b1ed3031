#pragma once

// Forward-time scaling of one bidirectional scan block against a naive
// single-head softmax self-attention layer of the same width.

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

namespace reidmamba {

struct BenchRow {
  int tokens = 0;
  double scan_ms = 0.0;       // median over repeats
  double attention_ms = 0.0;  // median over repeats
  std::size_t scan_bytes = 0;       // graph value storage of one forward
  std::size_t attention_bytes = 0;  // intermediate matrices of one forward
};

struct BenchOptions {
  int dim = 64;
  int warmup = 2;
  std::uint64_t seed = 7;
};

std::vector<BenchRow> bench_scaling(const std::vector<int>& token_counts, int repeats, const BenchOptions& opts = {});

/// Header: tokens,scan_ms,scan_alloc_bytes,attention_ms,attention_alloc_bytes
void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows);

}  // namespace reidmamba
