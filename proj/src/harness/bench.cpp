#include "reidmamba/harness/bench.hpp"

#include "reidmamba/init.hpp"
#include "reidmamba/ssm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

namespace reidmamba {
namespace {

struct Attention {
  Matrix wq, wk, wv, wo;
};

Matrix attention_forward(const Matrix& x, const Attention& a, std::size_t& bytes) {
  const Matrix q = x * a.wq;
  const Matrix k = x * a.wk;
  const Matrix v = x * a.wv;
  Matrix scores = (q * k.transpose()) / std::sqrt(static_cast<double>(x.cols()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double peak = scores.row(r).maxCoeff();
    scores.row(r) = (scores.row(r).array() - peak).exp().matrix();
    scores.row(r) /= scores.row(r).sum();
  }
  const Matrix mixed = scores * v;
  Matrix out = x + mixed * a.wo;
  bytes = static_cast<std::size_t>(q.size() + k.size() + v.size() + scores.size() + mixed.size() + out.size()) *
          sizeof(double);
  return out;
}

template <typename F>
double median_ms(int repeats, int warmup, F&& run) {
  for (int i = 0; i < warmup; ++i) run();
  std::vector<double> times;
  for (int i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    run();
    const auto stop = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  return times.size() % 2 == 1 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

}  // namespace

std::vector<BenchRow> bench_scaling(const std::vector<int>& token_counts, int repeats, const BenchOptions& opts) {
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  std::mt19937_64 rng(opts.seed);
  BlockConfig bc;
  bc.dim = opts.dim;
  bc.inner_dim = 2 * opts.dim;
  bc.dt_rank = (opts.dim + 15) / 16;
  BiMbBlock block = BiMbBlock::init("bench", bc, rng);
  Attention attn{init::dense(opts.dim, opts.dim, rng), init::dense(opts.dim, opts.dim, rng),
                 init::dense(opts.dim, opts.dim, rng), init::dense(opts.dim, opts.dim, rng)};

  volatile double sink = 0.0;
  std::vector<BenchRow> rows;
  for (int n : token_counts) {
    if (n < 1) throw std::invalid_argument("token counts must be positive");
    const Matrix x = init::normal(n, opts.dim, 1.0, rng);
    BenchRow row;
    row.tokens = n;
    row.scan_ms = median_ms(repeats, opts.warmup, [&] {
      ag::Graph g;
      sink = g.value(bimb_forward(g.constant(x), block, Mode::eval, 1.0))(0, 0);
      row.scan_bytes = g.value_bytes();
    });
    row.attention_ms = median_ms(repeats, opts.warmup, [&] {
      std::size_t bytes = 0;
      sink = attention_forward(x, attn, bytes)(0, 0);
      row.attention_bytes = bytes;
    });
    rows.push_back(row);
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  out << "tokens,scan_ms,scan_alloc_bytes,attention_ms,attention_alloc_bytes\n";
  for (const BenchRow& r : rows) {
    out << r.tokens << ',' << r.scan_ms << ',' << r.scan_bytes << ',' << r.attention_ms << ',' << r.attention_bytes
        << '\n';
  }
}

}  // namespace reidmamba
