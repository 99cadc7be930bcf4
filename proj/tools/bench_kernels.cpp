// Benchmark of the OpenMP kernels against the serial reference
// implementation: raw gemm, batched attention products, and the full
// model forward (batched tensor path vs per-user serial path).

#include <chrono>
#include <cstdio>
#include <vector>

#include "plr/kernels.hpp"
#include "plr/model.hpp"
#include "plr/reference.hpp"

using namespace plr;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

template <typename Fn>
double time_best_of(int reps, Fn&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_seconds();
    fn();
    best = std::min(best, now_seconds() - t0);
  }
  return best;
}

void fill_random(std::vector<float>& v, RngStream& rng) {
  for (auto& x : v) x = rng.next_float() - 0.5f;
}

void bench_gemm() {
  std::printf("gemm C[m,n] = A[m,k] B[k,n], best of 5\n");
  std::printf("%-24s %12s %12s %8s\n", "size", "serial ms", "omp ms",
              "speedup");
  RngStream rng(1);
  for (i64 s : {64, 128, 256, 512}) {
    std::vector<float> a(static_cast<size_t>(s * s)),
        b(static_cast<size_t>(s * s)), c(static_cast<size_t>(s * s));
    fill_random(a, rng);
    fill_random(b, rng);
    const double serial = time_best_of(5, [&] {
      ref::s_matmul(a.data(), b.data(), c.data(), s, s, s);
    });
    const double omp = time_best_of(5, [&] {
      kern::gemm_nn(a.data(), b.data(), c.data(), s, s, s, false);
    });
    char label[64];
    std::snprintf(label, sizeof label, "%lldx%lldx%lld",
                  static_cast<long long>(s), static_cast<long long>(s),
                  static_cast<long long>(s));
    std::printf("%-24s %12.3f %12.3f %8.2f\n", label, serial * 1e3, omp * 1e3,
                serial / omp);
  }
}

void bench_softmax() {
  std::printf("\nrow softmax [rows=4096, cols], best of 5\n");
  std::printf("%-24s %12s %12s %8s\n", "cols", "serial ms", "omp ms",
              "speedup");
  RngStream rng(2);
  for (i64 cols : {128, 512, 2048}) {
    const i64 rows = 4096;
    std::vector<float> x(static_cast<size_t>(rows * cols)),
        y(static_cast<size_t>(rows * cols));
    fill_random(x, rng);
    const double serial = time_best_of(5, [&] {
      for (i64 r = 0; r < rows; ++r) {
        std::vector<float> row(x.begin() + r * cols,
                               x.begin() + (r + 1) * cols);
        ref::s_softmax_row(row.data(), cols);
        std::copy(row.begin(), row.end(), y.begin() + r * cols);
      }
    });
    const double omp = time_best_of(
        5, [&] { kern::softmax_rows(x.data(), y.data(), rows, cols); });
    std::printf("%-24lld %12.3f %12.3f %8.2f\n",
                static_cast<long long>(cols), serial * 1e3, omp * 1e3,
                serial / omp);
  }
}

void bench_forward() {
  std::printf("\nfull forward, batch of 256 contexts, best of 3\n");
  PLRConfig cfg;
  cfg.d = 32;
  cfg.H = 2;
  cfg.L = 2;
  cfg.T = 2;
  cfg.M = 2;
  cfg.max_len = 20;
  cfg.vocab_size = 500;
  cfg.dropout_rep = 0.0f;
  cfg.dropout_attn = 0.0f;
  PLRParams params = PLRParams::init(cfg, RngStream(3));
  RngStream rng(4);
  std::vector<std::vector<i64>> contexts;
  for (int i = 0; i < 256; ++i) {
    std::vector<i64> ctx(
        8 + static_cast<size_t>(rng.next_below(12)));
    for (auto& v : ctx)
      v = static_cast<i64>(rng.next_below(
          static_cast<std::uint64_t>(cfg.vocab_size)));
    contexts.push_back(std::move(ctx));
  }

  RngStream fwd_rng(5);
  const double batched = time_best_of(3, [&] {
    (void)forward_pass(params, cfg, contexts, false, fwd_rng);
  });

  const auto w = ref::to_weights<float>(params, cfg);
  const double serial = time_best_of(3, [&] {
    for (const auto& ctx : contexts) {
      ref::Forward<float> f;
      f.w = &w;
      f.encode(ctx);
      auto states = f.reason();
      std::vector<std::vector<float>> zs;
      std::vector<float> gate, z_rea;
      f.aggregate(states, zs, gate, z_rea);
    }
  });
  std::printf("%-24s %12.1f ms\n", "serial reference", serial * 1e3);
  std::printf("%-24s %12.1f ms\n", "batched + OpenMP", batched * 1e3);
  std::printf("%-24s %12.2fx\n", "speedup", serial / batched);
}

}  // namespace

int main() {
  std::printf("threads: %d\n\n", kern::max_threads());
  bench_gemm();
  bench_softmax();
  bench_forward();
  return 0;
}
