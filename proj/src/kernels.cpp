#include "plr/kernels.hpp"

#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace plr::kern {

namespace {
constexpr i64 kParallelCutoff = 16 * 1024;  // skip thread fork for tiny work
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(const float* a, const float* b, float* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  const bool par = m * k * n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 i = 0; i < m; ++i) {
    float* ci = c + i * n;
    if (!accumulate) std::memset(ci, 0, sizeof(float) * static_cast<size_t>(n));
    const float* ai = a + i * k;
    for (i64 p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = b + p * n;
      for (i64 j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_nt(const float* a, const float* b, float* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  const bool par = m * k * n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (i64 j = 0; j < n; ++j) {
      const float* bj = b + j * k;
      float acc = 0.0f;
      for (i64 p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void gemm_tn(const float* a, const float* b, float* c, i64 m, i64 k, i64 n,
             bool accumulate) {
  // a is [k,m]; c[i,j] = sum_p a[p,i] * b[p,j]
  const bool par = m * k * n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 i = 0; i < m; ++i) {
    float* ci = c + i * n;
    if (!accumulate) std::memset(ci, 0, sizeof(float) * static_cast<size_t>(n));
    for (i64 p = 0; p < k; ++p) {
      const float av = a[p * m + i];
      const float* bp = b + p * n;
      for (i64 j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void bmm_nn(const float* a, const float* b, float* c, i64 g, i64 m, i64 k,
            i64 n, bool accumulate) {
  const bool par = g * m * k * n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 gm = 0; gm < g * m; ++gm) {
    const i64 gi = gm / m, i = gm % m;
    const float* ai = a + (gi * m + i) * k;
    const float* bg = b + gi * k * n;
    float* ci = c + (gi * m + i) * n;
    if (!accumulate) std::memset(ci, 0, sizeof(float) * static_cast<size_t>(n));
    for (i64 p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = bg + p * n;
      for (i64 j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void bmm_nt(const float* a, const float* b, float* c, i64 g, i64 m, i64 k,
            i64 n, bool accumulate) {
  const bool par = g * m * k * n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 gm = 0; gm < g * m; ++gm) {
    const i64 gi = gm / m, i = gm % m;
    const float* ai = a + (gi * m + i) * k;
    const float* bg = b + gi * n * k;
    float* ci = c + (gi * m + i) * n;
    for (i64 j = 0; j < n; ++j) {
      const float* bj = bg + j * k;
      float acc = 0.0f;
      for (i64 p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void softmax_rows(const float* x, float* y, i64 rows, i64 cols) {
  const bool par = rows * cols >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = y + r * cols;
    float mx = xr[0];
    for (i64 j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
    float sum = 0.0f;
    for (i64 j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const float inv = 1.0f / sum;
    for (i64 j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

void softmax_rows_backward(const float* y, const float* dy, float* dx,
                           i64 rows, i64 cols) {
  const bool par = rows * cols >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 r = 0; r < rows; ++r) {
    const float* yr = y + r * cols;
    const float* dyr = dy + r * cols;
    float* dxr = dx + r * cols;
    float dot = 0.0f;
    for (i64 j = 0; j < cols; ++j) dot += yr[j] * dyr[j];
    for (i64 j = 0; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

void gelu_forward(const float* x, float* y, i64 n) {
  const bool par = n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 i = 0; i < n; ++i) {
    const float v = x[i];
    y[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
}

void gelu_backward(const float* x, const float* dy, float* dx, i64 n) {
  const bool par = n >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 i = 0; i < n; ++i) {
    const float v = x[i];
    const float u = kGeluC * (v + kGeluA * v * v * v);
    const float t = std::tanh(u);
    const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
    const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
    dx[i] += d * dy[i];
  }
}

void layer_norm_rows(const float* x, float* y, i64 rows, i64 cols, float eps) {
  const bool par = rows * cols >= kParallelCutoff;
#pragma omp parallel for schedule(static) if (par)
  for (i64 r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    float* yr = y + r * cols;
    float mean = 0.0f;
    for (i64 j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<float>(cols);
    float var = 0.0f;
    for (i64 j = 0; j < cols; ++j) {
      const float d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(cols);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (i64 j = 0; j < cols; ++j) yr[j] = (xr[j] - mean) * inv;
  }
}

void layer_norm_rows_backward(const float* x, const float* dy, float* dx,
                              i64 rows, i64 cols, float eps) {
  const bool par = rows * cols >= kParallelCutoff;
  const float cf = static_cast<float>(cols);
#pragma omp parallel for schedule(static) if (par)
  for (i64 r = 0; r < rows; ++r) {
    const float* xr = x + r * cols;
    const float* dyr = dy + r * cols;
    float* dxr = dx + r * cols;
    float mean = 0.0f;
    for (i64 j = 0; j < cols; ++j) mean += xr[j];
    mean /= cf;
    float var = 0.0f;
    for (i64 j = 0; j < cols; ++j) {
      const float d = xr[j] - mean;
      var += d * d;
    }
    var /= cf;
    const float inv = 1.0f / std::sqrt(var + eps);
    // xhat = (x - mean) * inv ; dx = inv * (dy - mean(dy) - xhat * mean(dy*xhat))
    float sum_dy = 0.0f, sum_dyx = 0.0f;
    for (i64 j = 0; j < cols; ++j) {
      const float xh = (xr[j] - mean) * inv;
      sum_dy += dyr[j];
      sum_dyx += dyr[j] * xh;
    }
    const float m_dy = sum_dy / cf, m_dyx = sum_dyx / cf;
    for (i64 j = 0; j < cols; ++j) {
      const float xh = (xr[j] - mean) * inv;
      dxr[j] += inv * (dyr[j] - m_dy - xh * m_dyx);
    }
  }
}

}  // namespace plr::kern
