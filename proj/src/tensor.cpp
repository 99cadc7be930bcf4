#include "plr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "plr/kernels.hpp"

namespace plr {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

i64 numel_of(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<float>>(
      static_cast<size_t>(numel_of(t.shape_)), 0.0f);
  return t;
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values) {
  check(numel_of(shape) == static_cast<i64>(values.size()),
        "from_data: value count does not match shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<float>>(std::move(values));
  return t;
}

i64 Tensor::numel() const { return numel_of(shape_); }

float Tensor::item() const {
  check(defined() && numel() == 1,
        "item: tensor is not a scalar, shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor& Tensor::set_requires_grad() {
  if (!grad_) {
    grad_ = std::make_shared<std::vector<float>>(data_->size(), 0.0f);
  }
  requires_grad_ = true;
  return *this;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
}

Tensor Tensor::reshape(Shape new_shape) const {
  check(numel_of(new_shape) == numel(),
        "reshape: element count mismatch " + shape_str(shape_) + " -> " +
            shape_str(new_shape));
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  return t;
}

bool Tensor::all_finite() const {
  // finite iff the exponent field is not all ones
  const auto* p = reinterpret_cast<const std::uint32_t*>(data_->data());
  const size_t n = data_->size();
  std::uint32_t bad = 0;
  for (size_t i = 0; i < n; ++i) {
    bad |= static_cast<std::uint32_t>((p[i] & 0x7f800000u) == 0x7f800000u);
  }
  return bad == 0;
}

// Output of an op: grad buffer allocated and registered as an intermediate
// when it participates in the active tape.
Tensor make_op_output(Shape shape, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape));
  if (requires_grad) {
    t.set_requires_grad();
    if (Tape* tp = Tape::active()) tp->note_intermediate(t.grad_);
  }
  return t;
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Tape::note_intermediate(const std::shared_ptr<std::vector<float>>& g) {
  intermediates_.push_back(g);
}

void Tape::backward(Tensor& loss) {
  check(loss.numel() == 1,
        "backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // constant loss: nothing depends on it
  for (auto& g : intermediates_) std::fill(g->begin(), g->end(), 0.0f);
  loss.grad()[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::clear() {
  nodes_.clear();
  intermediates_.clear();
}

void backward(Tensor& loss) {
  Tape* tp = Tape::active();
  check(tp != nullptr, "backward: no active tape");
  tp->backward(loss);
}

// ---- op helpers -------------------------------------------------------------

namespace {

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_finite_input(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw std::domain_error(std::string(op) + ": non-finite input values");
  }
}

void record(std::function<void()> fn) { Tape::active()->record(std::move(fn)); }

bool is_suffix(const Shape& suffix, const Shape& full) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
        "matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  check_finite_input(a, "matmul");
  check_finite_input(b, "matmul");
  const i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output({m, n}, rg);
  kern::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  if (rg) {
    record([a, b, out, m, k, n]() {
      if (a.requires_grad())
        kern::gemm_nt(out.grad(), b.data(), const_cast<float*>(a.grad()), m, n,
                      k, true);
      if (b.requires_grad())
        kern::gemm_tn(a.data(), out.grad(), const_cast<float*>(b.grad()), k, m,
                      n, true);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
        "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  check_finite_input(a, "matmul_nt");
  check_finite_input(b, "matmul_nt");
  const i64 m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output({m, n}, rg);
  kern::gemm_nt(a.data(), b.data(), out.data(), m, k, n, false);
  if (rg) {
    record([a, b, out, m, k, n]() {
      if (a.requires_grad())
        kern::gemm_nn(out.grad(), b.data(), const_cast<float*>(a.grad()), m, n,
                      k, true);
      if (b.requires_grad())
        kern::gemm_tn(out.grad(), a.data(), const_cast<float*>(b.grad()), n, m,
                      k, true);
    });
  }
  return out;
}

namespace {
// dB[g] = A[g]^T * dC[g]; a group [m,k] read transposed -> out group [k,n]
void bmm_tn_acc(const float* a, const float* c, float* out, i64 g, i64 m,
                i64 k, i64 n) {
  for (i64 gi = 0; gi < g; ++gi) {
    const float* ag = a + gi * m * k;
    const float* cg = c + gi * m * n;
    float* og = out + gi * k * n;
    for (i64 i = 0; i < m; ++i) {
      const float* ai = ag + i * k;
      const float* ci = cg + i * n;
      for (i64 p = 0; p < k; ++p) {
        const float av = ai[p];
        float* op = og + p * n;
        for (i64 j = 0; j < n; ++j) op[j] += av * ci[j];
      }
    }
  }
}
}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
  check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
            a.dim(2) == b.dim(1),
        "bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  const i64 g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output({g, m, n}, rg);
  kern::bmm_nn(a.data(), b.data(), out.data(), g, m, k, n, false);
  if (rg) {
    record([a, b, out, g, m, k, n]() {
      if (a.requires_grad())
        kern::bmm_nt(out.grad(), b.data(), const_cast<float*>(a.grad()), g, m,
                     n, k, true);
      if (b.requires_grad())
        bmm_tn_acc(a.data(), out.grad(), const_cast<float*>(b.grad()), g, m, k,
                   n);
    });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
            a.dim(2) == b.dim(2),
        "bmm_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  const i64 g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output({g, m, n}, rg);
  kern::bmm_nt(a.data(), b.data(), out.data(), g, m, k, n, false);
  if (rg) {
    record([a, b, out, g, m, k, n]() {
      if (a.requires_grad())
        kern::bmm_nn(out.grad(), b.data(), const_cast<float*>(a.grad()), g, m,
                     n, k, true);
      if (b.requires_grad())
        bmm_tn_acc(out.grad(), a.data(), const_cast<float*>(b.grad()), g, m, n,
                   k);
    });
  }
  return out;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check(is_suffix(b.shape(), a.shape()),
        "add: shape " + shape_str(b.shape()) + " is not a suffix of " +
            shape_str(a.shape()));
  const i64 n = a.numel(), bn = b.numel();
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output(a.shape(), rg);
  const float* ap = a.data();
  const float* bp = b.data();
  float* op = out.data();
  for (i64 i = 0; i < n; ++i) op[i] = ap[i] + bp[i % bn];
  if (rg) {
    record([a, b, out, n, bn]() {
      const float* g = out.grad();
      if (a.requires_grad()) {
        float* ga = const_cast<float*>(a.grad());
        for (i64 i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        float* gb = const_cast<float*>(b.grad());
        for (i64 i = 0; i < n; ++i) gb[i % bn] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const i64 n = a.numel();
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output(a.shape(), rg);
  const float* ap = a.data();
  const float* bp = b.data();
  float* op = out.data();
  for (i64 i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  if (rg) {
    record([a, b, out, n]() {
      const float* g = out.grad();
      if (a.requires_grad()) {
        float* ga = const_cast<float*>(a.grad());
        const float* bp2 = b.data();
        for (i64 i = 0; i < n; ++i) ga[i] += g[i] * bp2[i];
      }
      if (b.requires_grad()) {
        float* gb = const_cast<float*>(b.grad());
        const float* ap2 = a.data();
        for (i64 i = 0; i < n; ++i) gb[i] += g[i] * ap2[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  const i64 n = a.numel();
  const bool rg = want_grad({&a});
  Tensor out = make_op_output(a.shape(), rg);
  const float* ap = a.data();
  float* op = out.data();
  for (i64 i = 0; i < n; ++i) op[i] = ap[i] * c;
  if (rg) {
    record([a, out, c, n]() {
      const float* g = out.grad();
      float* ga = const_cast<float*>(a.grad());
      for (i64 i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// ---- softmax / gelu / layer norm ---------------------------------------------

Tensor softmax(const Tensor& x) {
  check(x.rank() >= 1 && x.dim(x.rank() - 1) > 0, "softmax: empty axis");
  check_finite_input(x, "softmax");
  const i64 cols = x.dim(x.rank() - 1);
  const i64 rows = x.numel() / cols;
  const bool rg = want_grad({&x});
  Tensor out = make_op_output(x.shape(), rg);
  kern::softmax_rows(x.data(), out.data(), rows, cols);
  if (rg) {
    record([x, out, rows, cols]() {
      kern::softmax_rows_backward(out.data(), out.grad(),
                                  const_cast<float*>(x.grad()), rows, cols);
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  check(axis >= 0 && axis < static_cast<int>(x.rank()),
        "softmax: axis out of range for shape " + shape_str(x.shape()));
  if (axis == static_cast<int>(x.rank()) - 1) return softmax(x);
  check(x.dim(axis) > 0, "softmax: empty axis");
  check_finite_input(x, "softmax");
  const i64 ax = x.dim(axis);
  i64 outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output(x.shape(), rg);
  const float* xp = x.data();
  float* yp = out.data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 in = 0; in < inner; ++in) {
      const i64 base = o * ax * inner + in;
      float mx = xp[base];
      for (i64 j = 1; j < ax; ++j)
        mx = std::max(mx, xp[base + j * inner]);
      float sum = 0.0f;
      for (i64 j = 0; j < ax; ++j) {
        const float e = std::exp(xp[base + j * inner] - mx);
        yp[base + j * inner] = e;
        sum += e;
      }
      for (i64 j = 0; j < ax; ++j) yp[base + j * inner] /= sum;
    }
  }
  if (rg) {
    record([x, out, outer, inner, ax]() {
      const float* y = out.data();
      const float* dy = out.grad();
      float* dx = const_cast<float*>(x.grad());
      for (i64 o = 0; o < outer; ++o) {
        for (i64 in = 0; in < inner; ++in) {
          const i64 base = o * ax * inner + in;
          float dot = 0.0f;
          for (i64 j = 0; j < ax; ++j)
            dot += y[base + j * inner] * dy[base + j * inner];
          for (i64 j = 0; j < ax; ++j)
            dx[base + j * inner] +=
                y[base + j * inner] * (dy[base + j * inner] - dot);
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  check_finite_input(x, "gelu");
  const i64 n = x.numel();
  const bool rg = want_grad({&x});
  Tensor out = make_op_output(x.shape(), rg);
  kern::gelu_forward(x.data(), out.data(), n);
  if (rg) {
    record([x, out, n]() {
      kern::gelu_backward(x.data(), out.grad(), const_cast<float*>(x.grad()),
                          n);
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, float eps) {
  check(x.rank() >= 1, "layer_norm: rank 0 input");
  const i64 cols = x.dim(x.rank() - 1);
  const i64 rows = x.numel() / cols;
  const bool rg = want_grad({&x});
  Tensor out = make_op_output(x.shape(), rg);
  kern::layer_norm_rows(x.data(), out.data(), rows, cols, eps);
  if (rg) {
    record([x, out, rows, cols, eps]() {
      kern::layer_norm_rows_backward(x.data(), out.grad(),
                                     const_cast<float*>(x.grad()), rows, cols,
                                     eps);
    });
  }
  return out;
}

// ---- gather / layout ----------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<i64>& indices) {
  check(table.rank() == 2, "embedding: table must be 2-D");
  const i64 rows = table.dim(0), d = table.dim(1);
  for (i64 idx : indices) {
    check(idx >= 0 && idx < rows, "embedding: index " + std::to_string(idx) +
                                      " out of range [0," +
                                      std::to_string(rows) + ")");
  }
  const i64 n = static_cast<i64>(indices.size());
  const bool rg = want_grad({&table});
  Tensor out = make_op_output({n, d}, rg);
  const float* tp = table.data();
  float* op = out.data();
  for (i64 i = 0; i < n; ++i) {
    std::memcpy(op + i * d, tp + indices[i] * d,
                sizeof(float) * static_cast<size_t>(d));
  }
  if (rg) {
    record([table, out, indices, n, d]() {
      // scatter-add; serial over positions keeps the sum order fixed
      float* gt = const_cast<float*>(table.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < n; ++i) {
        float* dst = gt + indices[i] * d;
        const float* src = g + i * d;
        for (i64 j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, i64 start, i64 len) {
  check(x.rank() == 2, "slice_rows: input must be 2-D");
  check(start >= 0 && len >= 0 && start + len <= x.dim(0),
        "slice_rows: range out of bounds");
  const i64 d = x.dim(1);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({len, d}, rg);
  std::memcpy(out.data(), x.data() + start * d,
              sizeof(float) * static_cast<size_t>(len * d));
  if (rg) {
    record([x, out, start, len, d]() {
      float* gx = const_cast<float*>(x.grad()) + start * d;
      const float* g = out.grad();
      for (i64 i = 0; i < len * d; ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor take_axis1(const Tensor& x, i64 index) {
  check(x.rank() == 3, "take_axis1: input must be 3-D");
  check(index >= 0 && index < x.dim(1), "take_axis1: index out of range");
  const i64 b = x.dim(0), n = x.dim(1), d = x.dim(2);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({b, d}, rg);
  for (i64 i = 0; i < b; ++i) {
    std::memcpy(out.data() + i * d, x.data() + (i * n + index) * d,
                sizeof(float) * static_cast<size_t>(d));
  }
  if (rg) {
    record([x, out, index, b, n, d]() {
      float* gx = const_cast<float*>(x.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < b; ++i) {
        float* dst = gx + (i * n + index) * d;
        const float* src = g + i * d;
        for (i64 j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor take_rows_strided(const Tensor& x, i64 offset, i64 stride) {
  check(x.rank() == 2, "take_rows_strided: input must be 2-D");
  check(stride > 0 && offset >= 0 && offset < stride &&
            x.dim(0) % stride == 0,
        "take_rows_strided: bad offset/stride");
  const i64 rows = x.dim(0) / stride, d = x.dim(1);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({rows, d}, rg);
  for (i64 i = 0; i < rows; ++i) {
    std::memcpy(out.data() + i * d, x.data() + (i * stride + offset) * d,
                sizeof(float) * static_cast<size_t>(d));
  }
  if (rg) {
    record([x, out, offset, stride, rows, d]() {
      float* gx = const_cast<float*>(x.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < rows; ++i) {
        float* dst = gx + (i * stride + offset) * d;
        const float* src = g + i * d;
        for (i64 j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat_axis1(const Tensor& a, const Tensor& b) {
  check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
            a.dim(2) == b.dim(2),
        "concat_axis1: incompatible shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  const i64 g = a.dim(0), r1 = a.dim(1), r2 = b.dim(1), c = a.dim(2);
  const bool rg = want_grad({&a, &b});
  Tensor out = make_op_output({g, r1 + r2, c}, rg);
  for (i64 gi = 0; gi < g; ++gi) {
    std::memcpy(out.data() + gi * (r1 + r2) * c, a.data() + gi * r1 * c,
                sizeof(float) * static_cast<size_t>(r1 * c));
    std::memcpy(out.data() + (gi * (r1 + r2) + r1) * c, b.data() + gi * r2 * c,
                sizeof(float) * static_cast<size_t>(r2 * c));
  }
  if (rg) {
    record([a, b, out, g, r1, r2, c]() {
      const float* gr = out.grad();
      if (a.requires_grad()) {
        float* ga = const_cast<float*>(a.grad());
        for (i64 gi = 0; gi < g; ++gi) {
          const float* src = gr + gi * (r1 + r2) * c;
          float* dst = ga + gi * r1 * c;
          for (i64 i = 0; i < r1 * c; ++i) dst[i] += src[i];
        }
      }
      if (b.requires_grad()) {
        float* gb = const_cast<float*>(b.grad());
        for (i64 gi = 0; gi < g; ++gi) {
          const float* src = gr + (gi * (r1 + r2) + r1) * c;
          float* dst = gb + gi * r2 * c;
          for (i64 i = 0; i < r2 * c; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor permute0213(const Tensor& x) {
  check(x.rank() == 4, "permute0213: input must be 4-D");
  const i64 a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({a, c, b, d}, rg);
  const float* xp = x.data();
  float* op = out.data();
  for (i64 i = 0; i < a; ++i)
    for (i64 j = 0; j < b; ++j)
      for (i64 k = 0; k < c; ++k)
        std::memcpy(op + ((i * c + k) * b + j) * d,
                    xp + ((i * b + j) * c + k) * d,
                    sizeof(float) * static_cast<size_t>(d));
  if (rg) {
    record([x, out, a, b, c, d]() {
      float* gx = const_cast<float*>(x.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < a; ++i)
        for (i64 j = 0; j < b; ++j)
          for (i64 k = 0; k < c; ++k) {
            float* dst = gx + ((i * b + j) * c + k) * d;
            const float* src = g + ((i * c + k) * b + j) * d;
            for (i64 l = 0; l < d; ++l) dst[l] += src[l];
          }
    });
  }
  return out;
}

Tensor repeat_rows(const Tensor& x, i64 times) {
  check(x.rank() >= 1 && times >= 1, "repeat_rows: bad arguments");
  const i64 b = x.dim(0);
  const i64 rest = x.numel() / b;
  Shape out_shape = x.shape();
  out_shape[0] = b * times;
  const bool rg = want_grad({&x});
  Tensor out = make_op_output(std::move(out_shape), rg);
  const float* xp = x.data();
  float* op = out.data();
  for (i64 i = 0; i < b; ++i)
    for (i64 t = 0; t < times; ++t)
      std::memcpy(op + (i * times + t) * rest, xp + i * rest,
                  sizeof(float) * static_cast<size_t>(rest));
  if (rg) {
    record([x, out, b, times, rest]() {
      float* gx = const_cast<float*>(x.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < b; ++i) {
        float* dst = gx + i * rest;
        for (i64 t = 0; t < times; ++t) {
          const float* src = g + (i * times + t) * rest;
          for (i64 j = 0; j < rest; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& x) {
  check(x.rank() == 2, "transpose2d: input must be 2-D");
  const i64 m = x.dim(0), n = x.dim(1);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({n, m}, rg);
  const float* xp = x.data();
  float* op = out.data();
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) op[j * m + i] = xp[i * n + j];
  if (rg) {
    record([x, out, m, n]() {
      float* gx = const_cast<float*>(x.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor mean_axis1(const Tensor& x) {
  check(x.rank() == 3, "mean_axis1: input must be 3-D");
  const i64 b = x.dim(0), t = x.dim(1), d = x.dim(2);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({b, d}, rg);
  const float inv = 1.0f / static_cast<float>(t);
  const float* xp = x.data();
  float* op = out.data();
  for (i64 i = 0; i < b; ++i) {
    float* dst = op + i * d;
    for (i64 s = 0; s < t; ++s) {
      const float* src = xp + (i * t + s) * d;
      for (i64 j = 0; j < d; ++j) dst[j] += src[j];
    }
    for (i64 j = 0; j < d; ++j) dst[j] *= inv;
  }
  if (rg) {
    record([x, out, b, t, d, inv]() {
      float* gx = const_cast<float*>(x.grad());
      const float* g = out.grad();
      for (i64 i = 0; i < b; ++i) {
        const float* src = g + i * d;
        for (i64 s = 0; s < t; ++s) {
          float* dst = gx + (i * t + s) * d;
          for (i64 j = 0; j < d; ++j) dst[j] += src[j] * inv;
        }
      }
    });
  }
  return out;
}

Tensor weighted_sum_axis1(const Tensor& x, const Tensor& w) {
  check(x.rank() == 3 && w.rank() == 2 && x.dim(0) == w.dim(0) &&
            x.dim(1) == w.dim(1),
        "weighted_sum_axis1: incompatible shapes " + shape_str(x.shape()) +
            " and " + shape_str(w.shape()));
  const i64 b = x.dim(0), m = x.dim(1), d = x.dim(2);
  const bool rg = want_grad({&x, &w});
  Tensor out = make_op_output({b, d}, rg);
  const float* xp = x.data();
  const float* wp = w.data();
  float* op = out.data();
  for (i64 i = 0; i < b; ++i) {
    float* dst = op + i * d;
    for (i64 s = 0; s < m; ++s) {
      const float wv = wp[i * m + s];
      const float* src = xp + (i * m + s) * d;
      for (i64 j = 0; j < d; ++j) dst[j] += wv * src[j];
    }
  }
  if (rg) {
    record([x, w, out, b, m, d]() {
      const float* g = out.grad();
      if (x.requires_grad()) {
        float* gx = const_cast<float*>(x.grad());
        const float* wp2 = w.data();
        for (i64 i = 0; i < b; ++i)
          for (i64 s = 0; s < m; ++s) {
            const float wv = wp2[i * m + s];
            float* dst = gx + (i * m + s) * d;
            const float* src = g + i * d;
            for (i64 j = 0; j < d; ++j) dst[j] += wv * src[j];
          }
      }
      if (w.requires_grad()) {
        float* gw = const_cast<float*>(w.grad());
        const float* xp2 = x.data();
        for (i64 i = 0; i < b; ++i)
          for (i64 s = 0; s < m; ++s) {
            const float* xr = xp2 + (i * m + s) * d;
            const float* src = g + i * d;
            float acc = 0.0f;
            for (i64 j = 0; j < d; ++j) acc += xr[j] * src[j];
            gw[i * m + s] += acc;
          }
      }
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  check(x.rank() == 2, "l2_normalize_rows: input must be 2-D");
  const i64 rows = x.dim(0), d = x.dim(1);
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({rows, d}, rg);
  const float* xp = x.data();
  float* op = out.data();
  for (i64 i = 0; i < rows; ++i) {
    double nsq = 0.0;
    for (i64 j = 0; j < d; ++j)
      nsq += static_cast<double>(xp[i * d + j]) * xp[i * d + j];
    if (nsq < 1e-24) {
      throw std::domain_error("l2_normalize_rows: zero-norm row " +
                              std::to_string(i));
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(nsq));
    for (i64 j = 0; j < d; ++j) op[i * d + j] = xp[i * d + j] * inv;
  }
  if (rg) {
    record([x, out, rows, d]() {
      float* gx = const_cast<float*>(x.grad());
      const float* y = out.data();
      const float* dy = out.grad();
      const float* xp2 = x.data();
      for (i64 i = 0; i < rows; ++i) {
        double nsq = 0.0, dot = 0.0;
        for (i64 j = 0; j < d; ++j) {
          nsq += static_cast<double>(xp2[i * d + j]) * xp2[i * d + j];
          dot += static_cast<double>(y[i * d + j]) * dy[i * d + j];
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(nsq));
        const float dotf = static_cast<float>(dot);
        for (i64 j = 0; j < d; ++j)
          gx[i * d + j] += inv * (dy[i * d + j] - y[i * d + j] * dotf);
      }
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  const i64 n = x.numel();
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({1}, rg);
  double acc = 0.0;
  const float* xp = x.data();
  for (i64 i = 0; i < n; ++i) acc += xp[i];
  out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
  if (rg) {
    record([x, out, n]() {
      const float g = out.grad()[0] / static_cast<float>(n);
      float* gx = const_cast<float*>(x.grad());
      for (i64 i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  const i64 n = x.numel();
  const bool rg = want_grad({&x});
  Tensor out = make_op_output({1}, rg);
  double acc = 0.0;
  const float* xp = x.data();
  for (i64 i = 0; i < n; ++i) acc += xp[i];
  out.data()[0] = static_cast<float>(acc);
  if (rg) {
    record([x, out, n]() {
      const float g = out.grad()[0];
      float* gx = const_cast<float*>(x.grad());
      for (i64 i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor add_attn_mask(const Tensor& scores, const Tensor& mask) {
  check(scores.rank() == 4 && mask.rank() == 2 &&
            scores.dim(0) == mask.dim(0) && scores.dim(3) == mask.dim(1),
        "add_attn_mask: incompatible shapes " + shape_str(scores.shape()) +
            " and " + shape_str(mask.shape()));
  check(!mask.requires_grad(), "add_attn_mask: mask must not require grad");
  const i64 b = scores.dim(0), h = scores.dim(1), q = scores.dim(2),
            s = scores.dim(3);
  const bool rg = want_grad({&scores});
  Tensor out = make_op_output(scores.shape(), rg);
  const float* xp = scores.data();
  const float* mp = mask.data();
  float* op = out.data();
  for (i64 i = 0; i < b; ++i) {
    const float* mi = mp + i * s;
    for (i64 r = 0; r < h * q; ++r) {
      const float* src = xp + (i * h * q + r) * s;
      float* dst = op + (i * h * q + r) * s;
      for (i64 j = 0; j < s; ++j) dst[j] = src[j] + mi[j];
    }
  }
  if (rg) {
    record([scores, out]() {
      float* gx = const_cast<float*>(scores.grad());
      const float* g = out.grad();
      const i64 n = out.numel();
      for (i64 i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, float rate, RngStream& rng, bool training) {
  check(rate >= 0.0f && rate < 1.0f,
        "dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0f) return x;
  const i64 n = x.numel();
  Tensor mask = Tensor::zeros(x.shape());
  const float keep_scale = 1.0f / (1.0f - rate);
  float* mp = mask.data();
  for (i64 i = 0; i < n; ++i) {
    mp[i] = rng.next_double() >= rate ? keep_scale : 0.0f;
  }
  return mul(x, mask);
}

Tensor nip_loss(const Tensor& logits, const std::vector<i64>& targets) {
  check(logits.rank() == 2, "nip_loss: logits must be 2-D");
  const i64 n = logits.dim(0), v = logits.dim(1);
  check(static_cast<i64>(targets.size()) == n,
        "nip_loss: target count " + std::to_string(targets.size()) +
            " does not match batch " + std::to_string(n));
  for (i64 t : targets) {
    check(t >= 0 && t < v, "nip_loss: target index " + std::to_string(t) +
                               " out of vocabulary [0," + std::to_string(v) +
                               ")");
  }
  const bool rg = want_grad({&logits});
  Tensor out = make_op_output({1}, rg);
  const float* lp = logits.data();
  double total = 0.0;
  for (i64 i = 0; i < n; ++i) {
    const float* row = lp + i * v;
    float mx = row[0];
    for (i64 j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (i64 j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    total += (mx + std::log(sum)) - row[targets[i]];
  }
  out.data()[0] = static_cast<float>(total / static_cast<double>(n));
  if (rg) {
    record([logits, out, targets, n, v]() {
      const float g = out.grad()[0] / static_cast<float>(n);
      float* gl = const_cast<float*>(logits.grad());
      const float* lp2 = logits.data();
      for (i64 i = 0; i < n; ++i) {
        const float* row = lp2 + i * v;
        float* grow = gl + i * v;
        float mx = row[0];
        for (i64 j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (i64 j = 0; j < v; ++j)
          sum += std::exp(static_cast<double>(row[j]) - mx);
        const double inv = 1.0 / sum;
        for (i64 j = 0; j < v; ++j) {
          const float p = static_cast<float>(
              std::exp(static_cast<double>(row[j]) - mx) * inv);
          grow[j] += g * (p - (j == targets[i] ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

Tensor pairwise_kl_mean(const Tensor& p) {
  check(p.rank() == 3, "pairwise_kl_mean: input must be [G,K,V]");
  const i64 g = p.dim(0), k = p.dim(1), v = p.dim(2);
  const float* pp = p.data();
  for (i64 r = 0; r < g * k; ++r) {
    double sum = 0.0;
    for (i64 j = 0; j < v; ++j) sum += pp[r * v + j];
    if (std::abs(sum - 1.0) > 1e-4) {
      throw std::invalid_argument(
          "pairwise_kl_mean: row " + std::to_string(r) +
          " is not a probability distribution (sum = " + std::to_string(sum) +
          ")");
    }
  }
  const bool rg = want_grad({&p});
  Tensor out = make_op_output({1}, rg);
  if (k <= 1) {
    out.data()[0] = 0.0f;
    return out;
  }
  constexpr double kTiny = 1e-12;
  double total = 0.0;
  std::vector<double> lnp(static_cast<size_t>(k * v));
  for (i64 gi = 0; gi < g; ++gi) {
    const float* pg = pp + gi * k * v;
    for (i64 i = 0; i < k * v; ++i)
      lnp[static_cast<size_t>(i)] = std::log(std::max<double>(pg[i], kTiny));
    double acc = 0.0;
    for (i64 i = 0; i < k; ++i) {
      for (i64 j = 0; j < k; ++j) {
        if (i == j) continue;
        for (i64 t = 0; t < v; ++t) {
          acc += pg[i * v + t] * (lnp[static_cast<size_t>(i * v + t)] -
                                  lnp[static_cast<size_t>(j * v + t)]);
        }
      }
    }
    total += acc / static_cast<double>(k * (k - 1));
  }
  out.data()[0] = static_cast<float>(total / static_cast<double>(g));
  if (rg) {
    record([p, out, g, k, v]() {
      const double c = static_cast<double>(out.grad()[0]) /
                       (static_cast<double>(g) * k * (k - 1));
      float* gp = const_cast<float*>(p.grad());
      const float* pp2 = p.data();
      constexpr double kTiny2 = 1e-12;
      std::vector<double> lnp2(static_cast<size_t>(k * v));
      std::vector<double> s_ln(static_cast<size_t>(v));
      std::vector<double> s_p(static_cast<size_t>(v));
      for (i64 gi = 0; gi < g; ++gi) {
        const float* pg = pp2 + gi * k * v;
        float* gg = gp + gi * k * v;
        for (i64 i = 0; i < k * v; ++i)
          lnp2[static_cast<size_t>(i)] =
              std::log(std::max<double>(pg[i], kTiny2));
        std::fill(s_ln.begin(), s_ln.end(), 0.0);
        std::fill(s_p.begin(), s_p.end(), 0.0);
        for (i64 i = 0; i < k; ++i)
          for (i64 t = 0; t < v; ++t) {
            s_ln[static_cast<size_t>(t)] += lnp2[static_cast<size_t>(i * v + t)];
            s_p[static_cast<size_t>(t)] += pg[i * v + t];
          }
        // d/dp_i[t] of sum_{i!=j} KL(p_i||p_j):
        //   K*ln p_i[t] + K - S_ln[t] - S_p[t]/p_i[t]
        for (i64 i = 0; i < k; ++i)
          for (i64 t = 0; t < v; ++t) {
            const double pi = std::max<double>(pg[i * v + t], kTiny2);
            const double term = static_cast<double>(k) *
                                    lnp2[static_cast<size_t>(i * v + t)] +
                                static_cast<double>(k) -
                                s_ln[static_cast<size_t>(t)] -
                                s_p[static_cast<size_t>(t)] / pi;
            gg[i * v + t] += static_cast<float>(c * term);
          }
      }
    });
  }
  return out;
}

}  // namespace plr
