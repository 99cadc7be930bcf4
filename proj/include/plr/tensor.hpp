#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "plr/rng.hpp"

namespace plr {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

std::string shape_str(const Shape& s);

// Dense float32 tensor with shared storage. Copies alias the same buffers, so
// a tensor handed to an op and the copy kept by the caller see the same data
// and the same gradient accumulator. Values are treated as immutable once an
// op has produced them; only gradient buffers are written after the fact.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> values);
  static Tensor scalar(float value) { return from_data({1}, {value}); }

  const Shape& shape() const { return shape_; }
  i64 dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  i64 numel() const;
  bool defined() const { return static_cast<bool>(data_); }

  float* data() { return data_->data(); }
  const float* data() const { return data_->data(); }
  float at(i64 i) const { return (*data_)[static_cast<size_t>(i)]; }
  float item() const;  // value of a 1-element tensor

  bool requires_grad() const { return requires_grad_; }
  // Marks a leaf parameter; allocates its gradient accumulator.
  Tensor& set_requires_grad();
  float* grad() { return grad_ ? grad_->data() : nullptr; }
  const float* grad() const { return grad_ ? grad_->data() : nullptr; }
  void zero_grad();

  // Same storage viewed under a new shape (element count must match).
  Tensor reshape(Shape new_shape) const;

  bool all_finite() const;
  std::vector<float> to_vector() const { return *data_; }

 private:
  friend class Tape;
  friend Tensor make_op_output(Shape shape, bool requires_grad);

  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
  std::shared_ptr<std::vector<float>> grad_;
  bool requires_grad_ = false;
};

// Reverse-mode tape. One tape is active per thread at a time; ops record a
// backward closure when any input requires a gradient. Leaf gradients
// accumulate across backward() calls, intermediate gradients are reset at the
// start of each call.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  void note_intermediate(const std::shared_ptr<std::vector<float>>& g);

  // Populates d(loss)/d(leaf) for every recorded leaf. loss must be scalar.
  void backward(Tensor& loss);

  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<std::vector<float>>> intermediates_;
  Tape* previous_ = nullptr;
};

// ---- ops ------------------------------------------------------------------
// All ops validate shapes, refuse non-finite inputs where the contract says
// so, and record gradients when a tape is active and an input requires them.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k] -> [m,n]
Tensor bmm(const Tensor& a, const Tensor& b);        // [g,m,k]x[g,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);     // [g,m,k]x[g,n,k]

// b's shape must equal a's shape or a trailing suffix of it.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same shape, elementwise
Tensor scale(const Tensor& a, float c);

Tensor softmax(const Tensor& x);         // over the last axis
Tensor softmax(const Tensor& x, int axis);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, float eps = 1e-6f);  // last axis, no affine

// rows of table gathered by index; backward scatter-adds into the table
Tensor embedding(const Tensor& table, const std::vector<i64>& indices);
Tensor slice_rows(const Tensor& x, i64 start, i64 len);   // 2-D row range
Tensor take_axis1(const Tensor& x, i64 index);            // [B,n,d] -> [B,d]
Tensor take_rows_strided(const Tensor& x, i64 offset, i64 stride);  // 2-D
Tensor concat_axis1(const Tensor& a, const Tensor& b);    // [g,r,c] along r
Tensor permute0213(const Tensor& x);                      // swap axes 1 and 2
Tensor repeat_rows(const Tensor& x, i64 times);  // row b -> rows b*times..+
Tensor transpose2d(const Tensor& x);
Tensor mean_axis1(const Tensor& x);                        // [B,T,d] -> [B,d]
Tensor weighted_sum_axis1(const Tensor& x, const Tensor& w);  // [B,M,d],[B,M]
Tensor l2_normalize_rows(const Tensor& x);  // zero-norm row is an error
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);

// additive attention mask: scores [B,H,q,S] += mask [B,S] broadcast
Tensor add_attn_mask(const Tensor& scores, const Tensor& mask);

// inverted dropout; identity when training=false or rate==0
Tensor dropout(const Tensor& x, float rate, RngStream& rng, bool training);

// mean over rows of -log softmax(logits)[target]; log-sum-exp stabilized
Tensor nip_loss(const Tensor& logits, const std::vector<i64>& targets);

// mean over leading groups of pairwise KL across the K rows of each group:
// p is [G,K,V] of probability rows; result = mean_g (1/(K(K-1))) sum_{i!=j}
// KL(p_gi || p_gj). K == 1 yields 0.
Tensor pairwise_kl_mean(const Tensor& p);

void backward(Tensor& loss);

}  // namespace plr
