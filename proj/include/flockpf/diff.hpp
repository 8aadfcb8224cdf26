#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace flockpf::diff {

/// Dense 2-D tensor of 64-bit floats with an optional gradient buffer.
/// Copying a Tensor shares the underlying storage (handle semantics), so
/// parameters updated in place are seen by every holder.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, bool requires_grad = false, bool leaf = false);

  static Tensor zeros(int rows, int cols);
  static Tensor constant(int rows, int cols, const std::vector<double>& values);
  static Tensor scalar(double v);
  /// Trainable leaf: gradients accumulate across backward() calls until
  /// zero_grad() is called.
  static Tensor param(int rows, int cols);

  bool defined() const { return d_ != nullptr; }
  int rows() const { return d_->rows; }
  int cols() const { return d_->cols; }
  std::size_t size() const { return d_->val.size(); }

  // Handle semantics: a const Tensor is a const handle, the storage stays
  // writable (ops capture tensors by value into backward closures).
  double* data() const { return d_->val.data(); }
  double& at(int r, int c) const { return d_->val[static_cast<std::size_t>(r) * d_->cols + c]; }
  std::vector<double>& values() const { return d_->val; }

  bool requires_grad() const { return d_->requires_grad; }
  bool is_leaf() const { return d_->leaf; }
  /// Gradient buffer; allocated (zeroed) on first touch.
  std::vector<double>& grad() const;
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() const;

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  struct Data {
    int rows = 0, cols = 0;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = false;
  };
  std::shared_ptr<Data> d_;
};

/// Records one operation per forward call; backward() replays the closures
/// in reverse. A tape is single-writer; independent tapes are fully
/// isolated. Passing a null Tape* to any op runs the identical forward
/// arithmetic without recording.
class Tape {
 public:
  void record(const Tensor& out, std::function<void()> backward_fn);
  /// Accumulates d(out)/d(leaf) into every reachable leaf's grad buffer.
  /// Interior gradients are reset at entry, so consecutive calls accumulate
  /// exactly one extra copy into the leaves.
  void backward(const Tensor& out);
  std::size_t size() const { return nodes_.size(); }
  /// Outputs of every recorded op, oldest first.
  const std::vector<Tensor>& node_outputs() const { return outs_; }

 private:
  std::vector<Tensor> outs_;
  std::vector<std::function<void()>> nodes_;
};

// Elementwise and linear algebra primitives. Shapes are strict: no
// broadcasting beyond the explicit row-vector variants.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);
/// y = x W + b with x [m,in], W [in,out], b [1,out].
Tensor affine(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);
Tensor leaky_relu(Tape* tape, const Tensor& x, double slope = 0.01);
/// Row-wise softmax of (scale * x).
Tensor softmax_rows(Tape* tape, const Tensor& x, double scale);
/// softmax(Q K^T / sqrt(P)) V with row-wise softmax; Q, K, V are [N, P].
Tensor softmax_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v);
Tensor sum_all(Tape* tape, const Tensor& x);
Tensor mean_rows(Tape* tape, const Tensor& x);
/// Σ_i w_i x_i over rows; w is [m,1].
Tensor weighted_sum_rows(Tape* tape, const Tensor& x, const Tensor& w);
Tensor add_rowvec(Tape* tape, const Tensor& x, const Tensor& r);
Tensor sub_rowvec(Tape* tape, const Tensor& x, const Tensor& r);
Tensor square(Tape* tape, const Tensor& x);
/// Elementwise sqrt(max(x, 0)); the derivative is zeroed near 0 instead of
/// blowing up.
Tensor sqrt_guard(Tape* tape, const Tensor& x);
/// Elementwise x^p for strictly positive x.
Tensor pow_const(Tape* tape, const Tensor& x, double p);
Tensor clamp_min(Tape* tape, const Tensor& x, double lo);
/// x / s with s a [1,1] tensor.
Tensor div_scalar(Tape* tape, const Tensor& x, const Tensor& s);
Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);

/// out_m = Σ_i coef_i · exp(−‖query_m − center_i‖² / (2 σ_i²)).
/// Differentiable in every argument; constants simply carry no gradient.
/// Serves both kernel-density reconstruction (differentiable centers) and
/// fixed-mixture evaluation at differentiable query points.
Tensor gauss_kde(Tape* tape, const Tensor& query, const Tensor& centers,
                 const Tensor& coef, const Tensor& sigma);

}  // namespace flockpf::diff
