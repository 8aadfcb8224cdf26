#include "flockpf/diff.hpp"

#include <cmath>
#include <cstring>

#include "flockpf/common.hpp"

namespace flockpf::diff {

namespace {

void check(bool ok, const char* msg) {
  if (!ok) throw ConfigError(std::string("diff: ") + msg);
}

}  // namespace

Tensor::Tensor(int rows, int cols, bool requires_grad, bool leaf) : d_(std::make_shared<Data>()) {
  check(rows >= 1 && cols >= 1, "tensor dims must be positive");
  d_->rows = rows;
  d_->cols = cols;
  d_->val.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  d_->requires_grad = requires_grad;
  d_->leaf = leaf;
}

Tensor Tensor::zeros(int rows, int cols) { return Tensor(rows, cols); }

Tensor Tensor::constant(int rows, int cols, const std::vector<double>& values) {
  Tensor t(rows, cols);
  check(values.size() == t.size(), "constant: value count does not match shape");
  t.d_->val = values;
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t(1, 1);
  t.d_->val[0] = v;
  return t;
}

Tensor Tensor::param(int rows, int cols) { return Tensor(rows, cols, /*requires_grad=*/true, /*leaf=*/true); }

std::vector<double>& Tensor::grad() const {
  if (d_->grad.empty()) d_->grad.assign(d_->val.size(), 0.0);
  return d_->grad;
}

void Tensor::zero_grad() const {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

void Tape::record(const Tensor& out, std::function<void()> backward_fn) {
  outs_.push_back(out);
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& out) {
  check(out.defined() && out.rows() == 1 && out.cols() == 1, "backward: output must be scalar");
  check(out.requires_grad(), "backward: output does not require grad");
  // Reset interior gradients; leaves keep accumulating.
  for (auto& t : outs_) {
    if (!t.is_leaf()) t.zero_grad();
  }
  Tensor seed = out;
  seed.zero_grad();
  seed.grad()[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
}

namespace {

Tensor make_out(const Tape* tape, int rows, int cols, bool any_input_tracked) {
  return Tensor(rows, cols, tape != nullptr && any_input_tracked, false);
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Tensor y = make_out(tape, a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  if (y.requires_grad()) {
    tape->record(y, [a, b, y]() {
      const auto& g = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Tensor y = make_out(tape, a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] - b.data()[i];
  if (y.requires_grad()) {
    tape->record(y, [a, b, y]() {
      const auto& g = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Tensor y = make_out(tape, a.rows(), a.cols(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  if (y.requires_grad()) {
    tape->record(y, [a, b, y]() {
      const auto& g = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return y;
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
  Tensor y = make_out(tape, a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = a.data()[i] * c;
  if (y.requires_grad()) {
    tape->record(y, [a, y, c]() {
      const auto& g = y.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return y;
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.cols() == b.rows(), "matmul: inner dims mismatch");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor y = make_out(tape, m, n, a.requires_grad() || b.requires_grad());
  for (int i = 0; i < m; ++i) {
    const double* ar = a.data() + static_cast<std::size_t>(i) * k;
    double* yr = y.data() + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) yr[j] += av * br[j];
    }
  }
  if (y.requires_grad()) {
    tape->record(y, [a, b, y, m, k, n]() {
      const double* g = y.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad().data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* gr = g + static_cast<std::size_t>(i) * n;
            const double* br = b.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
            ga[static_cast<std::size_t>(i) * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            const double av = a.data()[static_cast<std::size_t>(i) * k + p];
            const double* gr = g + static_cast<std::size_t>(i) * n;
            double* gbr = gb + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) gbr[j] += av * gr[j];
          }
      }
    });
  }
  return y;
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
  check(a.cols() == b.cols(), "matmul_nt: inner dims mismatch");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor y = make_out(tape, m, n, a.requires_grad() || b.requires_grad());
  for (int i = 0; i < m; ++i) {
    const double* ar = a.data() + static_cast<std::size_t>(i) * k;
    double* yr = y.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* br = b.data() + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
      yr[j] = acc;
    }
  }
  if (y.requires_grad()) {
    tape->record(y, [a, b, y, m, k, n]() {
      const double* g = y.grad().data();
      if (a.requires_grad()) {
        double* ga = a.grad().data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const double gv = g[static_cast<std::size_t>(i) * n + j];
            const double* br = b.data() + static_cast<std::size_t>(j) * k;
            double* gar = ga + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) gar[p] += gv * br[p];
          }
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < m; ++i) {
            const double gv = g[static_cast<std::size_t>(i) * n + j];
            const double* ar = a.data() + static_cast<std::size_t>(i) * k;
            double* gbr = gb + static_cast<std::size_t>(j) * k;
            for (int p = 0; p < k; ++p) gbr[p] += gv * ar[p];
          }
      }
    });
  }
  return y;
}

Tensor affine(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  check(x.cols() == w.rows(), "affine: input width does not match weight rows");
  check(b.rows() == 1 && b.cols() == w.cols(), "affine: bias shape");
  const int m = x.rows(), in = x.cols(), out = w.cols();
  Tensor y = make_out(tape, m, out, x.requires_grad() || w.requires_grad() || b.requires_grad());
  for (int i = 0; i < m; ++i) {
    double* yr = y.data() + static_cast<std::size_t>(i) * out;
    std::memcpy(yr, b.data(), sizeof(double) * out);
    const double* xr = x.data() + static_cast<std::size_t>(i) * in;
    for (int p = 0; p < in; ++p) {
      const double xv = xr[p];
      if (xv == 0.0) continue;
      const double* wr = w.data() + static_cast<std::size_t>(p) * out;
      for (int j = 0; j < out; ++j) yr[j] += xv * wr[j];
    }
  }
  if (y.requires_grad()) {
    tape->record(y, [x, w, b, y, m, in, out]() {
      const double* g = y.grad().data();
      if (x.requires_grad()) {
        double* gx = x.grad().data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < in; ++p) {
            const double* gr = g + static_cast<std::size_t>(i) * out;
            const double* wr = w.data() + static_cast<std::size_t>(p) * out;
            double acc = 0.0;
            for (int j = 0; j < out; ++j) acc += gr[j] * wr[j];
            gx[static_cast<std::size_t>(i) * in + p] += acc;
          }
      }
      if (w.requires_grad()) {
        double* gw = w.grad().data();
        for (int i = 0; i < m; ++i) {
          const double* xr = x.data() + static_cast<std::size_t>(i) * in;
          const double* gr = g + static_cast<std::size_t>(i) * out;
          for (int p = 0; p < in; ++p) {
            const double xv = xr[p];
            if (xv == 0.0) continue;
            double* gwr = gw + static_cast<std::size_t>(p) * out;
            for (int j = 0; j < out; ++j) gwr[j] += xv * gr[j];
          }
        }
      }
      if (b.requires_grad()) {
        double* gb = b.grad().data();
        for (int i = 0; i < m; ++i) {
          const double* gr = g + static_cast<std::size_t>(i) * out;
          for (int j = 0; j < out; ++j) gb[j] += gr[j];
        }
      }
    });
  }
  return y;
}

Tensor leaky_relu(Tape* tape, const Tensor& x, double slope) {
  Tensor y = make_out(tape, x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = x.data()[i];
    y.data()[i] = v >= 0.0 ? v : slope * v;
  }
  if (y.requires_grad()) {
    tape->record(y, [x, y, slope]() {
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (x.data()[i] >= 0.0 ? 1.0 : slope);
    });
  }
  return y;
}

Tensor softmax_rows(Tape* tape, const Tensor& x, double sc) {
  const int m = x.rows(), n = x.cols();
  Tensor y = make_out(tape, m, n, x.requires_grad());
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<std::size_t>(i) * n;
    double* yr = y.data() + static_cast<std::size_t>(i) * n;
    double mx = -1e300;
    for (int j = 0; j < n; ++j) mx = std::max(mx, sc * xr[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      yr[j] = std::exp(sc * xr[j] - mx);
      sum += yr[j];
    }
    for (int j = 0; j < n; ++j) yr[j] /= sum;
  }
  if (y.requires_grad()) {
    tape->record(y, [x, y, sc, m, n]() {
      const double* g = y.grad().data();
      double* gx = x.grad().data();
      for (int i = 0; i < m; ++i) {
        const double* yr = y.data() + static_cast<std::size_t>(i) * n;
        const double* gr = g + static_cast<std::size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
        double* gxr = gx + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) gxr[j] += sc * yr[j] * (gr[j] - dot);
      }
    });
  }
  return y;
}

Tensor softmax_attention(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v) {
  check(q.cols() == k.cols() && q.rows() == k.rows() && k.rows() == v.rows(), "softmax_attention: shape mismatch");
  Tensor scores = matmul_nt(tape, q, k);
  Tensor attn = softmax_rows(tape, scores, 1.0 / std::sqrt(static_cast<double>(q.cols())));
  return matmul(tape, attn, v);
}

Tensor sum_all(Tape* tape, const Tensor& x) {
  Tensor y = make_out(tape, 1, 1, x.requires_grad());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  y.data()[0] = acc;
  if (y.requires_grad()) {
    tape->record(y, [x, y]() {
      const double g = y.grad()[0];
      auto& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

Tensor mean_rows(Tape* tape, const Tensor& x) {
  const int m = x.rows(), n = x.cols();
  Tensor y = make_out(tape, 1, n, x.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y.data()[j] += x.at(i, j);
  for (int j = 0; j < n; ++j) y.data()[j] /= m;
  if (y.requires_grad()) {
    tape->record(y, [x, y, m, n]() {
      const double* g = y.grad().data();
      double* gx = x.grad().data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(i) * n + j] += g[j] / m;
    });
  }
  return y;
}

Tensor weighted_sum_rows(Tape* tape, const Tensor& x, const Tensor& w) {
  check(w.rows() == x.rows() && w.cols() == 1, "weighted_sum_rows: weight shape");
  const int m = x.rows(), n = x.cols();
  Tensor y = make_out(tape, 1, n, x.requires_grad() || w.requires_grad());
  for (int i = 0; i < m; ++i) {
    const double wi = w.data()[i];
    for (int j = 0; j < n; ++j) y.data()[j] += wi * x.at(i, j);
  }
  if (y.requires_grad()) {
    tape->record(y, [x, w, y, m, n]() {
      const double* g = y.grad().data();
      if (x.requires_grad()) {
        double* gx = x.grad().data();
        for (int i = 0; i < m; ++i) {
          const double wi = w.data()[i];
          for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(i) * n + j] += wi * g[j];
        }
      }
      if (w.requires_grad()) {
        double* gw = w.grad().data();
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += x.at(i, j) * g[j];
          gw[i] += acc;
        }
      }
    });
  }
  return y;
}

Tensor add_rowvec(Tape* tape, const Tensor& x, const Tensor& r) {
  check(r.rows() == 1 && r.cols() == x.cols(), "add_rowvec: shape");
  const int m = x.rows(), n = x.cols();
  Tensor y = make_out(tape, m, n, x.requires_grad() || r.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y.at(i, j) = x.at(i, j) + r.data()[j];
  if (y.requires_grad()) {
    tape->record(y, [x, r, y, m, n]() {
      const double* g = y.grad().data();
      if (x.requires_grad()) {
        double* gx = x.grad().data();
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) gx[i] += g[i];
      }
      if (r.requires_grad()) {
        double* gr = r.grad().data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gr[j] += g[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return y;
}

Tensor sub_rowvec(Tape* tape, const Tensor& x, const Tensor& r) {
  return add_rowvec(tape, x, scale(tape, r, -1.0));
}

Tensor square(Tape* tape, const Tensor& x) {
  Tensor y = make_out(tape, x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = x.data()[i] * x.data()[i];
  if (y.requires_grad()) {
    tape->record(y, [x, y]() {
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * x.data()[i] * g[i];
    });
  }
  return y;
}

Tensor sqrt_guard(Tape* tape, const Tensor& x) {
  Tensor y = make_out(tape, x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = std::sqrt(std::max(x.data()[i], 0.0));
  if (y.requires_grad()) {
    tape->record(y, [x, y]() {
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = y.data()[i];
        if (v > 1e-150) gx[i] += 0.5 / v * g[i];
      }
    });
  }
  return y;
}

Tensor pow_const(Tape* tape, const Tensor& x, double p) {
  Tensor y = make_out(tape, x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = std::pow(x.data()[i], p);
  if (y.requires_grad()) {
    tape->record(y, [x, y, p]() {
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += p * std::pow(x.data()[i], p - 1.0) * g[i];
    });
  }
  return y;
}

Tensor clamp_min(Tape* tape, const Tensor& x, double lo) {
  Tensor y = make_out(tape, x.rows(), x.cols(), x.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = std::max(x.data()[i], lo);
  if (y.requires_grad()) {
    tape->record(y, [x, y, lo]() {
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.data()[i] > lo) gx[i] += g[i];
    });
  }
  return y;
}

Tensor div_scalar(Tape* tape, const Tensor& x, const Tensor& s) {
  check(s.rows() == 1 && s.cols() == 1, "div_scalar: divisor must be 1x1");
  const double sv = s.data()[0];
  Tensor y = make_out(tape, x.rows(), x.cols(), x.requires_grad() || s.requires_grad());
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = x.data()[i] / sv;
  if (y.requires_grad()) {
    tape->record(y, [x, s, y, sv]() {
      const auto& g = y.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / sv;
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x.data()[i];
        s.grad()[0] -= acc / (sv * sv);
      }
    });
  }
  return y;
}

Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1) {
  check(0 <= c0 && c0 < c1 && c1 <= x.cols(), "slice_cols: bad range");
  const int m = x.rows(), n = x.cols(), w = c1 - c0;
  Tensor y = make_out(tape, m, w, x.requires_grad());
  for (int i = 0; i < m; ++i)
    std::memcpy(y.data() + static_cast<std::size_t>(i) * w, x.data() + static_cast<std::size_t>(i) * n + c0,
                sizeof(double) * w);
  if (y.requires_grad()) {
    tape->record(y, [x, y, c0, m, n, w]() {
      const double* g = y.grad().data();
      double* gx = x.grad().data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) gx[static_cast<std::size_t>(i) * n + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
    });
  }
  return y;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  const int m = parts.front().rows();
  int total = 0;
  bool any = false;
  for (const auto& p : parts) {
    check(p.rows() == m, "concat_cols: row mismatch");
    total += p.cols();
    any = any || p.requires_grad();
  }
  Tensor y = make_out(tape, m, total, any);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      std::memcpy(y.data() + static_cast<std::size_t>(i) * total + off, p.data() + static_cast<std::size_t>(i) * w,
                  sizeof(double) * w);
    off += w;
  }
  if (y.requires_grad()) {
    tape->record(y, [parts, y, m, total]() {
      const double* g = y.grad().data();
      int off2 = 0;
      for (auto& p : parts) {
        const int w = p.cols();
        if (p.requires_grad()) {
          double* gp = p.grad().data();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              gp[static_cast<std::size_t>(i) * w + j] += g[static_cast<std::size_t>(i) * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return y;
}

Tensor gauss_kde(Tape* tape, const Tensor& query, const Tensor& centers, const Tensor& coef, const Tensor& sigma) {
  const int m = query.rows(), d = query.cols(), n = centers.rows();
  check(centers.cols() == d, "gauss_kde: dim mismatch");
  check(coef.rows() == n && coef.cols() == 1, "gauss_kde: coef shape");
  check(sigma.rows() == n && sigma.cols() == 1, "gauss_kde: sigma shape");
  const bool any =
      query.requires_grad() || centers.requires_grad() || coef.requires_grad() || sigma.requires_grad();
  Tensor y = make_out(tape, m, 1, any);
  for (int q = 0; q < m; ++q) {
    const double* qr = query.data() + static_cast<std::size_t>(q) * d;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* cr = centers.data() + static_cast<std::size_t>(i) * d;
      double r2 = 0.0;
      for (int k = 0; k < d; ++k) {
        const double dk = qr[k] - cr[k];
        r2 += dk * dk;
      }
      const double s = sigma.data()[i];
      acc += coef.data()[i] * std::exp(-r2 / (2.0 * s * s));
    }
    y.data()[q] = acc;
  }
  if (y.requires_grad()) {
    tape->record(y, [query, centers, coef, sigma, y, m, d, n]() {
      const double* g = y.grad().data();
      double* gq = query.requires_grad() ? query.grad().data() : nullptr;
      double* gc = centers.requires_grad() ? centers.grad().data() : nullptr;
      double* ga = coef.requires_grad() ? coef.grad().data() : nullptr;
      double* gs = sigma.requires_grad() ? sigma.grad().data() : nullptr;
      for (int q = 0; q < m; ++q) {
        const double gv = g[q];
        if (gv == 0.0) continue;
        const double* qr = query.data() + static_cast<std::size_t>(q) * d;
        for (int i = 0; i < n; ++i) {
          const double* cr = centers.data() + static_cast<std::size_t>(i) * d;
          double r2 = 0.0;
          for (int k = 0; k < d; ++k) {
            const double dk = qr[k] - cr[k];
            r2 += dk * dk;
          }
          const double s = sigma.data()[i];
          const double e = std::exp(-r2 / (2.0 * s * s));
          const double ce = coef.data()[i] * e;
          if (ga) ga[i] += gv * e;
          if (gs) gs[i] += gv * ce * r2 / (s * s * s);
          if (gq || gc) {
            const double f = gv * ce / (s * s);
            for (int k = 0; k < d; ++k) {
              const double dk = qr[k] - cr[k];
              if (gq) gq[static_cast<std::size_t>(q) * d + k] -= f * dk;
              if (gc) gc[static_cast<std::size_t>(i) * d + k] += f * dk;
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace flockpf::diff
