#include "metabdc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "kernels.hpp"

namespace metabdc::ops {
namespace {

template <typename T>
using Inputs = std::span<const Array<T>* const>;
template <typename T>
using Grads = std::span<Array<T>* const>;

void expect_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

void expect_same(const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError("shapes differ: " + shape_str(a) + " vs " + shape_str(b));
}

std::size_t trailing(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

// ---------------------------------------------------------------- elementwise

enum class Binary { add, sub, mul, div };

template <typename T>
class BinaryOp final : public Op<T> {
 public:
  explicit BinaryOp(Binary kind) : kind_(kind) {}
  std::string_view kind() const override {
    switch (kind_) {
      case Binary::add:
        return "add";
      case Binary::sub:
        return "sub";
      case Binary::mul:
        return "mul";
      case Binary::div:
        return "div";
    }
    return "binary";
  }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_same(in[0], in[1]);
    return in[0];
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const T* a = in[0]->ptr();
    const T* b = in[1]->ptr();
    T* o = out.ptr();
    const std::size_t n = out.size();
    switch (kind_) {
      case Binary::add:
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
        break;
      case Binary::sub:
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
        break;
      case Binary::mul:
        for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
        break;
      case Binary::div:
        for (std::size_t i = 0; i < n; ++i) {
          if (b[i] == T{0}) throw NumericError("div: zero denominator");
          o[i] = a[i] / b[i];
        }
        break;
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const std::size_t n = go.size();
    for (int side = 0; side < 2; ++side) {
      if (gi[side] == nullptr) continue;
      T* d = gi[side]->ptr();
      switch (kind_) {
        case Binary::add:
          for (std::size_t i = 0; i < n; ++i) d[i] += go[i];
          break;
        case Binary::sub:
          for (std::size_t i = 0; i < n; ++i) d[i] += side == 0 ? go[i] : -go[i];
          break;
        case Binary::mul: {
          const Array<T>& other = *in[1 - side];
          for (std::size_t i = 0; i < n; ++i) d[i] += go[i] * other[i];
          break;
        }
        case Binary::div: {
          const Array<T>& a = *in[0];
          const Array<T>& b = *in[1];
          if (side == 0) {
            for (std::size_t i = 0; i < n; ++i) d[i] += go[i] / b[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) d[i] -= go[i] * a[i] / (b[i] * b[i]);
          }
          break;
        }
      }
    }
  }

 private:
  Binary kind_;
};

enum class Unary { relu, exp, log, sigmoid, square, sqrt_guarded, scale, add_scalar };

template <typename T>
class UnaryOp final : public Op<T> {
 public:
  UnaryOp(Unary kind, double attr = 0.0) : kind_(kind), attr_(attr) {}
  std::string_view kind() const override {
    switch (kind_) {
      case Unary::relu:
        return "relu";
      case Unary::exp:
        return "exp";
      case Unary::log:
        return "log";
      case Unary::sigmoid:
        return "sigmoid";
      case Unary::square:
        return "square";
      case Unary::sqrt_guarded:
        return "sqrt_guarded";
      case Unary::scale:
        return "scale";
      case Unary::add_scalar:
        return "add_scalar";
    }
    return "unary";
  }
  Shape infer_shape(std::span<const Shape> in) const override { return in[0]; }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const T* x = in[0]->ptr();
    T* y = out.ptr();
    const std::size_t n = out.size();
    const T a = static_cast<T>(attr_);
    switch (kind_) {
      case Unary::relu:
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
        break;
      case Unary::exp:
        for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
        break;
      case Unary::log:
        for (std::size_t i = 0; i < n; ++i) {
          if (!(x[i] > T{0})) throw NumericError("log of non-positive value");
          y[i] = std::log(x[i]);
        }
        break;
      case Unary::sigmoid:
        for (std::size_t i = 0; i < n; ++i) {
          y[i] = x[i] >= T{0} ? T{1} / (T{1} + std::exp(-x[i]))
                              : std::exp(x[i]) / (T{1} + std::exp(x[i]));
        }
        break;
      case Unary::square:
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * x[i];
        break;
      case Unary::sqrt_guarded:
        for (std::size_t i = 0; i < n; ++i) y[i] = std::sqrt(std::max(x[i], a));
        break;
      case Unary::scale:
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * a;
        break;
      case Unary::add_scalar:
        for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + a;
        break;
    }
  }
  void backward(Inputs<T> in, const Array<T>& out, const Array<T>& go,
                Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const T* x = in[0]->ptr();
    const T* y = out.ptr();
    T* d = gi[0]->ptr();
    const std::size_t n = go.size();
    const T a = static_cast<T>(attr_);
    switch (kind_) {
      case Unary::relu:
        for (std::size_t i = 0; i < n; ++i) d[i] += x[i] > T{0} ? go[i] : T{0};
        break;
      case Unary::exp:
        for (std::size_t i = 0; i < n; ++i) d[i] += go[i] * y[i];
        break;
      case Unary::log:
        for (std::size_t i = 0; i < n; ++i) d[i] += go[i] / x[i];
        break;
      case Unary::sigmoid:
        for (std::size_t i = 0; i < n; ++i) d[i] += go[i] * y[i] * (T{1} - y[i]);
        break;
      case Unary::square:
        for (std::size_t i = 0; i < n; ++i) d[i] += go[i] * T{2} * x[i];
        break;
      case Unary::sqrt_guarded:
        for (std::size_t i = 0; i < n; ++i) {
          if (x[i] > a) d[i] += go[i] / (T{2} * y[i]);
        }
        break;
      case Unary::scale:
        for (std::size_t i = 0; i < n; ++i) d[i] += go[i] * a;
        break;
      case Unary::add_scalar:
        for (std::size_t i = 0; i < n; ++i) d[i] += go[i];
        break;
    }
  }

 private:
  Unary kind_;
  double attr_;
};

template <typename T>
class AddRowBiasOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "add_row_bias"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[1], 1, "bias");
    if (in[0].empty() || in[0].back() != in[1][0]) {
      throw ShapeError("bias length " + std::to_string(in[1][0]) + " does not match last dim of " +
                       shape_str(in[0]));
    }
    return in[0];
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t k = in[1]->size();
    const T* x = in[0]->ptr();
    const T* b = in[1]->ptr();
    T* y = out.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) y[i] = x[i] + b[i % k];
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const std::size_t k = in[1]->size();
    if (gi[0] != nullptr) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
    }
    if (gi[1] != nullptr) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i % k] += go[i];
    }
  }
};

// ---------------------------------------------------------------- linear algebra

template <typename T>
class MatMulOp final : public Op<T> {
 public:
  explicit MatMulOp(bool transpose_b) : transpose_b_(transpose_b) {}
  std::string_view kind() const override { return transpose_b_ ? "matmul_nt" : "matmul"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "lhs");
    expect_rank(in[1], 2, "rhs");
    const std::size_t inner_b = transpose_b_ ? in[1][1] : in[1][0];
    if (in[0][1] != inner_b) {
      throw ShapeError("inner dimensions differ: " + shape_str(in[0]) + " x " + shape_str(in[1]));
    }
    return {in[0][0], transpose_b_ ? in[1][0] : in[1][1]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t m = in[0]->dim(0), k = in[0]->dim(1), n = out.dim(1);
    if (transpose_b_) {
      kernels::gemm_nt(in[0]->ptr(), in[1]->ptr(), out.ptr(), m, k, n, false);
    } else {
      kernels::gemm_nn(in[0]->ptr(), in[1]->ptr(), out.ptr(), m, k, n, false);
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const std::size_t m = in[0]->dim(0), k = in[0]->dim(1), n = go.dim(1);
    if (gi[0] != nullptr) {
      // dA = G * B^T (or G * B when B was transposed)
      if (transpose_b_) {
        kernels::gemm_nn(go.ptr(), in[1]->ptr(), gi[0]->ptr(), m, n, k, true);
      } else {
        kernels::gemm_nt(go.ptr(), in[1]->ptr(), gi[0]->ptr(), m, n, k, true);
      }
    }
    if (gi[1] != nullptr) {
      if (transpose_b_) {
        // B is [n,k]; dB = G^T * A
        kernels::gemm_tn(go.ptr(), in[0]->ptr(), gi[1]->ptr(), n, m, k, true);
      } else {
        // B is [k,n]; dB = A^T * G
        kernels::gemm_tn(in[0]->ptr(), go.ptr(), gi[1]->ptr(), k, m, n, true);
      }
    }
  }

 private:
  bool transpose_b_;
};

// ---------------------------------------------------------------- reductions

template <typename T>
class SumOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "sum"; }
  Shape infer_shape(std::span<const Shape>) const override { return {1}; }
  void forward(Inputs<T> in, Array<T>& out) const override {
    T s{0};
    for (T v : in[0]->data()) s += v;
    out[0] = s;
  }
  void backward(Inputs<T>, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    for (auto& d : gi[0]->data()) d += go[0];
  }
};

template <typename T>
class SumRowsOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "sum_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "input");
    return {in[0][0]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = in[0]->dim(0), m = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      T s{0};
      for (std::size_t j = 0; j < m; ++j) s += (*in[0])[i * m + j];
      out[i] = s;
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t n = in[0]->dim(0), m = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) (*gi[0])[i * m + j] += go[i];
    }
  }
};

template <typename T>
class MeanLastAxisOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "mean_last_axis"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    if (in[0].empty() || in[0].back() == 0) throw ShapeError("mean over an empty axis");
    if (in[0].size() == 1) return {1};
    return Shape(in[0].begin(), in[0].end() - 1);
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t m = in[0]->shape().back();
    const std::size_t rows = in[0]->size() / m;
    for (std::size_t r = 0; r < rows; ++r) {
      T s{0};
      for (std::size_t j = 0; j < m; ++j) s += (*in[0])[r * m + j];
      out[r] = s / static_cast<T>(m);
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t m = in[0]->shape().back();
    const std::size_t rows = in[0]->size() / m;
    for (std::size_t r = 0; r < rows; ++r) {
      const T v = go[r] / static_cast<T>(m);
      for (std::size_t j = 0; j < m; ++j) (*gi[0])[r * m + j] += v;
    }
  }
};

template <typename T>
class ReshapeOp final : public Op<T> {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view kind() const override { return "reshape"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    if (shape_size(in[0]) != shape_size(shape_)) {
      throw ShapeError("cannot reshape " + shape_str(in[0]) + " to " + shape_str(shape_));
    }
    return shape_;
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    std::copy(in[0]->data().begin(), in[0]->data().end(), out.data().begin());
  }
  void backward(Inputs<T>, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
  }

 private:
  Shape shape_;
};

// ---------------------------------------------------------------- convolution

template <typename T>
class Conv2dOp final : public Op<T> {
 public:
  Conv2dOp(std::size_t stride, std::size_t padding) : stride_(stride), pad_(padding) {}
  std::string_view kind() const override { return "conv2d"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 4, "conv input");
    expect_rank(in[1], 4, "conv weight");
    expect_rank(in[2], 1, "conv bias");
    if (stride_ == 0) throw ShapeError("stride must be positive");
    const std::size_t c = in[0][1], h = in[0][2], w = in[0][3];
    const std::size_t o = in[1][0], k = in[1][2];
    if (in[1][1] != c) {
      throw ShapeError("weight expects " + std::to_string(in[1][1]) + " input channels, input has " +
                       std::to_string(c));
    }
    if (in[1][3] != k) throw ShapeError("kernel must be square");
    if (in[2][0] != o) throw ShapeError("bias length must equal output channels");
    if (h + 2 * pad_ < k || w + 2 * pad_ < k) throw ShapeError("kernel larger than padded input");
    return {in[0][0], o, (h + 2 * pad_ - k) / stride_ + 1, (w + 2 * pad_ - k) / stride_ + 1};
  }

  void forward(Inputs<T> in, Array<T>& out) const override {
    const Geometry g = geometry(*in[0], *in[1]);
    std::vector<T> col(g.col_rows * g.positions);
    const T* bias = in[2]->ptr();
    for (std::size_t n = 0; n < g.batch; ++n) {
      im2col(in[0]->ptr() + n * g.in_image, g, col.data());
      T* y = out.ptr() + n * g.out_image;
      kernels::gemm_nn(in[1]->ptr(), col.data(), y, g.out_c, g.col_rows, g.positions, false);
      for (std::size_t o = 0; o < g.out_c; ++o) {
        T* row = y + o * g.positions;
        for (std::size_t p = 0; p < g.positions; ++p) row[p] += bias[o];
      }
    }
  }

  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const Geometry g = geometry(*in[0], *in[1]);
    std::vector<T> col(g.col_rows * g.positions);
    std::vector<T> dcol(gi[0] != nullptr ? g.col_rows * g.positions : 0);
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* gy = go.ptr() + n * g.out_image;
      if (gi[1] != nullptr) {
        im2col(in[0]->ptr() + n * g.in_image, g, col.data());
        kernels::gemm_nt(gy, col.data(), gi[1]->ptr(), g.out_c, g.positions, g.col_rows, true);
      }
      if (gi[2] != nullptr) {
        for (std::size_t o = 0; o < g.out_c; ++o) {
          T s{0};
          for (std::size_t p = 0; p < g.positions; ++p) s += gy[o * g.positions + p];
          (*gi[2])[o] += s;
        }
      }
      if (gi[0] != nullptr) {
        kernels::gemm_tn(in[1]->ptr(), gy, dcol.data(), g.col_rows, g.out_c, g.positions, false);
        col2im(dcol.data(), g, gi[0]->ptr() + n * g.in_image);
      }
    }
  }

 private:
  struct Geometry {
    std::size_t batch, in_c, h, w, out_c, k, out_h, out_w;
    std::size_t positions, col_rows, in_image, out_image;
  };

  Geometry geometry(const Array<T>& x, const Array<T>& weight) const {
    Geometry g{};
    g.batch = x.dim(0);
    g.in_c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.out_c = weight.dim(0);
    g.k = weight.dim(2);
    g.out_h = (g.h + 2 * pad_ - g.k) / stride_ + 1;
    g.out_w = (g.w + 2 * pad_ - g.k) / stride_ + 1;
    g.positions = g.out_h * g.out_w;
    g.col_rows = g.in_c * g.k * g.k;
    g.in_image = g.in_c * g.h * g.w;
    g.out_image = g.out_c * g.positions;
    return g;
  }

  void im2col(const T* x, const Geometry& g, T* col) const {
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_c; ++c) {
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          T* dst = col + row * g.positions;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                  ix < static_cast<long>(g.w);
              dst[oy * g.out_w + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : T{0};
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, const Geometry& g, T* dx) const {
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_c; ++c) {
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          const T* src = col + row * g.positions;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              dx[(c * g.h + iy) * g.w + ix] += src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }

  std::size_t stride_;
  std::size_t pad_;
};

// ---------------------------------------------------------------- normalization

template <typename T>
class L2NormalizeRowsOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "l2_normalize_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "input");
    return in[0];
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = in[0]->dim(0), p = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * p;
      T ss{0};
      for (std::size_t j = 0; j < p; ++j) ss += x[j] * x[j];
      const T norm = std::sqrt(ss);
      if (!(norm >= T(1e-12))) {
        throw NumericError("l2_normalize_rows: row " + std::to_string(i) +
                           " has zero norm (degenerate embedding)");
      }
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] = x[j] / norm;
    }
  }
  void backward(Inputs<T> in, const Array<T>& out, const Array<T>& go,
                Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t n = in[0]->dim(0), p = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * p;
      const T* y = out.ptr() + i * p;
      const T* g = go.ptr() + i * p;
      T ss{0}, dot{0};
      for (std::size_t j = 0; j < p; ++j) {
        ss += x[j] * x[j];
        dot += y[j] * g[j];
      }
      const T norm = std::sqrt(ss);
      for (std::size_t j = 0; j < p; ++j) (*gi[0])[i * p + j] += (g[j] - y[j] * dot) / norm;
    }
  }
};

// ---------------------------------------------------------------- structural

template <typename T>
class ConcatColsOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "concat_cols"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "lhs");
    expect_rank(in[1], 2, "rhs");
    if (in[0][0] != in[1][0]) throw ShapeError("row counts differ");
    return {in[0][0], in[0][1] + in[1][1]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = out.dim(0), a = in[0]->dim(1), b = in[1]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(in[0]->ptr() + i * a, a, out.ptr() + i * (a + b));
      std::copy_n(in[1]->ptr() + i * b, b, out.ptr() + i * (a + b) + a);
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const std::size_t n = go.dim(0), a = in[0]->dim(1), b = in[1]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      if (gi[0] != nullptr) {
        for (std::size_t j = 0; j < a; ++j) (*gi[0])[i * a + j] += go[i * (a + b) + j];
      }
      if (gi[1] != nullptr) {
        for (std::size_t j = 0; j < b; ++j) (*gi[1])[i * b + j] += go[i * (a + b) + a + j];
      }
    }
  }
};

template <typename T>
class ConcatRowsOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "concat_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    if (in[0].empty() || in[0].size() != in[1].size() ||
        !std::equal(in[0].begin() + 1, in[0].end(), in[1].begin() + 1)) {
      throw ShapeError("trailing dims differ: " + shape_str(in[0]) + " vs " + shape_str(in[1]));
    }
    Shape out = in[0];
    out[0] += in[1][0];
    return out;
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    std::copy(in[0]->data().begin(), in[0]->data().end(), out.data().begin());
    std::copy(in[1]->data().begin(), in[1]->data().end(), out.data().begin() + in[0]->size());
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const std::size_t na = in[0]->size();
    if (gi[0] != nullptr) {
      for (std::size_t i = 0; i < na; ++i) (*gi[0])[i] += go[i];
    }
    if (gi[1] != nullptr) {
      for (std::size_t i = 0; i < in[1]->size(); ++i) (*gi[1])[i] += go[na + i];
    }
  }
};

template <typename T>
class GatherRowsOp final : public Op<T> {
 public:
  explicit GatherRowsOp(std::vector<std::size_t> rows) : rows_(std::move(rows)) {}
  std::string_view kind() const override { return "gather_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    if (in[0].empty()) throw ShapeError("gather from a rank-0 array");
    for (std::size_t r : rows_) {
      if (r >= in[0][0]) throw ShapeError("row index " + std::to_string(r) + " out of range");
    }
    Shape out = in[0];
    out[0] = rows_.size();
    return out;
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t w = trailing(in[0]->shape());
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      std::copy_n(in[0]->ptr() + rows_[i] * w, w, out.ptr() + i * w);
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t w = trailing(in[0]->shape());
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      for (std::size_t j = 0; j < w; ++j) (*gi[0])[rows_[i] * w + j] += go[i * w + j];
    }
  }

 private:
  std::vector<std::size_t> rows_;
};

template <typename T>
class BroadcastRowsOp final : public Op<T> {
 public:
  explicit BroadcastRowsOp(std::size_t n) : n_(n) {}
  std::string_view kind() const override { return "broadcast_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 1, "vector");
    return {n_, in[0][0]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t m = in[0]->size();
    for (std::size_t i = 0; i < n_; ++i) std::copy_n(in[0]->ptr(), m, out.ptr() + i * m);
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t m = in[0]->size();
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < m; ++j) (*gi[0])[j] += go[i * m + j];
    }
  }

 private:
  std::size_t n_;
};

template <typename T>
class DiagonalOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "diagonal"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "matrix");
    if (in[0][0] != in[0][1]) throw ShapeError("diagonal of a non-square matrix");
    return {in[0][0]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = (*in[0])[i * n + i];
  }
  void backward(Inputs<T>, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t n = go.size();
    for (std::size_t i = 0; i < n; ++i) (*gi[0])[i * n + i] += go[i];
  }
};

// ---------------------------------------------------------------- weighted softmax family

template <typename T>
void row_log_partition(const T* x, const T* w, std::size_t m, T& log_z, bool& empty) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < m; ++j) {
    if (w[j] > T{0}) mx = std::max(mx, x[j]);
  }
  empty = !std::isfinite(mx);
  if (empty) {
    log_z = T{0};
    return;
  }
  T s{0};
  for (std::size_t j = 0; j < m; ++j) {
    if (w[j] > T{0}) s += w[j] * std::exp(x[j] - mx);
  }
  log_z = mx + std::log(s);
}

void check_weighted(std::span<const Shape> in) {
  expect_rank(in[0], 2, "logits");
  expect_same(in[0], in[1]);
}

template <typename T>
class WeightedLogSumExpOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "weighted_logsumexp_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    check_weighted(in);
    return {in[0][0]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = in[0]->dim(0), m = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      bool empty = false;
      row_log_partition(in[0]->ptr() + i * m, in[1]->ptr() + i * m, m, out[i], empty);
    }
  }
  void backward(Inputs<T> in, const Array<T>& out, const Array<T>& go,
                Grads<T> gi) const override {
    const std::size_t n = in[0]->dim(0), m = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * m;
      const T* w = in[1]->ptr() + i * m;
      bool any = false;
      for (std::size_t j = 0; j < m; ++j) any = any || w[j] > T{0};
      if (!any) continue;
      for (std::size_t j = 0; j < m; ++j) {
        const T e = std::exp(x[j] - out[i]);
        if (gi[0] != nullptr) (*gi[0])[i * m + j] += go[i] * w[j] * e;
        if (gi[1] != nullptr) (*gi[1])[i * m + j] += go[i] * e;
      }
    }
  }
};

template <typename T>
class WeightedSoftmaxOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "weighted_softmax_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    check_weighted(in);
    return in[0];
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = in[0]->dim(0), m = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * m;
      const T* w = in[1]->ptr() + i * m;
      T log_z{0};
      bool empty = false;
      row_log_partition(x, w, m, log_z, empty);
      for (std::size_t j = 0; j < m; ++j) {
        out[i * m + j] = (empty || !(w[j] > T{0})) ? T{0} : w[j] * std::exp(x[j] - log_z);
      }
    }
  }
  void backward(Inputs<T> in, const Array<T>& out, const Array<T>& go,
                Grads<T> gi) const override {
    const std::size_t n = in[0]->dim(0), m = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * m;
      const T* w = in[1]->ptr() + i * m;
      const T* p = out.ptr() + i * m;
      const T* g = go.ptr() + i * m;
      T log_z{0};
      bool empty = false;
      row_log_partition(x, w, m, log_z, empty);
      if (empty) continue;
      T c{0};
      for (std::size_t j = 0; j < m; ++j) c += g[j] * p[j];
      for (std::size_t j = 0; j < m; ++j) {
        const T e = std::exp(x[j] - log_z);
        if (gi[0] != nullptr) (*gi[0])[i * m + j] += w[j] * e * (g[j] - c);
        if (gi[1] != nullptr) (*gi[1])[i * m + j] += e * (g[j] - c);
      }
    }
  }
};

template <typename T>
class SoftmaxCrossEntropyOp final : public Op<T> {
 public:
  explicit SoftmaxCrossEntropyOp(std::vector<std::size_t> labels) : labels_(std::move(labels)) {}
  std::string_view kind() const override { return "softmax_cross_entropy"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "logits");
    if (in[0][0] != labels_.size() || labels_.empty()) {
      throw ShapeError("need one label per logit row");
    }
    for (std::size_t y : labels_) {
      if (y >= in[0][1]) throw ShapeError("label " + std::to_string(y) + " out of range");
    }
    return {1};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t n = in[0]->dim(0), c = in[0]->dim(1);
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * c;
      total += log_sum_exp(x, c) - x[labels_[i]];
    }
    out[0] = total / static_cast<T>(n);
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t n = in[0]->dim(0), c = in[0]->dim(1);
    const T scale = go[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->ptr() + i * c;
      const T lse = log_sum_exp(x, c);
      for (std::size_t j = 0; j < c; ++j) {
        const T p = std::exp(x[j] - lse);
        (*gi[0])[i * c + j] += scale * (p - (j == labels_[i] ? T{1} : T{0}));
      }
    }
  }

 private:
  static T log_sum_exp(const T* x, std::size_t c) {
    T mx = *std::max_element(x, x + c);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
    return mx + std::log(s);
  }
  std::vector<std::size_t> labels_;
};

// ---------------------------------------------------------------- distance statistics

template <typename T>
class PairwiseChannelDistanceOp final : public Op<T> {
 public:
  explicit PairwiseChannelDistanceOp(double guard) : guard_(guard) {}
  std::string_view kind() const override { return "pairwise_channel_distance"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 3, "feature maps");
    return {in[0][0], in[0][1], in[0][1]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t b = in[0]->dim(0), d = in[0]->dim(1), m = in[0]->dim(2);
    for (std::size_t n = 0; n < b; ++n) {
      const T* x = in[0]->ptr() + n * d * m;
      T* y = out.ptr() + n * d * d;
      for (std::size_t k = 0; k < d; ++k) {
        y[k * d + k] = T{0};
        for (std::size_t l = k + 1; l < d; ++l) {
          T ss{0};
          for (std::size_t t = 0; t < m; ++t) {
            const T diff = x[k * m + t] - x[l * m + t];
            ss += diff * diff;
          }
          const T dist = std::sqrt(ss);
          y[k * d + l] = dist;
          y[l * d + k] = dist;
        }
      }
    }
  }
  void backward(Inputs<T> in, const Array<T>& out, const Array<T>& go,
                Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t b = in[0]->dim(0), d = in[0]->dim(1), m = in[0]->dim(2);
    const T guard = static_cast<T>(guard_);
    for (std::size_t n = 0; n < b; ++n) {
      const T* x = in[0]->ptr() + n * d * m;
      const T* y = out.ptr() + n * d * d;
      const T* g = go.ptr() + n * d * d;
      T* dx = gi[0]->ptr() + n * d * m;
      for (std::size_t k = 0; k < d; ++k) {
        for (std::size_t l = k + 1; l < d; ++l) {
          const T dist = y[k * d + l];
          if (!(dist * dist > guard)) continue;
          // Both (k,l) and (l,k) entries depend on the same distance.
          const T coef = (g[k * d + l] + g[l * d + k]) / dist;
          for (std::size_t t = 0; t < m; ++t) {
            const T diff = x[k * m + t] - x[l * m + t];
            dx[k * m + t] += coef * diff;
            dx[l * m + t] -= coef * diff;
          }
        }
      }
    }
  }

 private:
  double guard_;
};

template <typename T>
class DoubleCenterOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "double_center"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    const Shape& s = in[0];
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
      throw ShapeError("double_center needs [..., d, d], got " + shape_str(s));
    }
    return s;
  }
  void forward(Inputs<T> in, Array<T>& out) const override { center(*in[0], out, false); }
  void backward(Inputs<T>, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    // Double centering is a symmetric linear projector, so the adjoint is
    // the same map applied to the upstream gradient.
    if (gi[0] != nullptr) center(go, *gi[0], true);
  }

 private:
  static void center(const Array<T>& x, Array<T>& y, bool accumulate) {
    const std::size_t d = x.shape().back();
    const std::size_t batch = x.size() / (d * d);
    std::vector<T> row_mean(d), col_mean(d);
    for (std::size_t n = 0; n < batch; ++n) {
      const T* a = x.ptr() + n * d * d;
      T* o = y.ptr() + n * d * d;
      std::fill(col_mean.begin(), col_mean.end(), T{0});
      T grand{0};
      for (std::size_t k = 0; k < d; ++k) {
        T s{0};
        for (std::size_t l = 0; l < d; ++l) {
          s += a[k * d + l];
          col_mean[l] += a[k * d + l];
        }
        row_mean[k] = s / static_cast<T>(d);
        grand += s;
      }
      for (auto& c : col_mean) c /= static_cast<T>(d);
      grand /= static_cast<T>(d * d);
      for (std::size_t k = 0; k < d; ++k) {
        for (std::size_t l = 0; l < d; ++l) {
          const T v = a[k * d + l] - row_mean[k] - col_mean[l] + grand;
          if (accumulate) {
            o[k * d + l] += v;
          } else {
            o[k * d + l] = v;
          }
        }
      }
    }
  }
};

template <typename T>
class GroupMeanRowsOp final : public Op<T> {
 public:
  GroupMeanRowsOp(std::vector<std::size_t> group_of, std::size_t groups)
      : group_of_(std::move(group_of)), counts_(groups, 0) {
    for (std::size_t gidx : group_of_) {
      if (gidx >= groups) throw ShapeError("group index out of range");
      ++counts_[gidx];
    }
    for (std::size_t c : counts_) {
      if (c == 0) throw ShapeError("group_mean_rows: empty group");
    }
  }
  std::string_view kind() const override { return "group_mean_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "rows");
    if (in[0][0] != group_of_.size()) throw ShapeError("need one group index per row");
    return {counts_.size(), in[0][1]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t k = in[0]->dim(1);
    out.fill(T{0});
    for (std::size_t i = 0; i < group_of_.size(); ++i) {
      for (std::size_t j = 0; j < k; ++j) out[group_of_[i] * k + j] += (*in[0])[i * k + j];
    }
    for (std::size_t gidx = 0; gidx < counts_.size(); ++gidx) {
      for (std::size_t j = 0; j < k; ++j) out[gidx * k + j] /= static_cast<T>(counts_[gidx]);
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    if (gi[0] == nullptr) return;
    const std::size_t k = in[0]->dim(1);
    for (std::size_t i = 0; i < group_of_.size(); ++i) {
      const std::size_t gidx = group_of_[i];
      const T inv = T{1} / static_cast<T>(counts_[gidx]);
      for (std::size_t j = 0; j < k; ++j) (*gi[0])[i * k + j] += go[gidx * k + j] * inv;
    }
  }

 private:
  std::vector<std::size_t> group_of_;
  std::vector<std::size_t> counts_;
};

template <typename T>
class NegSqDistRowsOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "neg_sq_dist_rows"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    expect_rank(in[0], 2, "queries");
    expect_rank(in[1], 2, "prototypes");
    if (in[0][1] != in[1][1]) throw ShapeError("feature dims differ");
    return {in[0][0], in[1][0]};
  }
  void forward(Inputs<T> in, Array<T>& out) const override {
    const std::size_t a = in[0]->dim(0), b = in[1]->dim(0), k = in[0]->dim(1);
    for (std::size_t i = 0; i < a; ++i) {
      const T* q = in[0]->ptr() + i * k;
      for (std::size_t j = 0; j < b; ++j) {
        const T* p = in[1]->ptr() + j * k;
        T s{0};
        for (std::size_t t = 0; t < k; ++t) {
          const T diff = q[t] - p[t];
          s += diff * diff;
        }
        out[i * b + j] = -s;
      }
    }
  }
  void backward(Inputs<T> in, const Array<T>&, const Array<T>& go, Grads<T> gi) const override {
    const std::size_t a = in[0]->dim(0), b = in[1]->dim(0), k = in[0]->dim(1);
    for (std::size_t i = 0; i < a; ++i) {
      const T* q = in[0]->ptr() + i * k;
      for (std::size_t j = 0; j < b; ++j) {
        const T* p = in[1]->ptr() + j * k;
        const T g = T{2} * go[i * b + j];
        for (std::size_t t = 0; t < k; ++t) {
          const T diff = q[t] - p[t];
          if (gi[0] != nullptr) (*gi[0])[i * k + t] -= g * diff;
          if (gi[1] != nullptr) (*gi[1])[j * k + t] += g * diff;
        }
      }
    }
  }
};

template <typename T, typename OpT, typename... Args>
NodeId make(Graph<T>& g, std::vector<NodeId> parents, Args&&... args) {
  return g.apply(std::make_unique<OpT>(std::forward<Args>(args)...), std::move(parents));
}

}  // namespace

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, BinaryOp<T>>(g, {a, b}, Binary::add);
}
template <typename T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, BinaryOp<T>>(g, {a, b}, Binary::sub);
}
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, BinaryOp<T>>(g, {a, b}, Binary::mul);
}
template <typename T>
NodeId div(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, BinaryOp<T>>(g, {a, b}, Binary::div);
}
template <typename T>
NodeId scale(Graph<T>& g, NodeId x, T factor) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::scale, static_cast<double>(factor));
}
template <typename T>
NodeId add_scalar(Graph<T>& g, NodeId x, T offset) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::add_scalar, static_cast<double>(offset));
}
template <typename T>
NodeId relu(Graph<T>& g, NodeId x) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::relu);
}
template <typename T>
NodeId exp(Graph<T>& g, NodeId x) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::exp);
}
template <typename T>
NodeId log(Graph<T>& g, NodeId x) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::log);
}
template <typename T>
NodeId sigmoid(Graph<T>& g, NodeId x) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::sigmoid);
}
template <typename T>
NodeId square(Graph<T>& g, NodeId x) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::square);
}
template <typename T>
NodeId sqrt_guarded(Graph<T>& g, NodeId x, double guard) {
  return make<T, UnaryOp<T>>(g, {x}, Unary::sqrt_guarded, guard);
}
template <typename T>
NodeId add_row_bias(Graph<T>& g, NodeId x, NodeId bias) {
  return make<T, AddRowBiasOp<T>>(g, {x, bias});
}
template <typename T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, MatMulOp<T>>(g, {a, b}, false);
}
template <typename T>
NodeId matmul_nt(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, MatMulOp<T>>(g, {a, b}, true);
}
template <typename T>
NodeId sum(Graph<T>& g, NodeId x) {
  return make<T, SumOp<T>>(g, {x});
}
template <typename T>
NodeId sum_rows(Graph<T>& g, NodeId x) {
  return make<T, SumRowsOp<T>>(g, {x});
}
template <typename T>
NodeId mean_last_axis(Graph<T>& g, NodeId x) {
  return make<T, MeanLastAxisOp<T>>(g, {x});
}
template <typename T>
NodeId reshape(Graph<T>& g, NodeId x, Shape shape) {
  return make<T, ReshapeOp<T>>(g, {x}, std::move(shape));
}
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId weight, NodeId bias, std::size_t stride,
              std::size_t padding) {
  return make<T, Conv2dOp<T>>(g, {x, weight, bias}, stride, padding);
}
template <typename T>
NodeId l2_normalize_rows(Graph<T>& g, NodeId x) {
  return make<T, L2NormalizeRowsOp<T>>(g, {x});
}
template <typename T>
NodeId concat_cols(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, ConcatColsOp<T>>(g, {a, b});
}
template <typename T>
NodeId concat_rows(Graph<T>& g, NodeId a, NodeId b) {
  return make<T, ConcatRowsOp<T>>(g, {a, b});
}
template <typename T>
NodeId gather_rows(Graph<T>& g, NodeId x, std::vector<std::size_t> rows) {
  return make<T, GatherRowsOp<T>>(g, {x}, std::move(rows));
}
template <typename T>
NodeId broadcast_rows(Graph<T>& g, NodeId v, std::size_t n) {
  return make<T, BroadcastRowsOp<T>>(g, {v}, n);
}
template <typename T>
NodeId diagonal(Graph<T>& g, NodeId x) {
  return make<T, DiagonalOp<T>>(g, {x});
}
template <typename T>
NodeId weighted_logsumexp_rows(Graph<T>& g, NodeId x, NodeId w) {
  return make<T, WeightedLogSumExpOp<T>>(g, {x, w});
}
template <typename T>
NodeId weighted_softmax_rows(Graph<T>& g, NodeId x, NodeId w) {
  return make<T, WeightedSoftmaxOp<T>>(g, {x, w});
}
template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::vector<std::size_t> labels) {
  return make<T, SoftmaxCrossEntropyOp<T>>(g, {logits}, std::move(labels));
}
template <typename T>
NodeId pairwise_channel_distance(Graph<T>& g, NodeId x, double guard) {
  return make<T, PairwiseChannelDistanceOp<T>>(g, {x}, guard);
}
template <typename T>
NodeId double_center(Graph<T>& g, NodeId x) {
  return make<T, DoubleCenterOp<T>>(g, {x});
}
template <typename T>
NodeId group_mean_rows(Graph<T>& g, NodeId x, std::vector<std::size_t> group_of,
                       std::size_t groups) {
  return make<T, GroupMeanRowsOp<T>>(g, {x}, std::move(group_of), groups);
}
template <typename T>
NodeId neg_sq_dist_rows(Graph<T>& g, NodeId q, NodeId p) {
  return make<T, NegSqDistRowsOp<T>>(g, {q, p});
}

#define METABDC_INSTANTIATE_OPS(T)                                                          \
  template NodeId add(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId sub(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId mul(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId div(Graph<T>&, NodeId, NodeId);                                          \
  template NodeId scale(Graph<T>&, NodeId, T);                                             \
  template NodeId add_scalar(Graph<T>&, NodeId, T);                                        \
  template NodeId relu(Graph<T>&, NodeId);                                                 \
  template NodeId exp(Graph<T>&, NodeId);                                                  \
  template NodeId log(Graph<T>&, NodeId);                                                  \
  template NodeId sigmoid(Graph<T>&, NodeId);                                              \
  template NodeId square(Graph<T>&, NodeId);                                               \
  template NodeId sqrt_guarded(Graph<T>&, NodeId, double);                                 \
  template NodeId add_row_bias(Graph<T>&, NodeId, NodeId);                                 \
  template NodeId matmul(Graph<T>&, NodeId, NodeId);                                       \
  template NodeId matmul_nt(Graph<T>&, NodeId, NodeId);                                    \
  template NodeId sum(Graph<T>&, NodeId);                                                  \
  template NodeId sum_rows(Graph<T>&, NodeId);                                             \
  template NodeId mean_last_axis(Graph<T>&, NodeId);                                       \
  template NodeId reshape(Graph<T>&, NodeId, Shape);                                       \
  template NodeId conv2d(Graph<T>&, NodeId, NodeId, NodeId, std::size_t, std::size_t);     \
  template NodeId l2_normalize_rows(Graph<T>&, NodeId);                                    \
  template NodeId concat_cols(Graph<T>&, NodeId, NodeId);                                  \
  template NodeId concat_rows(Graph<T>&, NodeId, NodeId);                                  \
  template NodeId gather_rows(Graph<T>&, NodeId, std::vector<std::size_t>);                \
  template NodeId broadcast_rows(Graph<T>&, NodeId, std::size_t);                          \
  template NodeId diagonal(Graph<T>&, NodeId);                                             \
  template NodeId weighted_logsumexp_rows(Graph<T>&, NodeId, NodeId);                      \
  template NodeId weighted_softmax_rows(Graph<T>&, NodeId, NodeId);                        \
  template NodeId softmax_cross_entropy(Graph<T>&, NodeId, std::vector<std::size_t>);      \
  template NodeId pairwise_channel_distance(Graph<T>&, NodeId, double);                    \
  template NodeId double_center(Graph<T>&, NodeId);                                        \
  template NodeId group_mean_rows(Graph<T>&, NodeId, std::vector<std::size_t>, std::size_t); \
  template NodeId neg_sq_dist_rows(Graph<T>&, NodeId, NodeId);

METABDC_INSTANTIATE_OPS(float)
METABDC_INSTANTIATE_OPS(double)

}  // namespace metabdc::ops
