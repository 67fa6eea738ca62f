#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "crfuse/gemm.hpp"
#include "crfuse/tensor.hpp"

// Differentiable op library. Every op computes its forward value eagerly and,
// when at least one input lives on the given tape, records a closure with the
// analytic backward rule. Tensors registered on some other (older) tape are
// treated as constants here.
//
// No general broadcasting: operand shapes must match exactly, except for the
// dedicated bias ops ([n] over rows, [C] over channels).

namespace crfuse {

namespace detail {

template <typename T>
inline void acc(std::vector<T>& dst, const std::vector<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
inline void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
inline void check_rank(const char* op, const TensorT<T>& t, int rank) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

}  // namespace detail

template <typename T>
TensorT<T> add(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("add", a, b);
  TensorT<T> out(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (long i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  if (tape.tracks(a) || tape.tracks(b)) {
    tape.record(out, [a, b](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(a)) detail::acc(tp.grad_buffer(a.node()), g);
      if (tp.tracks(b)) detail::acc(tp.grad_buffer(b.node()), g);
    });
  }
  return out;
}

template <typename T>
TensorT<T> sub(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("sub", a, b);
  TensorT<T> out(a.shape());
  for (long i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (tape.tracks(a) || tape.tracks(b)) {
    tape.record(out, [a, b](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(a)) detail::acc(tp.grad_buffer(a.node()), g);
      if (tp.tracks(b)) {
        auto& gb = tp.grad_buffer(b.node());
        for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("mul", a, b);
  TensorT<T> out(a.shape());
  for (long i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (tape.tracks(a) || tape.tracks(b)) {
    tape.record(out, [a, b](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(a)) {
        auto& ga = tp.grad_buffer(a.node());
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (tp.tracks(b)) {
        auto& gb = tp.grad_buffer(b.node());
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> scale(TapeT<T>& tape, const TensorT<T>& x, double c) {
  TensorT<T> out(x.shape());
  const T tc = static_cast<T>(c);
  for (long i = 0; i < out.size(); ++i) out.data()[i] = x.data()[i] * tc;
  if (tape.tracks(x)) {
    tape.record(out, [x, tc](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * tc;
    });
  }
  return out;
}

// [B x n] + [n], the one row-wise broadcast this library allows
template <typename T>
TensorT<T> add_row_bias(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& bias) {
  detail::check_rank("add_row_bias", x, 2);
  detail::check_rank("add_row_bias", bias, 1);
  const int rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols)
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs x " +
                         shape_str(x.shape()));
  TensorT<T> out(x.shape());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out.data()[static_cast<long>(r) * cols + c] =
          x.data()[static_cast<long>(r) * cols + c] + bias.data()[c];
  if (tape.tracks(x) || tape.tracks(bias)) {
    tape.record(out, [x, bias, rows, cols](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(x)) detail::acc(tp.grad_buffer(x.node()), g);
      if (tp.tracks(bias)) {
        auto& gb = tp.grad_buffer(bias.node());
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) gb[static_cast<size_t>(c)] += g[static_cast<size_t>(r) * cols + c];
      }
    });
  }
  return out;
}

// [B x C x H x W] + [C]
template <typename T>
TensorT<T> add_channel_bias(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& bias) {
  detail::check_rank("add_channel_bias", x, 4);
  detail::check_rank("add_channel_bias", bias, 1);
  const int batch = x.dim(0), ch = x.dim(1);
  const long plane = static_cast<long>(x.dim(2)) * x.dim(3);
  if (bias.dim(0) != ch)
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs x " +
                         shape_str(x.shape()));
  TensorT<T> out(x.shape());
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c) {
      const long base = (static_cast<long>(b) * ch + c) * plane;
      const T bv = bias.data()[c];
      for (long i = 0; i < plane; ++i) out.data()[base + i] = x.data()[base + i] + bv;
    }
  if (tape.tracks(x) || tape.tracks(bias)) {
    tape.record(out, [x, bias, batch, ch, plane](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(x)) detail::acc(tp.grad_buffer(x.node()), g);
      if (tp.tracks(bias)) {
        auto& gb = tp.grad_buffer(bias.node());
        for (int b = 0; b < batch; ++b)
          for (int c = 0; c < ch; ++c) {
            const long base = (static_cast<long>(b) * ch + c) * plane;
            T s = 0;
            for (long i = 0; i < plane; ++i) s += g[static_cast<size_t>(base + i)];
            gb[static_cast<size_t>(c)] += s;
          }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> relu(TapeT<T>& tape, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  uint64_t bits = 0;
  int nbits = 0;
  for (long i = 0; i < out.size(); ++i) {
    const bool on = x.data()[i] > T(0);
    out.data()[i] = on ? x.data()[i] : T(0);
    bits = (bits << 1) | static_cast<uint64_t>(on);
    if (++nbits == 64) {
      tape.mix_pattern(bits);
      bits = 0;
      nbits = 0;
    }
  }
  if (nbits) tape.mix_pattern(bits | (1ull << 63));
  if (tape.tracks(x)) {
    tape.record(out, [x](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < gx.size(); ++i)
        if (x.data()[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid(TapeT<T>& tape, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (long i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    // branch keeps exp() argument non-positive
    out.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                              : std::exp(v) / (T(1) + std::exp(v));
  }
  if (tape.tracks(x)) {
    tape.record(out, [x, out](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < gx.size(); ++i) {
        const T y = out.data()[i];
        gx[i] += g[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> tanh_act(TapeT<T>& tape, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (long i = 0; i < out.size(); ++i) out.data()[i] = std::tanh(x.data()[i]);
  if (tape.tracks(x)) {
    tape.record(out, [x, out](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < gx.size(); ++i) {
        const T y = out.data()[i];
        gx[i] += g[i] * (T(1) - y * y);
      }
    });
  }
  return out;
}

// [m x k] * [k x n]
template <typename T>
TensorT<T> matmul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_rank("matmul", a, 2);
  detail::check_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> out(Shape{m, n});
  detail::gemm_acc(false, false, m, n, k, a.data(), k, b.data(), n, out.data(), n);
  if (tape.tracks(a) || tape.tracks(b)) {
    tape.record(out, [a, b, m, k, n](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(a))  // grad_a = g * b^T
        detail::gemm_acc(false, true, m, k, n, g.data(), n, b.data(), n,
                         tp.grad_buffer(a.node()).data(), k);
      if (tp.tracks(b))  // grad_b = a^T * g
        detail::gemm_acc(true, false, k, n, m, a.data(), k, g.data(), n,
                         tp.grad_buffer(b.node()).data(), n);
    });
  }
  return out;
}

// [m x k] * [n x k]^T; the common x * W^T with row-major weight matrices
template <typename T>
TensorT<T> matmul_nt(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_rank("matmul_nt", a, 2);
  detail::check_rank("matmul_nt", b, 2);
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()) + " transposed");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  TensorT<T> out(Shape{m, n});
  detail::gemm_acc(false, true, m, n, k, a.data(), k, b.data(), k, out.data(), n);
  if (tape.tracks(a) || tape.tracks(b)) {
    tape.record(out, [a, b, m, k, n](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(a))  // grad_a = g * b
        detail::gemm_acc(false, false, m, k, n, g.data(), n, b.data(), k,
                         tp.grad_buffer(a.node()).data(), k);
      if (tp.tracks(b))  // grad_b = g^T * a
        detail::gemm_acc(true, false, n, k, m, g.data(), n, a.data(), k,
                         tp.grad_buffer(b.node()).data(), k);
    });
  }
  return out;
}

// [B x p] ++ [B x q] -> [B x (p+q)]
template <typename T>
TensorT<T> concat_cols(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_rank("concat_cols", a, 2);
  detail::check_rank("concat_cols", b, 2);
  if (a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: batch mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const int rows = a.dim(0), p = a.dim(1), q = b.dim(1);
  TensorT<T> out(Shape{rows, p + q});
  for (int r = 0; r < rows; ++r) {
    std::copy(a.data() + static_cast<long>(r) * p, a.data() + static_cast<long>(r + 1) * p,
              out.data() + static_cast<long>(r) * (p + q));
    std::copy(b.data() + static_cast<long>(r) * q, b.data() + static_cast<long>(r + 1) * q,
              out.data() + static_cast<long>(r) * (p + q) + p);
  }
  if (tape.tracks(a) || tape.tracks(b)) {
    tape.record(out, [a, b, rows, p, q](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(a)) {
        auto& ga = tp.grad_buffer(a.node());
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < p; ++c)
            ga[static_cast<size_t>(r) * p + c] += g[static_cast<size_t>(r) * (p + q) + c];
      }
      if (tp.tracks(b)) {
        auto& gb = tp.grad_buffer(b.node());
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < q; ++c)
            gb[static_cast<size_t>(r) * q + c] += g[static_cast<size_t>(r) * (p + q) + p + c];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_cols(TapeT<T>& tape, const TensorT<T>& x, int start, int len) {
  detail::check_rank("slice_cols", x, 2);
  const int rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || len <= 0 || start + len > cols)
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + shape_str(x.shape()));
  TensorT<T> out(Shape{rows, len});
  for (int r = 0; r < rows; ++r)
    std::copy(x.data() + static_cast<long>(r) * cols + start,
              x.data() + static_cast<long>(r) * cols + start + len,
              out.data() + static_cast<long>(r) * len);
  if (tape.tracks(x)) {
    tape.record(out, [x, rows, cols, start, len](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < len; ++c)
          gx[static_cast<size_t>(r) * cols + start + c] += g[static_cast<size_t>(r) * len + c];
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_rows(TapeT<T>& tape, const TensorT<T>& x, int start, int len) {
  detail::check_rank("slice_rows", x, 2);
  const int rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || len <= 0 || start + len > rows)
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + shape_str(x.shape()));
  TensorT<T> out(Shape{len, cols});
  std::copy(x.data() + static_cast<long>(start) * cols,
            x.data() + static_cast<long>(start + len) * cols, out.data());
  if (tape.tracks(x)) {
    tape.record(out, [x, cols, start, len](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      const long off = static_cast<long>(start) * cols;
      for (long i = 0; i < static_cast<long>(len) * cols; ++i)
        gx[static_cast<size_t>(off + i)] += g[static_cast<size_t>(i)];
    });
  }
  return out;
}

// stack row blocks: k tensors [r_i x n] -> [sum r_i x n]
template <typename T>
TensorT<T> concat_rows(TapeT<T>& tape, const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty input list");
  const int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    detail::check_rank("concat_rows", p, 2);
    if (p.dim(1) != cols)
      throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  TensorT<T> out(Shape{rows, cols});
  long off = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + off);
    off += p.size();
    tracked = tracked || tape.tracks(p);
  }
  if (tracked) {
    tape.record(out, [parts](TapeT<T>& tp, const std::vector<T>& g) {
      long off = 0;
      for (const auto& p : parts) {
        if (tp.tracks(p)) {
          auto& gp = tp.grad_buffer(p.node());
          for (long i = 0; i < p.size(); ++i) gp[static_cast<size_t>(i)] += g[static_cast<size_t>(off + i)];
        }
        off += p.size();
      }
    });
  }
  return out;
}

// row gather; duplicate indices accumulate in backward
template <typename T>
TensorT<T> take_rows(TapeT<T>& tape, const TensorT<T>& x, const std::vector<int>& rows) {
  detail::check_rank("take_rows", x, 2);
  const int n = x.dim(0), cols = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= n) throw RangeError("take_rows: row " + std::to_string(r) + " out of [0, " +
                                          std::to_string(n) + ")");
  TensorT<T> out(Shape{static_cast<int>(rows.size()), cols});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(x.data() + static_cast<long>(rows[i]) * cols,
              x.data() + static_cast<long>(rows[i] + 1) * cols,
              out.data() + static_cast<long>(i) * cols);
  if (tape.tracks(x)) {
    tape.record(out, [x, rows, cols](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < cols; ++c)
          gx[static_cast<size_t>(rows[i]) * cols + c] += g[i * cols + c];
    });
  }
  return out;
}

template <typename T>
TensorT<T> reshape(TapeT<T>& tape, const TensorT<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  TensorT<T> out(std::move(shape), std::vector<T>(x.values()));
  if (tape.tracks(x)) {
    tape.record(out, [x](TapeT<T>& tp, const std::vector<T>& g) {
      detail::acc(tp.grad_buffer(x.node()), g);
    });
  }
  return out;
}

namespace detail {

// 3x3 / padding-1 patch matrix: col is [Cin*9 x H*W] for one image
template <typename T>
void im2col_3x3(const T* x, int cin, int h, int w, T* col) {
  const long hw = static_cast<long>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    const T* plane = x + static_cast<long>(ci) * hw;
    for (int dy = 0; dy < 3; ++dy)
      for (int dx = 0; dx < 3; ++dx) {
        T* dst = col + static_cast<long>(ci * 9 + dy * 3 + dx) * hw;
        const int x0 = std::max(0, 1 - dx), x1 = std::min(w, w + 1 - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - 1;
          T* drow = dst + static_cast<long>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(drow, drow + w, T(0));
            continue;
          }
          const T* srow = plane + static_cast<long>(sy) * w;
          for (int xx = 0; xx < x0; ++xx) drow[xx] = T(0);
          for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + dx - 1];
          for (int xx = x1; xx < w; ++xx) drow[xx] = T(0);
        }
      }
  }
}

template <typename T>
void col2im_3x3_acc(const T* col, int cin, int h, int w, T* gx) {
  const long hw = static_cast<long>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    T* plane = gx + static_cast<long>(ci) * hw;
    for (int dy = 0; dy < 3; ++dy)
      for (int dx = 0; dx < 3; ++dx) {
        const T* src = col + static_cast<long>(ci * 9 + dy * 3 + dx) * hw;
        const int x0 = std::max(0, 1 - dx), x1 = std::min(w, w + 1 - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          const T* srow = src + static_cast<long>(y) * w;
          T* drow = plane + static_cast<long>(sy) * w;
          for (int xx = x0; xx < x1; ++xx) drow[xx + dx - 1] += srow[xx];
        }
      }
  }
}

}  // namespace detail

// same-size cross-correlation: [B x Cin x H x W] * [Cout x Cin x 3 x 3],
// padding 1, no kernel flip
template <typename T>
TensorT<T> conv2d(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& kernel) {
  detail::check_rank("conv2d", x, 4);
  detail::check_rank("conv2d", kernel, 4);
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3)
    throw DimensionError("conv2d: kernel must be 3x3, got " + shape_str(kernel.shape()));
  if (kernel.dim(1) != x.dim(1))
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
  const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = kernel.dim(0);
  const long hw = static_cast<long>(h) * w;
  const int krows = cin * 9;

  TensorT<T> out(Shape{batch, cout, h, w});
  std::vector<T> col(static_cast<size_t>(krows) * hw);
  for (int b = 0; b < batch; ++b) {
    detail::im2col_3x3(x.data() + static_cast<long>(b) * cin * hw, cin, h, w, col.data());
    detail::gemm_acc(false, false, cout, static_cast<int>(hw), krows, kernel.data(), krows,
                     col.data(), static_cast<int>(hw),
                     out.data() + static_cast<long>(b) * cout * hw, static_cast<int>(hw));
  }

  if (tape.tracks(x) || tape.tracks(kernel)) {
    tape.record(out, [x, kernel, batch, cin, cout, h, w](TapeT<T>& tp, const std::vector<T>& g) {
      const long hw = static_cast<long>(h) * w;
      const int krows = cin * 9;
      std::vector<T> col(static_cast<size_t>(krows) * hw);
      std::vector<T> gcol;
      if (tp.tracks(x)) gcol.resize(static_cast<size_t>(krows) * hw);
      for (int b = 0; b < batch; ++b) {
        const T* gout = g.data() + static_cast<long>(b) * cout * hw;
        if (tp.tracks(kernel)) {
          detail::im2col_3x3(x.data() + static_cast<long>(b) * cin * hw, cin, h, w, col.data());
          detail::gemm_acc(false, true, cout, krows, static_cast<int>(hw), gout,
                           static_cast<int>(hw), col.data(), static_cast<int>(hw),
                           tp.grad_buffer(kernel.node()).data(), krows);
        }
        if (tp.tracks(x)) {
          std::fill(gcol.begin(), gcol.end(), T(0));
          detail::gemm_acc(true, false, krows, static_cast<int>(hw), cout, kernel.data(), krows,
                           gout, static_cast<int>(hw), gcol.data(), static_cast<int>(hw));
          detail::col2im_3x3_acc(gcol.data(), cin, h, w,
                                 tp.grad_buffer(x.node()).data() + static_cast<long>(b) * cin * hw);
        }
      }
    });
  }
  return out;
}

// 2x2 window, 2x2 stride; gradient goes to the first maximum in scan order
template <typename T>
TensorT<T> maxpool2d(TapeT<T>& tape, const TensorT<T>& x) {
  detail::check_rank("maxpool2d", x, 4);
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw DimensionError("maxpool2d: spatial dims must be even, got " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  TensorT<T> out(Shape{batch, ch, oh, ow});
  const long planes = static_cast<long>(batch) * ch;
  uint64_t bits = 0;
  int nbits = 0;
  for (long p = 0; p < planes; ++p) {
    const T* in = x.data() + p * h * w;
    T* o = out.data() + p * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const T* base = in + static_cast<long>(2 * y) * w + 2 * xx;
        const T cand[4] = {base[0], base[1], base[w], base[w + 1]};
        int arg = 0;
        for (int i = 1; i < 4; ++i)
          if (cand[i] > cand[arg]) arg = i;
        o[static_cast<long>(y) * ow + xx] = cand[arg];
        bits = (bits << 2) | static_cast<uint64_t>(arg);
        if ((nbits += 2) == 64) {
          tape.mix_pattern(bits);
          bits = 0;
          nbits = 0;
        }
      }
  }
  if (nbits) tape.mix_pattern(bits | (1ull << 63));
  if (tape.tracks(x)) {
    tape.record(out, [x, batch, ch, h, w, oh, ow](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      const long planes = static_cast<long>(batch) * ch;
      for (long p = 0; p < planes; ++p) {
        const T* in = x.data() + p * h * w;
        T* gp = gx.data() + p * h * w;
        const T* go = g.data() + p * oh * ow;
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) {
            const long b0 = static_cast<long>(2 * y) * w + 2 * xx;
            const long idx[4] = {b0, b0 + 1, b0 + w, b0 + w + 1};
            int arg = 0;
            for (int i = 1; i < 4; ++i)
              if (in[idx[i]] > in[idx[arg]]) arg = i;
            gp[idx[arg]] += go[static_cast<long>(y) * ow + xx];
          }
      }
    });
  }
  return out;
}

// max-shifted log(sum(exp(x))) over a vector -> scalar
template <typename T>
TensorT<T> logsumexp(TapeT<T>& tape, const TensorT<T>& x) {
  detail::check_rank("logsumexp", x, 1);
  const long n = x.size();
  T m = x.data()[0];
  for (long i = 1; i < n; ++i) m = std::max(m, x.data()[i]);
  T s = 0;
  for (long i = 0; i < n; ++i) s += std::exp(x.data()[i] - m);
  TensorT<T> out = TensorT<T>::scalar(m + std::log(s));
  if (tape.tracks(x)) {
    tape.record(out, [x, out](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      const T lse = out.item();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * std::exp(x.data()[i] - lse);
    });
  }
  return out;
}

// row-wise stable logsumexp: [B x C] -> [B]
template <typename T>
TensorT<T> logsumexp_rows(TapeT<T>& tape, const TensorT<T>& x) {
  detail::check_rank("logsumexp_rows", x, 2);
  const int rows = x.dim(0), cols = x.dim(1);
  TensorT<T> out(Shape{rows});
  for (int r = 0; r < rows; ++r) {
    const T* row = x.data() + static_cast<long>(r) * cols;
    T m = row[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, row[c]);
    T s = 0;
    for (int c = 0; c < cols; ++c) s += std::exp(row[c] - m);
    out.data()[r] = m + std::log(s);
  }
  if (tape.tracks(x)) {
    tape.record(out, [x, out, rows, cols](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (int r = 0; r < rows; ++r) {
        const T* row = x.data() + static_cast<long>(r) * cols;
        const T lse = out.data()[r];
        for (int c = 0; c < cols; ++c)
          gx[static_cast<size_t>(r) * cols + c] += g[static_cast<size_t>(r)] * std::exp(row[c] - lse);
      }
    });
  }
  return out;
}

// out[b] = x[b, idx[b]]
template <typename T>
TensorT<T> take_per_row(TapeT<T>& tape, const TensorT<T>& x, const std::vector<int>& idx) {
  detail::check_rank("take_per_row", x, 2);
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(idx.size()) != rows)
    throw DimensionError("take_per_row: " + std::to_string(idx.size()) + " indices for " +
                         std::to_string(rows) + " rows");
  for (int i : idx)
    if (i < 0 || i >= cols)
      throw RangeError("take_per_row: column " + std::to_string(i) + " out of [0, " +
                       std::to_string(cols) + ")");
  TensorT<T> out(Shape{rows});
  for (int r = 0; r < rows; ++r) out.data()[r] = x.data()[static_cast<long>(r) * cols + idx[r]];
  if (tape.tracks(x)) {
    tape.record(out, [x, idx, cols](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t r = 0; r < idx.size(); ++r) gx[r * cols + idx[r]] += g[r];
    });
  }
  return out;
}

template <typename T>
TensorT<T> sum(TapeT<T>& tape, const TensorT<T>& x) {
  T s = 0;
  for (long i = 0; i < x.size(); ++i) s += x.data()[i];
  TensorT<T> out = TensorT<T>::scalar(s);
  if (tape.tracks(x)) {
    tape.record(out, [x](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean(TapeT<T>& tape, const TensorT<T>& x) {
  T s = 0;
  for (long i = 0; i < x.size(); ++i) s += x.data()[i];
  const T inv = T(1) / static_cast<T>(x.size());
  TensorT<T> out = TensorT<T>::scalar(s * inv);
  if (tape.tracks(x)) {
    tape.record(out, [x, inv](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * inv;
    });
  }
  return out;
}

// per-row softmax over the first valid[b] columns, zeros beyond
template <typename T>
TensorT<T> softmax_rows_masked(TapeT<T>& tape, const TensorT<T>& x, const std::vector<int>& valid) {
  detail::check_rank("softmax_rows_masked", x, 2);
  const int rows = x.dim(0), cols = x.dim(1);
  if (static_cast<int>(valid.size()) != rows)
    throw DimensionError("softmax_rows_masked: " + std::to_string(valid.size()) +
                         " lengths for " + std::to_string(rows) + " rows");
  for (int v : valid)
    if (v < 1 || v > cols)
      throw InputError("softmax_rows_masked: valid length " + std::to_string(v) +
                       " outside [1, " + std::to_string(cols) + "]");
  TensorT<T> out(x.shape());
  for (int r = 0; r < rows; ++r) {
    const T* row = x.data() + static_cast<long>(r) * cols;
    T* o = out.data() + static_cast<long>(r) * cols;
    const int v = valid[static_cast<size_t>(r)];
    T m = row[0];
    for (int c = 1; c < v; ++c) m = std::max(m, row[c]);
    T s = 0;
    for (int c = 0; c < v; ++c) {
      o[c] = std::exp(row[c] - m);
      s += o[c];
    }
    for (int c = 0; c < v; ++c) o[c] /= s;
    for (int c = v; c < cols; ++c) o[c] = T(0);
  }
  if (tape.tracks(x)) {
    tape.record(out, [x, out, valid, rows, cols](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gx = tp.grad_buffer(x.node());
      for (int r = 0; r < rows; ++r) {
        const T* p = out.data() + static_cast<long>(r) * cols;
        const T* gr = g.data() + static_cast<long>(r) * cols;
        const int v = valid[static_cast<size_t>(r)];
        T dot = 0;
        for (int c = 0; c < v; ++c) dot += gr[c] * p[c];
        for (int c = 0; c < v; ++c)
          gx[static_cast<size_t>(r) * cols + c] += p[c] * (gr[c] - dot);
      }
    });
  }
  return out;
}

// out[b, :] = x[b, :] * w[b]; w carries B values in any shape
template <typename T>
TensorT<T> scale_rows(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& w) {
  detail::check_rank("scale_rows", x, 2);
  const int rows = x.dim(0), cols = x.dim(1);
  if (w.size() != rows)
    throw DimensionError("scale_rows: weight " + shape_str(w.shape()) + " for " +
                         std::to_string(rows) + " rows");
  TensorT<T> out(x.shape());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out.data()[static_cast<long>(r) * cols + c] =
          x.data()[static_cast<long>(r) * cols + c] * w.data()[r];
  if (tape.tracks(x) || tape.tracks(w)) {
    tape.record(out, [x, w, rows, cols](TapeT<T>& tp, const std::vector<T>& g) {
      if (tp.tracks(x)) {
        auto& gx = tp.grad_buffer(x.node());
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            gx[static_cast<size_t>(r) * cols + c] += g[static_cast<size_t>(r) * cols + c] * w.data()[r];
      }
      if (tp.tracks(w)) {
        auto& gw = tp.grad_buffer(w.node());
        for (int r = 0; r < rows; ++r) {
          T s = 0;
          for (int c = 0; c < cols; ++c)
            s += g[static_cast<size_t>(r) * cols + c] * x.data()[static_cast<long>(r) * cols + c];
          gw[static_cast<size_t>(r)] += s;
        }
      }
    });
  }
  return out;
}

// S[i, j] = w . relu(u_i + v_j + b) + c  for all row pairs; evaluates a
// one-hidden-layer scorer on every (row of U, row of V) combination without
// materializing the pair inputs
template <typename T>
TensorT<T> pairwise_score(TapeT<T>& tape, const TensorT<T>& u, const TensorT<T>& v,
                          const TensorT<T>& b, const TensorT<T>& w, const TensorT<T>& c) {
  detail::check_rank("pairwise_score", u, 2);
  detail::check_rank("pairwise_score", v, 2);
  const int a_rows = u.dim(0), hidden = u.dim(1), m_rows = v.dim(0);
  if (v.dim(1) != hidden || b.size() != hidden || w.size() != hidden)
    throw DimensionError("pairwise_score: hidden width mismatch, u " + shape_str(u.shape()) +
                         " v " + shape_str(v.shape()) + " b " + shape_str(b.shape()) + " w " +
                         shape_str(w.shape()));
  if (c.size() != 1)
    throw DimensionError("pairwise_score: output bias must be scalar, got " + shape_str(c.shape()));
  TensorT<T> out(Shape{a_rows, m_rows});
  const T c0 = c.data()[0];
  uint64_t bits = 0;
  int nbits = 0;
  for (int i = 0; i < a_rows; ++i) {
    const T* ui = u.data() + static_cast<long>(i) * hidden;
    for (int j = 0; j < m_rows; ++j) {
      const T* vj = v.data() + static_cast<long>(j) * hidden;
      T s = c0;
      for (int h = 0; h < hidden; ++h) {
        const T pre = ui[h] + vj[h] + b.data()[h];
        const bool on = pre > T(0);
        if (on) s += w.data()[h] * pre;
        bits = (bits << 1) | static_cast<uint64_t>(on);
        if (++nbits == 64) {
          tape.mix_pattern(bits);
          bits = 0;
          nbits = 0;
        }
      }
      out.data()[static_cast<long>(i) * m_rows + j] = s;
    }
  }
  if (nbits) tape.mix_pattern(bits | (1ull << 63));
  if (tape.tracks(u) || tape.tracks(v) || tape.tracks(b) || tape.tracks(w) || tape.tracks(c)) {
    tape.record(out, [u, v, b, w, c, a_rows, m_rows, hidden](TapeT<T>& tp,
                                                             const std::vector<T>& g) {
      std::vector<T>* gu = tp.tracks(u) ? &tp.grad_buffer(u.node()) : nullptr;
      std::vector<T>* gv = tp.tracks(v) ? &tp.grad_buffer(v.node()) : nullptr;
      std::vector<T>* gb = tp.tracks(b) ? &tp.grad_buffer(b.node()) : nullptr;
      std::vector<T>* gw = tp.tracks(w) ? &tp.grad_buffer(w.node()) : nullptr;
      std::vector<T>* gc = tp.tracks(c) ? &tp.grad_buffer(c.node()) : nullptr;
      for (int i = 0; i < a_rows; ++i) {
        const T* ui = u.data() + static_cast<long>(i) * hidden;
        for (int j = 0; j < m_rows; ++j) {
          const T gs = g[static_cast<size_t>(i) * m_rows + j];
          if (gs == T(0)) continue;
          const T* vj = v.data() + static_cast<long>(j) * hidden;
          if (gc) (*gc)[0] += gs;
          for (int h = 0; h < hidden; ++h) {
            const T pre = ui[h] + vj[h] + b.data()[h];
            if (pre <= T(0)) continue;
            const T gw_pre = gs * w.data()[h];
            if (gu) (*gu)[static_cast<size_t>(i) * hidden + h] += gw_pre;
            if (gv) (*gv)[static_cast<size_t>(j) * hidden + h] += gw_pre;
            if (gb) (*gb)[static_cast<size_t>(h)] += gw_pre;
            if (gw) (*gw)[static_cast<size_t>(h)] += gs * pre;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace crfuse
