#pragma once

// Low-level forward/backward kernels for the layer types used by the
// encoder-decoder: 2-D convolution (im2col + GEMM), fused ReLU followed by
// batch normalization, max pooling and nearest-neighbour upsampling.
// All kernels work on NCHW tensors and accumulate gradients in place.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

#include "tracknet/tensor.hpp"

namespace tracknet::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int in_c = 0, in_h = 0, in_w = 0;
  int kh = 3, kw = 3, pad = 1, stride = 1;
  int out_h = 0, out_w = 0;

  int patch() const noexcept { return in_c * kh * kw; }
  std::size_t out_plane() const noexcept { return static_cast<std::size_t>(out_h) * out_w; }
};

// Number of output pixels processed per GEMM tile; keeps the im2col tile
// resident in cache.
inline constexpr int kTileColumns = 512;
// Elements per partial sum in the batch-norm reductions.
inline constexpr Eigen::Index kReduceBlock = 256;

template <typename T>
using Column = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using StridedRowMap = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedRowMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

// Unfolds output rows [oy0, oy1) of one sample into a
// patch() x ((oy1 - oy0) * out_w) matrix.
template <typename T>
void im2col_rows(const T* in, const ConvGeometry& g, int oy0, int oy1, T* col) {
  const std::size_t cols = static_cast<std::size_t>(oy1 - oy0) * g.out_w;
  for (int c = 0; c < g.in_c; ++c) {
    const T* src = in + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        T* dst = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * cols;
        for (int oy = oy0; oy < oy1; ++oy) {
          T* d = dst + static_cast<std::size_t>(oy - oy0) * g.out_w;
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(d, d + g.out_w, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * g.in_w;
          if (g.stride == 1) {
            const int shift = kj - g.pad;
            const int lo = std::min(g.out_w, std::max(0, -shift));
            const int hi = std::min(g.out_w, g.in_w - shift);
            std::fill(d, d + lo, T(0));
            if (hi > lo) std::memcpy(d + lo, srow + lo + shift, sizeof(T) * (hi - lo));
            std::fill(d + std::max(hi, lo), d + g.out_w, T(0));
          } else {
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              d[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_rows_add(const T* col, const ConvGeometry& g, int oy0, int oy1, T* in) {
  const std::size_t cols = static_cast<std::size_t>(oy1 - oy0) * g.out_w;
  for (int c = 0; c < g.in_c; ++c) {
    T* dst = in + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* src = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * cols;
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.in_h) continue;
          const T* s = src + static_cast<std::size_t>(oy - oy0) * g.out_w;
          T* drow = dst + static_cast<std::size_t>(iy) * g.in_w;
          if (g.stride == 1) {
            const int shift = kj - g.pad;
            const int lo = std::min(g.out_w, std::max(0, -shift));
            const int hi = std::min(g.out_w, g.in_w - shift);
            for (int ox = lo; ox < hi; ++ox) drow[ox + shift] += s[ox];
          } else {
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.in_w) drow[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

inline int tile_rows(const ConvGeometry& g) { return std::max(1, kTileColumns / g.out_w); }

// out = conv(in) + bias. `weight` is row-major [out_c][in_c * kh * kw].
template <typename T>
void conv_forward(const Tensor<T>& in, const std::vector<T>& weight, const std::vector<T>& bias,
                  int out_c, const ConvGeometry& g, Tensor<T>& out, std::vector<T>& col) {
  out = Tensor<T>(in.batch(), out_c, g.out_h, g.out_w);
  const int rows = tile_rows(g);
  col.resize(static_cast<std::size_t>(g.patch()) * rows * g.out_w);
  const ConstRowMap<T> wm(weight.data(), out_c, g.patch());
  const Eigen::Map<const Column<T>> b(bias.data(), out_c);
  const auto hw = static_cast<Eigen::Index>(g.out_plane());
  for (int n = 0; n < in.batch(); ++n) {
    for (int oy0 = 0; oy0 < g.out_h; oy0 += rows) {
      const int oy1 = std::min(g.out_h, oy0 + rows);
      const Eigen::Index cols = static_cast<Eigen::Index>(oy1 - oy0) * g.out_w;
      im2col_rows(in.sample(n), g, oy0, oy1, col.data());
      const ConstRowMap<T> cm(col.data(), g.patch(), cols);
      StridedRowMap<T> om(out.sample(n) + static_cast<std::size_t>(oy0) * g.out_w, out_c, cols,
                          Eigen::OuterStride<>(hw));
      om.noalias() = wm * cm;
      om.array().colwise() += b;
    }
  }
}

// Accumulates dweight/dbias; writes din when non-null.
template <typename T>
void conv_backward(const Tensor<T>& in, const std::vector<T>& weight, const Tensor<T>& dout,
                   const ConvGeometry& g, std::vector<T>& dweight, std::vector<T>& dbias,
                   Tensor<T>* din, std::vector<T>& col) {
  const int out_c = dout.channels();
  const auto hw = static_cast<Eigen::Index>(g.out_plane());
  const int rows = tile_rows(g);
  col.resize(static_cast<std::size_t>(g.patch()) * rows * g.out_w);
  const ConstRowMap<T> wm(weight.data(), out_c, g.patch());
  RowMap<T> dwm(dweight.data(), out_c, g.patch());
  Eigen::Map<Column<T>> db(dbias.data(), out_c);
  if (din) *din = Tensor<T>(in.batch(), in.channels(), in.height(), in.width());
  std::vector<T> dcol;
  if (din) dcol.resize(col.size());
  for (int n = 0; n < in.batch(); ++n) {
    const ConstRowMap<T> dfull(dout.sample(n), out_c, hw);
    db += dfull.rowwise().sum().array();
    for (int oy0 = 0; oy0 < g.out_h; oy0 += rows) {
      const int oy1 = std::min(g.out_h, oy0 + rows);
      const Eigen::Index cols = static_cast<Eigen::Index>(oy1 - oy0) * g.out_w;
      const ConstStridedRowMap<T> dom(dout.sample(n) + static_cast<std::size_t>(oy0) * g.out_w,
                                      out_c, cols, Eigen::OuterStride<>(hw));
      im2col_rows(in.sample(n), g, oy0, oy1, col.data());
      const ConstRowMap<T> cm(col.data(), g.patch(), cols);
      dwm.noalias() += dom * cm.transpose();
      if (din) {
        RowMap<T> dcm(dcol.data(), g.patch(), cols);
        dcm.noalias() = wm.transpose() * dom;
        col2im_rows_add(dcol.data(), g, oy0, oy1, din->sample(n));
      }
    }
  }
}

struct BatchMoments {
  std::vector<double> mean;
  std::vector<double> inv_std;
  std::vector<double> var;
};

// In place: x <- relu(x), returning the per-channel batch moments of the
// rectified values.
template <typename T>
BatchMoments relu_and_moments(Tensor<T>& x, double eps) {
  const int c_count = x.channels();
  BatchMoments m{std::vector<double>(c_count), std::vector<double>(c_count),
                 std::vector<double>(c_count)};
  const auto plane = static_cast<Eigen::Index>(x.plane());
  const double count = static_cast<double>(plane) * x.batch();
  for (int c = 0; c < c_count; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int n = 0; n < x.batch(); ++n) {
      T* base = x.channel(n, c);
      // Short runs summed in T, runs accumulated in double.
      for (Eigen::Index i = 0; i < plane; i += kReduceBlock) {
        Eigen::Map<Column<T>> a(base + i, std::min(kReduceBlock, plane - i));
        a = a.max(T(0));
        sum += static_cast<double>(a.sum());
        sq += static_cast<double>(a.square().sum());
      }
    }
    const double mean = sum / count;
    m.mean[c] = mean;
    m.var[c] = std::max(0.0, sq / count - mean * mean);
    m.inv_std[c] = 1.0 / std::sqrt(m.var[c] + eps);
  }
  return m;
}

// out = gamma * (y - mean) * inv_std + beta, per channel.
template <typename T>
void batch_norm_apply(const Tensor<T>& y, const std::vector<double>& mean,
                      const std::vector<double>& inv_std, const std::vector<T>& gamma,
                      const std::vector<T>& beta, Tensor<T>& out) {
  out = Tensor<T>(y.batch(), y.channels(), y.height(), y.width());
  const auto plane = static_cast<Eigen::Index>(y.plane());
  for (int n = 0; n < y.batch(); ++n) {
    for (int c = 0; c < y.channels(); ++c) {
      const auto scale = static_cast<T>(gamma[c] * inv_std[c]);
      const auto shift = static_cast<T>(beta[c] - gamma[c] * mean[c] * inv_std[c]);
      Eigen::Map<Column<T>>(out.channel(n, c), plane) =
          Eigen::Map<const Column<T>>(y.channel(n, c), plane) * scale + shift;
    }
  }
}

// Backward through batch-norm (batch statistics) and the preceding ReLU.
// `y` is the rectified activation; dz receives the gradient w.r.t. the
// pre-activation.
template <typename T>
void relu_bn_backward(const Tensor<T>& y, const BatchMoments& m, const std::vector<T>& gamma,
                      const Tensor<T>& dout, std::vector<T>& dgamma, std::vector<T>& dbeta,
                      Tensor<T>& dz) {
  dz = Tensor<T>(y.batch(), y.channels(), y.height(), y.width());
  const auto plane = static_cast<Eigen::Index>(y.plane());
  const double count = static_cast<double>(plane) * y.batch();
  for (int c = 0; c < y.channels(); ++c) {
    const double mean = m.mean[c];
    const double inv_std = m.inv_std[c];
    double sum_d = 0.0, sum_dy = 0.0;
    for (int n = 0; n < y.batch(); ++n) {
      for (Eigen::Index i = 0; i < plane; i += kReduceBlock) {
        const auto len = std::min(kReduceBlock, plane - i);
        const Eigen::Map<const Column<T>> yp(y.channel(n, c) + i, len);
        const Eigen::Map<const Column<T>> dp(dout.channel(n, c) + i, len);
        sum_d += static_cast<double>(dp.sum());
        sum_dy += static_cast<double>((dp * yp).sum());
      }
    }
    const double sum_dx = (sum_dy - mean * sum_d) * inv_std;
    dbeta[c] += static_cast<T>(sum_d);
    dgamma[c] += static_cast<T>(sum_dx);
    // dz = k * (d - mean(d) - xhat * mean(d * xhat)) on the active set,
    // expanded as a * d + b * y + c.
    const double k = static_cast<double>(gamma[c]) * inv_std;
    const double mean_d = sum_d / count;
    const double mean_dx = sum_dx / count;
    const auto a = static_cast<T>(k);
    const auto b = static_cast<T>(-k * inv_std * mean_dx);
    const auto off = static_cast<T>(k * (mean * inv_std * mean_dx - mean_d));
    for (int n = 0; n < y.batch(); ++n) {
      const Eigen::Map<const Column<T>> yp(y.channel(n, c), plane);
      const Eigen::Map<const Column<T>> dp(dout.channel(n, c), plane);
      Eigen::Map<Column<T>>(dz.channel(n, c), plane) =
          (yp > T(0)).select(dp * a + yp * b + off, T(0));
    }
  }
}

// Max pooling without padding; records the flat in-plane argmax of each
// output cell (first maximum in scan order).
template <typename T>
void maxpool_forward(const Tensor<T>& in, int kernel, int stride, int out_h, int out_w,
                     Tensor<T>& out, std::vector<std::int32_t>& argmax) {
  out = Tensor<T>(in.batch(), in.channels(), out_h, out_w);
  argmax.assign(out.size(), 0);
  std::size_t idx = 0;
  for (int n = 0; n < in.batch(); ++n) {
    for (int c = 0; c < in.channels(); ++c) {
      const T* src = in.channel(n, c);
      T* dst = out.channel(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox, ++idx) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_i = 0;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const int i = (oy * stride + ky) * in.width() + ox * stride + kx;
              if (src[i] > best) {
                best = src[i];
                best_i = i;
              }
            }
          }
          dst[oy * out_w + ox] = best;
          argmax[idx] = best_i;
        }
      }
    }
  }
}

template <typename T>
void maxpool_backward(const Tensor<T>& dout, const std::vector<std::int32_t>& argmax, int in_h,
                      int in_w, Tensor<T>& din) {
  din = Tensor<T>(dout.batch(), dout.channels(), in_h, in_w);
  std::size_t idx = 0;
  for (int n = 0; n < dout.batch(); ++n) {
    for (int c = 0; c < dout.channels(); ++c) {
      const T* src = dout.channel(n, c);
      T* dst = din.channel(n, c);
      for (std::size_t i = 0; i < dout.plane(); ++i, ++idx) dst[argmax[idx]] += src[i];
    }
  }
}

// Nearest-neighbour upsampling: every input sample is duplicated into a
// factor x factor block.
template <typename T>
void upsample_forward(const Tensor<T>& in, int factor, Tensor<T>& out) {
  out = Tensor<T>(in.batch(), in.channels(), in.height() * factor, in.width() * factor);
  for (int n = 0; n < in.batch(); ++n) {
    for (int c = 0; c < in.channels(); ++c) {
      const T* src = in.channel(n, c);
      T* dst = out.channel(n, c);
      for (int iy = 0; iy < in.height(); ++iy) {
        const T* srow = src + static_cast<std::size_t>(iy) * in.width();
        T* first = dst + static_cast<std::size_t>(iy) * factor * out.width();
        for (int ix = 0; ix < in.width(); ++ix)
          std::fill(first + ix * factor, first + (ix + 1) * factor, srow[ix]);
        for (int r = 1; r < factor; ++r)
          std::copy(first, first + out.width(), first + static_cast<std::size_t>(r) * out.width());
      }
    }
  }
}

template <typename T>
void upsample_backward(const Tensor<T>& dout, int factor, Tensor<T>& din) {
  din = Tensor<T>(dout.batch(), dout.channels(), dout.height() / factor, dout.width() / factor);
  for (int n = 0; n < dout.batch(); ++n) {
    for (int c = 0; c < dout.channels(); ++c) {
      const T* src = dout.channel(n, c);
      T* dst = din.channel(n, c);
      for (int y = 0; y < dout.height(); ++y) {
        const T* srow = src + static_cast<std::size_t>(y) * dout.width();
        T* drow = dst + static_cast<std::size_t>(y / factor) * din.width();
        for (int x = 0; x < dout.width(); ++x) drow[x / factor] += srow[x];
      }
    }
  }
}

}  // namespace tracknet::kernels
