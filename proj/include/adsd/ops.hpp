#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "adsd/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace adsd {

// Thread count for kernel-internal parallelism. ADSD_THREADS overrides.
// Parallel loops split work by output row, each row accumulated sequentially
// by a single thread, so results are bitwise identical for any thread count.
inline int thread_count() {
#ifdef _OPENMP
  static int n = [] {
    if (const char* env = std::getenv("ADSD_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    return std::min(omp_get_max_threads(), 8);
  }();
  return n;
#else
  return 1;
#endif
}

namespace ops {

// ---------------------------------------------------------------------------
// GEMM kernels, row-major, all accumulate into C.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  const bool par = M >= 2 && M * N * K > 16384;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(M); ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B^T where B is [N,K]
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  const bool par = M >= 2 && M * N * K > 16384;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(M); ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = T(0);
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// C[M,N] += A^T * B where A is [K,M], B is [K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  const bool par = M >= 2 && M * N * K > 16384;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(M); ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[k * M + i];
      if (av == T(0)) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution plumbing
// ---------------------------------------------------------------------------

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  int dh = 1, dw = 1;

  static ConvSpec k1(int in, int out) { return ConvSpec{in, out, 1, 1, 1, 1, 0, 0, 1, 1}; }
  static ConvSpec k3(int in, int out, int stride = 1, int pad = 1, int dil = 1) {
    return ConvSpec{in, out, 3, 3, stride, stride, pad, pad, dil, dil};
  }
  // Decoder default upsampler: exact 2x spatial doubling.
  static ConvSpec up2(int in, int out) { return ConvSpec{in, out, 2, 2, 2, 2, 0, 0, 1, 1}; }

  void validate() const {
    if (in_channels <= 0 || out_channels <= 0 || kh <= 0 || kw <= 0 || sh <= 0 || sw <= 0 ||
        ph < 0 || pw < 0 || dh <= 0 || dw <= 0)
      throw ConfigError("invalid ConvSpec parameters");
  }

  int out_h(int h) const { return (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1; }
  int out_w(int w) const { return (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1; }
  // Transposed-convolution output extents.
  int tout_h(int h) const { return (h - 1) * sh - 2 * ph + dh * (kh - 1) + 1; }
  int tout_w(int w) const { return (w - 1) * sw - 2 * pw + dw * (kw - 1) + 1; }

  bool is_pointwise() const {
    return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0 && dh == 1 && dw == 1;
  }
};

namespace detail {

// Gathers conv patches of src [C,H,W] into cols [C*kh*kw, OH*OW].
template <typename T>
void im2col(const T* src, int C, int H, int W, const ConvSpec& sp, int OH, int OW, T* cols) {
  const std::size_t q_count = static_cast<std::size_t>(OH) * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < sp.kh; ++ki) {
      for (int kj = 0; kj < sp.kw; ++kj) {
        T* row = cols + ((static_cast<std::size_t>(c) * sp.kh + ki) * sp.kw + kj) * q_count;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * sp.sh - sp.ph + ki * sp.dh;
          if (ih < 0 || ih >= H) {
            std::fill(row + static_cast<std::size_t>(oh) * OW,
                      row + static_cast<std::size_t>(oh + 1) * OW, T(0));
            continue;
          }
          const T* src_row = src + (static_cast<std::size_t>(c) * H + ih) * W;
          T* dst = row + static_cast<std::size_t>(oh) * OW;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * sp.sw - sp.pw + kj * sp.dw;
            dst[ow] = (iw >= 0 && iw < W) ? src_row[iw] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters cols back into dst [C,H,W] (accumulating).
template <typename T>
void col2im(const T* cols, int C, int H, int W, const ConvSpec& sp, int OH, int OW, T* dst) {
  const std::size_t q_count = static_cast<std::size_t>(OH) * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < sp.kh; ++ki) {
      for (int kj = 0; kj < sp.kw; ++kj) {
        const T* row = cols + ((static_cast<std::size_t>(c) * sp.kh + ki) * sp.kw + kj) * q_count;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * sp.sh - sp.ph + ki * sp.dh;
          if (ih < 0 || ih >= H) continue;
          T* dst_row = dst + (static_cast<std::size_t>(c) * H + ih) * W;
          const T* src = row + static_cast<std::size_t>(oh) * OW;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * sp.sw - sp.pw + kj * sp.dw;
            if (iw >= 0 && iw < W) dst_row[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
bool track(const std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// Cross-correlation (no kernel flip) with stride/padding/dilation.
// x: [N,Ci,H,W], w: [Co,Ci,kh,kw], b: [Co] -> [N,Co,OH,OW]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvSpec& sp) {
  sp.validate();
  if (x.ndim() != 4)
    throw DimensionError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  const int N = static_cast<int>(x.dim(0)), Ci = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  if (Ci != sp.in_channels)
    throw DimensionError("conv2d: input has " + std::to_string(Ci) + " channels, spec expects " +
                         std::to_string(sp.in_channels));
  const Shape expect_w{static_cast<std::size_t>(sp.out_channels), static_cast<std::size_t>(Ci),
                       static_cast<std::size_t>(sp.kh), static_cast<std::size_t>(sp.kw)};
  if (w.shape() != expect_w)
    throw DimensionError("conv2d: weight shape " + shape_str(w.shape()) + " does not match spec " +
                         shape_str(expect_w));
  if (b.shape() != Shape{static_cast<std::size_t>(sp.out_channels)})
    throw DimensionError("conv2d: bias shape " + shape_str(b.shape()) + " must be [" +
                         std::to_string(sp.out_channels) + "]");
  const int OH = sp.out_h(H), OW = sp.out_w(W);
  if (OH <= 0 || OW <= 0)
    throw ConfigError("conv2d: non-positive output extent " + std::to_string(OH) + "x" +
                      std::to_string(OW) + " for input " + std::to_string(H) + "x" +
                      std::to_string(W));

  const int Co = sp.out_channels;
  const std::size_t ckk = static_cast<std::size_t>(Ci) * sp.kh * sp.kw;
  const std::size_t q = static_cast<std::size_t>(OH) * OW;
  const std::size_t in_plane = static_cast<std::size_t>(Ci) * H * W;

  Tensor<T> y({static_cast<std::size_t>(N), static_cast<std::size_t>(Co),
               static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  std::vector<T> cols;
  if (!sp.is_pointwise()) cols.resize(ckk * q);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data() + n * in_plane;
    T* yn = y.data() + static_cast<std::size_t>(n) * Co * q;
    for (int co = 0; co < Co; ++co)
      std::fill(yn + static_cast<std::size_t>(co) * q, yn + static_cast<std::size_t>(co + 1) * q,
                b.data()[co]);
    const T* mat = xn;
    if (!sp.is_pointwise()) {
      detail::im2col(xn, Ci, H, W, sp, OH, OW, cols.data());
      mat = cols.data();
    }
    gemm_nn<T>(Co, q, ckk, w.data(), mat, yn);
  }

  if (detail::track<T>({&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ws = w.storage(), bs = b.storage(), ys = y.storage();
    if (xs->requires_grad) xs->ensure_grad();
    ws->ensure_grad();
    bs->ensure_grad();
    Tape<T>::active()->record([xs, ws, bs, ys, sp, N, Ci, H, W, OH, OW, Co, ckk, q, in_plane] {
      std::vector<T> cols, gcols;
      if (!sp.is_pointwise()) cols.resize(ckk * q);
      const bool need_dx = xs->requires_grad;
      if (need_dx && !sp.is_pointwise()) gcols.resize(ckk * q);
      for (int n = 0; n < N; ++n) {
        const T* xn = xs->data.data() + n * in_plane;
        const T* gy = ys->grad.data() + static_cast<std::size_t>(n) * Co * q;
        const T* mat = xn;
        if (!sp.is_pointwise()) {
          detail::im2col(xn, Ci, H, W, sp, OH, OW, cols.data());
          mat = cols.data();
        }
        // dW += dY * cols^T
        gemm_nt<T>(Co, ckk, q, gy, mat, ws->grad.data());
        // db += row sums of dY
        for (int co = 0; co < Co; ++co) {
          T acc = T(0);
          const T* row = gy + static_cast<std::size_t>(co) * q;
          for (std::size_t i = 0; i < q; ++i) acc += row[i];
          bs->grad[co] += acc;
        }
        if (need_dx) {
          T* gx = xs->grad.data() + n * in_plane;
          if (sp.is_pointwise()) {
            gemm_tn<T>(ckk, q, Co, ws->data.data(), gy, gx);
          } else {
            std::fill(gcols.begin(), gcols.end(), T(0));
            gemm_tn<T>(ckk, q, Co, ws->data.data(), gy, gcols.data());
            detail::col2im(gcols.data(), Ci, H, W, sp, OH, OW, gx);
          }
        }
      }
    });
  }
  return y;
}

// Transposed convolution (adjoint of conv2d over the spatial map).
// x: [N,Ci,H,W], w: [Ci,Co,kh,kw], b: [Co] -> [N,Co,OH,OW]
// where spec.in_channels = Ci, spec.out_channels = Co and the output extent
// is (H-1)*s - 2p + d*(k-1) + 1.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           const ConvSpec& sp) {
  sp.validate();
  if (x.ndim() != 4)
    throw DimensionError("conv_transpose2d: input must be NCHW, got " + shape_str(x.shape()));
  const int N = static_cast<int>(x.dim(0)), Ci = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  if (Ci != sp.in_channels)
    throw DimensionError("conv_transpose2d: input has " + std::to_string(Ci) +
                         " channels, spec expects " + std::to_string(sp.in_channels));
  const Shape expect_w{static_cast<std::size_t>(Ci), static_cast<std::size_t>(sp.out_channels),
                       static_cast<std::size_t>(sp.kh), static_cast<std::size_t>(sp.kw)};
  if (w.shape() != expect_w)
    throw DimensionError("conv_transpose2d: weight shape " + shape_str(w.shape()) +
                         " does not match spec " + shape_str(expect_w));
  if (b.shape() != Shape{static_cast<std::size_t>(sp.out_channels)})
    throw DimensionError("conv_transpose2d: bias shape mismatch");
  const int OH = sp.tout_h(H), OW = sp.tout_w(W);
  if (OH <= 0 || OW <= 0) throw ConfigError("conv_transpose2d: non-positive output extent");

  const int Co = sp.out_channels;
  const std::size_t ckk = static_cast<std::size_t>(Co) * sp.kh * sp.kw;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Co) * OH * OW;

  // The underlying conv maps [Co,OH,OW] -> patches at the H*W grid.
  ConvSpec under = sp;
  under.in_channels = Co;
  under.out_channels = Ci;

  Tensor<T> y({static_cast<std::size_t>(N), static_cast<std::size_t>(Co),
               static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  std::vector<T> g(ckk * hw);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data() + static_cast<std::size_t>(n) * Ci * hw;
    T* yn = y.data() + n * out_plane;
    std::fill(g.begin(), g.end(), T(0));
    gemm_tn<T>(ckk, hw, Ci, w.data(), xn, g.data());
    detail::col2im(g.data(), Co, OH, OW, under, H, W, yn);
    for (int co = 0; co < Co; ++co) {
      T* row = yn + static_cast<std::size_t>(co) * OH * OW;
      const T bv = b.data()[co];
      for (int i = 0; i < OH * OW; ++i) row[i] += bv;
    }
  }

  if (detail::track<T>({&x, &w, &b})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ws = w.storage(), bs = b.storage(), ys = y.storage();
    if (xs->requires_grad) xs->ensure_grad();
    ws->ensure_grad();
    bs->ensure_grad();
    Tape<T>::active()->record([xs, ws, bs, ys, under, N, Ci, H, W, OH, OW, Co, ckk, hw,
                               out_plane] {
      std::vector<T> cols(ckk * hw);
      for (int n = 0; n < N; ++n) {
        const T* gy = ys->grad.data() + n * out_plane;
        const T* xn = xs->data.data() + static_cast<std::size_t>(n) * Ci * hw;
        detail::im2col(gy, Co, OH, OW, under, H, W, cols.data());
        // dX += W * cols
        if (xs->requires_grad)
          gemm_nn<T>(Ci, hw, ckk, ws->data.data(),
                     cols.data(), xs->grad.data() + static_cast<std::size_t>(n) * Ci * hw);
        // dW += X * cols^T
        gemm_nt<T>(Ci, ckk, hw, xn, cols.data(), ws->grad.data());
        for (int co = 0; co < Co; ++co) {
          T acc = T(0);
          const T* row = gy + static_cast<std::size_t>(co) * OH * OW;
          for (int i = 0; i < OH * OW; ++i) acc += row[i];
          bs->grad[co] += acc;
        }
      }
    });
  }
  return y;
}

enum class Phase { Train, Eval };

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Per-channel batch normalization over (N,H,W).
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Phase phase, T eps = T(1e-5),
                      T momentum = T(0.1)) {
  if (x.ndim() != 4) throw DimensionError("batchnorm2d: input must be NCHW");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || state.running_mean.size() != C ||
      state.running_var.size() != C)
    throw DimensionError("batchnorm2d: channel count mismatch (C=" + std::to_string(C) + ")");

  const std::size_t hw = H * W;
  const std::size_t m = N * hw;
  std::vector<T> mean(C), inv_std(C);
  if (phase == Phase::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      }
      const T mu = acc / static_cast<T>(m);
      T vacc = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = p[i] - mu;
          vacc += d * d;
        }
      }
      const T var = vacc / static_cast<T>(m);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T var_unbiased = m > 1 ? vacc / static_cast<T>(m - 1) : var;
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * var_unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.data() + (n * C + c) * hw;
      T* q = y.data() + (n * C + c) * hw;
      const T g = gamma.data()[c], bv = beta.data()[c], mu = mean[c], is = inv_std[c];
      for (std::size_t i = 0; i < hw; ++i) q[i] = g * (p[i] - mu) * is + bv;
    }
  }

  if (detail::track<T>({&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), ys = y.storage();
    if (xs->requires_grad) xs->ensure_grad();
    gs->ensure_grad();
    bs->ensure_grad();
    const bool train = phase == Phase::Train;
    Tape<T>::active()->record([xs, gs, bs, ys, mean, inv_std, N, C, hw, m, train] {
      for (std::size_t c = 0; c < C; ++c) {
        const T mu = mean[c], is = inv_std[c], g = gs->data[c];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::size_t n = 0; n < N; ++n) {
          const T* dy = ys->grad.data() + (n * C + c) * hw;
          const T* xp = xs->data.data() + (n * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (xp[i] - mu) * is;
          }
        }
        gs->grad[c] += sum_dy_xhat;
        bs->grad[c] += sum_dy;
        if (!xs->requires_grad) continue;
        if (train) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::size_t n = 0; n < N; ++n) {
            const T* dy = ys->grad.data() + (n * C + c) * hw;
            const T* xp = xs->data.data() + (n * C + c) * hw;
            T* dx = xs->grad.data() + (n * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const T xhat = (xp[i] - mu) * is;
              dx[i] += g * is * (dy[i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
            }
          }
        } else {
          for (std::size_t n = 0; n < N; ++n) {
            const T* dy = ys->grad.data() + (n * C + c) * hw;
            T* dx = xs->grad.data() + (n * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dx[i] += g * is * dy[i];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Element-wise / broadcast ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (detail::track<T>({&x})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ys = y.storage();
    xs->ensure_grad();
    Tape<T>::active()->record([xs, ys] {
      // subgradient at 0 is 0
      for (std::size_t i = 0; i < xs->data.size(); ++i)
        if (xs->data[i] > T(0)) xs->grad[i] += ys->grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x.data()[i];
    // overflow-safe in both directions
    y.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                            : std::exp(v) / (T(1) + std::exp(v));
  }
  if (detail::track<T>({&x})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ys = y.storage();
    xs->ensure_grad();
    Tape<T>::active()->record([xs, ys] {
      for (std::size_t i = 0; i < xs->data.size(); ++i) {
        const T s = ys->data[i];
        xs->grad[i] += ys->grad[i] * s * (T(1) - s);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  if (detail::track<T>({&a, &b})) {
    y.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    if (as->requires_grad) as->ensure_grad();
    if (bs->requires_grad) bs->ensure_grad();
    Tape<T>::active()->record([as, bs, ys] {
      if (as->requires_grad)
        for (std::size_t i = 0; i < as->data.size(); ++i) as->grad[i] += ys->grad[i];
      if (bs->requires_grad)
        for (std::size_t i = 0; i < bs->data.size(); ++i) bs->grad[i] += ys->grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw DimensionError("mul: shape mismatch");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  if (detail::track<T>({&a, &b})) {
    y.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    if (as->requires_grad) as->ensure_grad();
    if (bs->requires_grad) bs->ensure_grad();
    Tape<T>::active()->record([as, bs, ys] {
      if (as->requires_grad)
        for (std::size_t i = 0; i < as->data.size(); ++i) as->grad[i] += ys->grad[i] * bs->data[i];
      if (bs->requires_grad)
        for (std::size_t i = 0; i < bs->data.size(); ++i) bs->grad[i] += ys->grad[i] * as->data[i];
    });
  }
  return y;
}

// y[n,c,h,w] = x[n,c,h,w] * s[.,c]; scales broadcast along H,W always and
// along N when given as [C], [1,C,1,1] or [C,1,1]. Any other axis broadcast
// is rejected.
template <typename T>
Tensor<T> mul_channelwise(const Tensor<T>& x, const Tensor<T>& scales) {
  if (x.ndim() != 4) throw DimensionError("mul_channelwise: input must be NCHW");
  const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  bool per_sample;
  if (scales.shape() == Shape{C} || scales.shape() == Shape{1, C, 1, 1} ||
      scales.shape() == Shape{C, 1, 1}) {
    per_sample = false;
  } else if (scales.shape() == Shape{N, C, 1, 1}) {
    per_sample = true;
  } else {
    throw DimensionError("mul_channelwise: scales " + shape_str(scales.shape()) +
                         " cannot broadcast over input " + shape_str(x.shape()));
  }
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T s = scales.data()[per_sample ? n * C + c : c];
      const T* p = x.data() + (n * C + c) * hw;
      T* q = y.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = p[i] * s;
    }
  }
  if (detail::track<T>({&x, &scales})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ss = scales.storage(), ys = y.storage();
    if (xs->requires_grad) xs->ensure_grad();
    if (ss->requires_grad) ss->ensure_grad();
    Tape<T>::active()->record([xs, ss, ys, N, C, hw, per_sample] {
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t si = per_sample ? n * C + c : c;
          const T s = ss->data[si];
          const T* dy = ys->grad.data() + (n * C + c) * hw;
          const T* xp = xs->data.data() + (n * C + c) * hw;
          if (xs->requires_grad) {
            T* dx = xs->grad.data() + (n * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dx[i] += dy[i] * s;
          }
          if (ss->requires_grad) {
            T acc = T(0);
            for (std::size_t i = 0; i < hw; ++i) acc += dy[i] * xp[i];
            ss->grad[si] += acc;
          }
        }
      }
    });
  }
  return y;
}

// y[n,c,h,w] = x[n,c,h,w] * gate[n,0,h,w]; the single-channel gate broadcasts
// along C only.
template <typename T>
Tensor<T> mul_pixelwise(const Tensor<T>& x, const Tensor<T>& gate) {
  if (x.ndim() != 4) throw DimensionError("mul_pixelwise: input must be NCHW");
  const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gate.shape() != Shape{N, 1, x.dim(2), x.dim(3)})
    throw DimensionError("mul_pixelwise: gate " + shape_str(gate.shape()) +
                         " must be [N,1,H,W] matching input " + shape_str(x.shape()));
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* g = gate.data() + n * hw;
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.data() + (n * C + c) * hw;
      T* q = y.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = p[i] * g[i];
    }
  }
  if (detail::track<T>({&x, &gate})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), gs = gate.storage(), ys = y.storage();
    if (xs->requires_grad) xs->ensure_grad();
    if (gs->requires_grad) gs->ensure_grad();
    Tape<T>::active()->record([xs, gs, ys, N, C, hw] {
      for (std::size_t n = 0; n < N; ++n) {
        const T* g = gs->data.data() + n * hw;
        T* dg = gs->requires_grad ? gs->grad.data() + n * hw : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
          const T* dy = ys->grad.data() + (n * C + c) * hw;
          const T* xp = xs->data.data() + (n * C + c) * hw;
          if (xs->requires_grad) {
            T* dx = xs->grad.data() + (n * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) dx[i] += dy[i] * g[i];
          }
          if (dg)
            for (std::size_t i = 0; i < hw; ++i) dg[i] += dy[i] * xp[i];
        }
      }
    });
  }
  return y;
}

// [N,C,H,W] -> [N,C,1,1], each element the mean over the spatial map.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.ndim() != 4) throw DimensionError("global_avg_pool: input must be NCHW");
  const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C, 1, 1});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* p = x.data() + nc * hw;
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    y.data()[nc] = acc / static_cast<T>(hw);
  }
  if (detail::track<T>({&x})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ys = y.storage();
    xs->ensure_grad();
    Tape<T>::active()->record([xs, ys, N, C, hw] {
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T g = ys->grad[nc] * inv;
        T* dx = xs->grad.data() + nc * hw;
        for (std::size_t i = 0; i < hw; ++i) dx[i] += g;
      }
    });
  }
  return y;
}

// [N,C,1,1] -> [N,C,H,W] by replication (used by the ASPP pooling branch).
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& x, std::size_t H, std::size_t W) {
  if (x.ndim() != 4 || x.dim(2) != 1 || x.dim(3) != 1)
    throw DimensionError("broadcast_spatial: input must be [N,C,1,1]");
  const std::size_t N = x.dim(0), C = x.dim(1), hw = H * W;
  Tensor<T> y({N, C, H, W});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T* q = y.data() + nc * hw;
    std::fill(q, q + hw, x.data()[nc]);
  }
  if (detail::track<T>({&x})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ys = y.storage();
    xs->ensure_grad();
    Tape<T>::active()->record([xs, ys, N, C, hw] {
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* dy = ys->grad.data() + nc * hw;
        T acc = T(0);
        for (std::size_t i = 0; i < hw; ++i) acc += dy[i];
        xs->grad[nc] += acc;
      }
    });
  }
  return y;
}

// Concatenates [N,Ci,H,W] tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t Ctot = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 4 || p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
      throw DimensionError("concat_channels: incompatible input shapes");
    Ctot += p.dim(1);
  }
  const std::size_t hw = H * W;
  Tensor<T> y({N, Ctot, H, W});
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t C = p.dim(1);
    for (std::size_t n = 0; n < N; ++n)
      std::copy(p.data() + n * C * hw, p.data() + (n + 1) * C * hw,
                y.data() + (n * Ctot + c0) * hw);
    c0 += C;
  }
  bool any = false;
  for (const auto& p : parts)
    if (p.requires_grad()) any = true;
  if (Tape<T>::active() && any) {
    y.set_requires_grad(true);
    std::vector<typename Tensor<T>::StoragePtr> srcs;
    for (const auto& p : parts) {
      srcs.push_back(p.storage());
      if (p.requires_grad()) srcs.back()->ensure_grad();
    }
    auto ys = y.storage();
    Tape<T>::active()->record([srcs, ys, N, Ctot, hw] {
      std::size_t c0 = 0;
      for (const auto& s : srcs) {
        const std::size_t C = s->shape[1];
        if (s->requires_grad) {
          for (std::size_t n = 0; n < N; ++n) {
            const T* dy = ys->grad.data() + (n * Ctot + c0) * hw;
            T* dx = s->grad.data() + n * C * hw;
            for (std::size_t i = 0; i < C * hw; ++i) dx[i] += dy[i];
          }
        }
        c0 += C;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> y({1});
  T acc = T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  y.data()[0] = acc;
  if (detail::track<T>({&x})) {
    y.set_requires_grad(true);
    auto xs = x.storage(), ys = y.storage();
    xs->ensure_grad();
    Tape<T>::active()->record([xs, ys] {
      const T g = ys->grad[0];
      for (std::size_t i = 0; i < xs->data.size(); ++i) xs->grad[i] += g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses and label utilities
// ---------------------------------------------------------------------------

inline constexpr std::int32_t kIgnoreIndex = 255;

// Weighted mean over non-ignored pixels of -alpha_y * log softmax(logits)_y,
// stabilized by max subtraction. Empty class_weights means unit weights.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const IntTensor& labels,
                                const std::vector<T>& class_weights,
                                std::int32_t ignore_index = kIgnoreIndex) {
  if (logits.ndim() != 4) throw DimensionError("softmax_cross_entropy: logits must be NCHW");
  const std::size_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (labels.shape() != Shape{N, H, W})
    throw DimensionError("softmax_cross_entropy: labels " + shape_str(labels.shape()) +
                         " must be [N,H,W] for logits " + shape_str(logits.shape()));
  if (!class_weights.empty() && class_weights.size() != C)
    throw DimensionError("softmax_cross_entropy: class_weights size mismatch");
  const std::size_t hw = H * W;

  std::size_t valid = 0;
  T acc = T(0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::int32_t lab = labels.data()[n * hw + p];
      if (lab == ignore_index) continue;
      if (lab < 0 || static_cast<std::size_t>(lab) >= C)
        throw DataError("softmax_cross_entropy: label " + std::to_string(lab) +
                        " outside [0," + std::to_string(C) + ") and not ignore_index");
      ++valid;
      const T* l = logits.data() + n * C * hw + p;
      T mx = l[0];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, l[c * hw]);
      T lse = T(0);
      for (std::size_t c = 0; c < C; ++c) lse += std::exp(l[c * hw] - mx);
      lse = mx + std::log(lse);
      const T w = class_weights.empty() ? T(1) : class_weights[lab];
      acc += w * (lse - l[static_cast<std::size_t>(lab) * hw]);
    }
  }
  Tensor<T> y({1});
  y.data()[0] = valid ? acc / static_cast<T>(valid) : T(0);

  if (valid && detail::track<T>({&logits})) {
    y.set_requires_grad(true);
    auto ls = logits.storage(), ys = y.storage();
    ls->ensure_grad();
    auto labs = labels;  // by value: small int maps
    Tape<T>::active()->record([ls, ys, labs, class_weights, ignore_index, N, C, hw, valid] {
      const T gout = ys->grad[0] / static_cast<T>(valid);
      std::vector<T> sm(C);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t p = 0; p < hw; ++p) {
          const std::int32_t lab = labs.data()[n * hw + p];
          if (lab == ignore_index) continue;
          const T* l = ls->data.data() + n * C * hw + p;
          T mx = l[0];
          for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, l[c * hw]);
          T denom = T(0);
          for (std::size_t c = 0; c < C; ++c) {
            sm[c] = std::exp(l[c * hw] - mx);
            denom += sm[c];
          }
          const T w = class_weights.empty() ? T(1) : class_weights[lab];
          T* g = ls->grad.data() + n * C * hw + p;
          for (std::size_t c = 0; c < C; ++c) {
            T soft = sm[c] / denom;
            if (c == static_cast<std::size_t>(lab)) soft -= T(1);
            g[c * hw] += gout * w * soft;
          }
        }
      }
    });
  }
  return y;
}

// Reversed Huber loss, mean over valid elements. The threshold is
// beta = max|pred-target| / 5 over valid elements and is treated as a
// constant in backward. The [N,H,W] mask applies to every channel.
template <typename T>
Tensor<T> berhu_loss(const Tensor<T>& pred, const Tensor<T>& target, const IntTensor& valid_mask) {
  if (!pred.same_shape(target))
    throw DimensionError("berhu_loss: pred " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  if (pred.ndim() != 4) throw DimensionError("berhu_loss: tensors must be NCHW");
  const std::size_t N = pred.dim(0), C = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
  if (valid_mask.shape() != Shape{N, pred.dim(2), pred.dim(3)})
    throw DimensionError("berhu_loss: valid_mask must be [N,H,W]");

  std::size_t valid_px = 0;
  T rmax = T(0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      if (!valid_mask.data()[n * hw + p]) continue;
      ++valid_px;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = (n * C + c) * hw + p;
        rmax = std::max(rmax, std::abs(pred.data()[i] - target.data()[i]));
      }
    }
  }
  if (valid_px == 0) throw DataError("berhu_loss: no valid pixels");
  const std::size_t count = valid_px * C;
  const T beta = rmax / T(5);

  T acc = T(0);
  if (beta > T(0)) {
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t p = 0; p < hw; ++p) {
        if (!valid_mask.data()[n * hw + p]) continue;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (n * C + c) * hw + p;
          const T r = std::abs(pred.data()[i] - target.data()[i]);
          acc += r <= beta ? r : (r * r + beta * beta) / (T(2) * beta);
        }
      }
    }
  }
  Tensor<T> y({1});
  y.data()[0] = acc / static_cast<T>(count);

  if (beta > T(0) && detail::track<T>({&pred})) {
    y.set_requires_grad(true);
    auto ps = pred.storage(), ts = target.storage(), ys = y.storage();
    ps->ensure_grad();
    auto mask = valid_mask;
    Tape<T>::active()->record([ps, ts, ys, mask, beta, N, C, hw, count] {
      const T gout = ys->grad[0] / static_cast<T>(count);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t p = 0; p < hw; ++p) {
          if (!mask.data()[n * hw + p]) continue;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = (n * C + c) * hw + p;
            const T d = ps->data[i] - ts->data[i];
            const T r = std::abs(d);
            T g;
            if (r <= beta)
              g = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            else
              g = d / beta;
            ps->grad[i] += gout * g;
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Non-differentiable utilities
// ---------------------------------------------------------------------------

// Argmax over the channel axis; ties break toward the lowest class index.
template <typename T>
IntTensor argmax_channels(const Tensor<T>& logits) {
  if (logits.ndim() != 4) throw DimensionError("argmax_channels: logits must be NCHW");
  const std::size_t N = logits.dim(0), C = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  IntTensor out({N, logits.dim(2), logits.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      const T* l = logits.data() + n * C * hw + p;
      std::size_t best = 0;
      T bv = l[0];
      for (std::size_t c = 1; c < C; ++c) {
        if (l[c * hw] > bv) {
          bv = l[c * hw];
          best = c;
        }
      }
      out.data()[n * hw + p] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

// Nearest-neighbor label downsampling by an integer factor (top-left tap).
inline IntTensor downsample_labels(const IntTensor& labels, int factor) {
  if (labels.ndim() != 3) throw DimensionError("downsample_labels: labels must be [N,H,W]");
  if (factor < 1) throw ConfigError("downsample_labels: factor must be >= 1");
  const std::size_t N = labels.dim(0), H = labels.dim(1), W = labels.dim(2);
  if (H % factor != 0 || W % factor != 0)
    throw DimensionError("downsample_labels: extent not divisible by factor " +
                         std::to_string(factor));
  const std::size_t OH = H / factor, OW = W / factor;
  IntTensor out({N, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j)
        out.data()[(n * OH + i) * OW + j] =
            labels.data()[(n * H + i * factor) * W + j * factor];
  return out;
}

}  // namespace ops
}  // namespace adsd
