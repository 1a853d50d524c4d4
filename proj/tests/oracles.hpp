#pragma once

// Scalar-loop reference implementations used as independent oracles for the
// engine kernels. Deliberately written as plain nested loops with no shared
// code paths into the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "adsd/ops.hpp"
#include "adsd/tensor.hpp"

namespace oracle {

using adsd::IntTensor;
using adsd::Shape;
using adsd::Tensor;
using adsd::ops::ConvSpec;

template <typename T>
Tensor<T> conv2d_ref(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                     const ConvSpec& sp) {
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = sp.out_channels;
  const int OH = sp.out_h(H), OW = sp.out_w(W);
  Tensor<T> y({(std::size_t)N, (std::size_t)Co, (std::size_t)OH, (std::size_t)OW});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          T acc = b.data()[co];
          for (int ci = 0; ci < Ci; ++ci)
            for (int ki = 0; ki < sp.kh; ++ki)
              for (int kj = 0; kj < sp.kw; ++kj) {
                const int ih = oh * sp.sh - sp.ph + ki * sp.dh;
                const int iw = ow * sp.sw - sp.pw + kj * sp.dw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.data()[((n * Ci + ci) * H + ih) * W + iw] *
                       w.data()[((co * Ci + ci) * sp.kh + ki) * sp.kw + kj];
              }
          y.data()[((n * Co + co) * OH + oh) * OW + ow] = acc;
        }
  return y;
}

template <typename T>
Tensor<T> conv_transpose2d_ref(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               const ConvSpec& sp) {
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = sp.out_channels;
  const int OH = sp.tout_h(H), OW = sp.tout_w(W);
  Tensor<T> y({(std::size_t)N, (std::size_t)Co, (std::size_t)OH, (std::size_t)OW});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int i = 0; i < OH * OW; ++i)
        y.data()[(n * Co + co) * OH * OW + i] = b.data()[co];
  for (int n = 0; n < N; ++n)
    for (int ci = 0; ci < Ci; ++ci)
      for (int ih = 0; ih < H; ++ih)
        for (int iw = 0; iw < W; ++iw) {
          const T v = x.data()[((n * Ci + ci) * H + ih) * W + iw];
          for (int co = 0; co < Co; ++co)
            for (int ki = 0; ki < sp.kh; ++ki)
              for (int kj = 0; kj < sp.kw; ++kj) {
                const int oh = ih * sp.sh - sp.ph + ki * sp.dh;
                const int ow = iw * sp.sw - sp.pw + kj * sp.dw;
                if (oh < 0 || oh >= OH || ow < 0 || ow >= OW) continue;
                y.data()[((n * Co + co) * OH + oh) * OW + ow] +=
                    v * w.data()[((ci * Co + co) * sp.kh + ki) * sp.kw + kj];
              }
        }
  return y;
}

template <typename T>
Tensor<T> batchnorm_train_ref(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              T eps) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < H * W; ++i) sum += x.data()[(n * C + c) * H * W + i];
    const double mu = sum / (N * H * W);
    double var = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < H * W; ++i) {
        const double d = x.data()[(n * C + c) * H * W + i] - mu;
        var += d * d;
      }
    var /= (N * H * W);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < H * W; ++i) {
        const double v = x.data()[(n * C + c) * H * W + i];
        y.data()[(n * C + c) * H * W + i] = static_cast<T>(
            gamma.data()[c] * (v - mu) / std::sqrt(var + eps) + beta.data()[c]);
      }
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_ref(const Tensor<T>& x) {
  const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C, 1, 1});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x.data()[nc * hw + i];
    y.data()[nc] = static_cast<T>(s / hw);
  }
  return y;
}

template <typename T>
Tensor<T> mul_channelwise_ref(const Tensor<T>& x, const std::vector<T>& scales, bool per_sample) {
  const std::size_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i)
        y.data()[(n * C + c) * hw + i] =
            x.data()[(n * C + c) * hw + i] * scales[per_sample ? n * C + c : c];
  return y;
}

// Unstabilized per-pixel cross entropy (safe at small logit magnitudes).
template <typename T>
T softmax_cross_entropy_ref(const Tensor<T>& logits, const IntTensor& labels,
                            const std::vector<T>& weights, std::int32_t ignore) {
  const std::size_t N = logits.dim(0), C = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  double acc = 0;
  std::size_t valid = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::int32_t lab = labels.data()[n * hw + p];
      if (lab == ignore) continue;
      ++valid;
      double denom = 0;
      for (std::size_t c = 0; c < C; ++c)
        denom += std::exp(static_cast<double>(logits.data()[(n * C + c) * hw + p]));
      const double py =
          std::exp(static_cast<double>(logits.data()[(n * C + lab) * hw + p])) / denom;
      const double w = weights.empty() ? 1.0 : static_cast<double>(weights[lab]);
      acc += -w * std::log(py);
    }
  return static_cast<T>(valid ? acc / valid : 0.0);
}

// Direct piecewise berHu evaluation per the definition.
template <typename T>
T berhu_ref(const std::vector<T>& pred, const std::vector<T>& target,
            const std::vector<int>& valid) {
  double rmax = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (valid[i]) {
      rmax = std::max(rmax, std::abs(static_cast<double>(pred[i] - target[i])));
      ++count;
    }
  const double beta = rmax / 5.0;
  if (beta == 0.0) return T(0);
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    const double r = std::abs(static_cast<double>(pred[i] - target[i]));
    acc += r <= beta ? r : (r * r + beta * beta) / (2.0 * beta);
  }
  return static_cast<T>(acc / count);
}

// Direct median-frequency formula with the lower-median convention.
inline std::vector<double> median_frequency_ref(const std::vector<std::uint64_t>& histogram) {
  double total = 0;
  for (auto h : histogram) total += static_cast<double>(h);
  std::vector<double> probs;
  for (auto h : histogram)
    if (h > 0) probs.push_back(static_cast<double>(h) / total);
  std::sort(probs.begin(), probs.end());
  const double pm = probs[(probs.size() - 1) / 2];
  std::vector<double> alpha(histogram.size(), 0.0);
  for (std::size_t c = 0; c < histogram.size(); ++c)
    if (histogram[c] > 0) alpha[c] = pm / (static_cast<double>(histogram[c]) / total);
  return alpha;
}

// Brute-force confusion counting plus metric formulas, independent of the
// library ConfusionMatrix.
struct BruteMetrics {
  double pixacc = 0, macc = 0, miou = 0;
  std::vector<double> iou;
  std::vector<std::uint64_t> counts;
};

inline BruteMetrics metrics_bruteforce(const std::vector<std::int32_t>& pred,
                                       const std::vector<std::int32_t>& gt, std::size_t C,
                                       std::int32_t ignore) {
  BruteMetrics m;
  m.counts.assign(C * C, 0);
  std::uint64_t correct = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == ignore) continue;
    ++total;
    if (pred[i] == gt[i]) ++correct;
    ++m.counts[static_cast<std::size_t>(gt[i]) * C + static_cast<std::size_t>(pred[i])];
  }
  m.pixacc = total ? static_cast<double>(correct) / total : 0.0;
  double accs = 0, ious = 0;
  std::size_t present = 0;
  m.iou.assign(C, -1.0);
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t gt_c = 0, pred_c = 0, inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (static_cast<std::size_t>(gt[i]) == c) ++gt_c;
      if (static_cast<std::size_t>(pred[i]) == c) ++pred_c;
      if (static_cast<std::size_t>(gt[i]) == c && static_cast<std::size_t>(pred[i]) == c) ++inter;
    }
    if (gt_c == 0) continue;
    ++present;
    accs += static_cast<double>(inter) / gt_c;
    const std::uint64_t uni = gt_c + pred_c - inter;
    m.iou[c] = uni ? static_cast<double>(inter) / uni : 0.0;
    ious += m.iou[c];
  }
  m.macc = accs / present;
  m.miou = ious / present;
  return m;
}

// Seeded uniform test tensors.
template <typename T>
Tensor<T> rand_tensor(Shape shape, std::uint64_t seed, T lo = T(-1), T hi = T(1)) {
  adsd::SplitMix64 rng(seed);
  return Tensor<T>::seeded_uniform(std::move(shape), rng, lo, hi);
}

}  // namespace oracle
