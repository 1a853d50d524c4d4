#include "adsd/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace adsd {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : c_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ConfigError("ConfusionMatrix: need at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

void ConfusionMatrix::accumulate(const IntTensor& pred, const IntTensor& gt,
                                 std::int32_t ignore_index) {
  if (pred.shape() != gt.shape())
    throw DimensionError("ConfusionMatrix::accumulate: pred " + shape_str(pred.shape()) +
                         " vs gt " + shape_str(gt.shape()));
  const std::size_t n = pred.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t g = gt.data()[i];
    if (g == ignore_index) continue;
    const std::int32_t p = pred.data()[i];
    if (g < 0 || static_cast<std::size_t>(g) >= c_)
      throw DataError("ConfusionMatrix: ground-truth label " + std::to_string(g) +
                      " outside [0," + std::to_string(c_) + ")");
    if (p < 0 || static_cast<std::size_t>(p) >= c_)
      throw DataError("ConfusionMatrix: predicted label " + std::to_string(p) + " outside [0," +
                      std::to_string(c_) + ")");
    ++counts_[static_cast<std::size_t>(g) * c_ + static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw DimensionError("ConfusionMatrix::merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void ConfusionMatrix::reset() { counts_.assign(counts_.size(), 0); }

MetricSummary ConfusionMatrix::compute() const {
  const std::uint64_t tot = total();
  if (tot == 0) throw DataError("ConfusionMatrix::compute: no counted pixels");

  MetricSummary m;
  m.per_class_iou.assign(c_, std::numeric_limits<double>::quiet_NaN());

  std::uint64_t trace = 0;
  double acc_sum = 0.0, iou_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < c_; ++c) {
    const std::uint64_t diag = counts_[c * c_ + c];
    trace += diag;
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < c_; ++k) {
      row += counts_[c * c_ + k];
      col += counts_[k * c_ + c];
    }
    if (row == 0) continue;  // class absent from ground truth
    ++present;
    acc_sum += static_cast<double>(diag) / static_cast<double>(row);
    const std::uint64_t uni = row + col - diag;
    const double iou = uni ? static_cast<double>(diag) / static_cast<double>(uni) : 0.0;
    m.per_class_iou[c] = iou;
    iou_sum += iou;
  }
  m.pixacc = static_cast<double>(trace) / static_cast<double>(tot);
  m.macc = acc_sum / static_cast<double>(present);
  m.miou = iou_sum / static_cast<double>(present);
  return m;
}

std::string per_class_iou_csv(const MetricSummary& m,
                              const std::vector<std::string>& class_names) {
  if (class_names.size() != m.per_class_iou.size())
    throw DimensionError("per_class_iou_csv: name count mismatch");
  std::ostringstream os;
  for (std::size_t c = 0; c < class_names.size(); ++c)
    os << (c ? "," : "") << class_names[c];
  os << "\n";
  for (std::size_t c = 0; c < m.per_class_iou.size(); ++c) {
    os << (c ? "," : "");
    if (!std::isnan(m.per_class_iou[c])) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", m.per_class_iou[c]);
      os << buf;
    }
  }
  os << "\n";
  return os.str();
}

}  // namespace adsd
