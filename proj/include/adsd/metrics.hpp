#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adsd/ops.hpp"

namespace adsd {

struct MetricSummary {
  double pixacc = 0.0;
  double macc = 0.0;
  double miou = 0.0;
  std::vector<double> per_class_iou;  // NaN for classes absent from ground truth
};

// C x C count table, rows = ground truth, columns = prediction.
// Supports element-wise merge so per-image matrices can be reduced.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  std::size_t num_classes() const { return c_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * c_ + pred]; }
  std::uint64_t total() const;

  // Counts every non-ignored pixel of the pair of [N,H,W] (or [H,W]) maps.
  void accumulate(const IntTensor& pred, const IntTensor& gt,
                  std::int32_t ignore_index = ops::kIgnoreIndex);

  void merge(const ConfusionMatrix& other);
  void reset();

  // PixAcc, mAcc, mIoU and per-class IoU. Classes with no ground-truth
  // presence are excluded from the mAcc/mIoU averages.
  MetricSummary compute() const;

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

// Two-line CSV: header row of class names, data row of per-class IoUs.
// Absent classes render as empty cells.
std::string per_class_iou_csv(const MetricSummary& m, const std::vector<std::string>& class_names);

}  // namespace adsd
