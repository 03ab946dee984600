#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace feanet::metrics {

/// counts[i][j] = pixels of true class i predicted as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) {
    return counts_[truth * classes_ + predicted];
  }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t i) const;
  std::uint64_t col_sum(std::size_t j) const;

  /// Adds one count per pixel; throws on unequal lengths or labels outside
  /// [0, classes).
  void accumulate(std::span<const int> predicted, std::span<const int> truth);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Per-class recall and IoU; nullopt where the denominator is zero.
struct ClassMetrics {
  std::vector<std::optional<double>> acc;
  std::vector<std::optional<double>> iou;
};

ClassMetrics per_class_metrics(const ConfusionMatrix& cm);

struct MeanMetrics {
  double macc = 0.0;
  double miou = 0.0;
  std::size_t defined_acc = 0;  // classes entering the mAcc average
  std::size_t defined_iou = 0;
};

/// Means over classes, skipping undefined ones. With every class present
/// this is the plain 1/(k+1) average.
MeanMetrics mean_metrics(const ConfusionMatrix& cm);

/// MFNet class names for ids 0..8 ("unlabeled" first); ids beyond fall
/// back to "class<i>".
std::string class_name(std::size_t id);

/// CSV: header, one row per class (name,acc,iou; empty cell if undefined),
/// then a summary row "mean,<mAcc>,<mIoU>".
void write_csv(std::ostream& out, const ConfusionMatrix& cm);

}  // namespace feanet::metrics
