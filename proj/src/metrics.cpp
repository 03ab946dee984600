#include "feanet/metrics.hpp"

#include <array>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace feanet::metrics {

ConfusionMatrix::ConfusionMatrix(std::size_t classes)
    : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("ConfusionMatrix: needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t i) const {
  std::uint64_t t = 0;
  for (std::size_t j = 0; j < classes_; ++j) t += at(i, j);
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t j) const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < classes_; ++i) t += at(i, j);
  return t;
}

void ConfusionMatrix::accumulate(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("ConfusionMatrix::accumulate: " + std::to_string(predicted.size()) +
                                " predictions vs " + std::to_string(truth.size()) + " labels");
  }
  const auto limit = static_cast<int>(classes_);
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const int t = truth[k];
    const int p = predicted[k];
    if (t < 0 || t >= limit || p < 0 || p >= limit) {
      throw std::invalid_argument("ConfusionMatrix::accumulate: label out of range at pixel " +
                                  std::to_string(k) + " (truth " + std::to_string(t) +
                                  ", predicted " + std::to_string(p) + ")");
    }
    ++at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  return *this;
}

ClassMetrics per_class_metrics(const ConfusionMatrix& cm) {
  ClassMetrics m;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const auto hit = static_cast<double>(cm.at(c, c));
    const std::uint64_t row = cm.row_sum(c);
    const std::uint64_t uni = row + cm.col_sum(c) - cm.at(c, c);
    m.acc.push_back(row == 0 ? std::nullopt : std::optional<double>(hit / static_cast<double>(row)));
    m.iou.push_back(uni == 0 ? std::nullopt : std::optional<double>(hit / static_cast<double>(uni)));
  }
  return m;
}

MeanMetrics mean_metrics(const ConfusionMatrix& cm) {
  const ClassMetrics pc = per_class_metrics(cm);
  MeanMetrics out;
  double acc_sum = 0.0, iou_sum = 0.0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    if (pc.acc[c]) {
      acc_sum += *pc.acc[c];
      ++out.defined_acc;
    }
    if (pc.iou[c]) {
      iou_sum += *pc.iou[c];
      ++out.defined_iou;
    }
  }
  out.macc = out.defined_acc ? acc_sum / static_cast<double>(out.defined_acc) : 0.0;
  out.miou = out.defined_iou ? iou_sum / static_cast<double>(out.defined_iou) : 0.0;
  return out;
}

std::string class_name(std::size_t id) {
  static const std::array<const char*, 9> names{"unlabeled", "car",       "person",
                                                "bike",      "curve",     "car_stop",
                                                "guardrail", "color_cone", "bump"};
  return id < names.size() ? names[id] : "class" + std::to_string(id);
}

void write_csv(std::ostream& out, const ConfusionMatrix& cm) {
  const ClassMetrics pc = per_class_metrics(cm);
  const MeanMetrics mm = mean_metrics(cm);
  out << "class,acc,iou\n" << std::setprecision(17);
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    out << class_name(c) << ',';
    if (pc.acc[c]) out << *pc.acc[c];
    out << ',';
    if (pc.iou[c]) out << *pc.iou[c];
    out << '\n';
  }
  out << "mean," << mm.macc << ',' << mm.miou << '\n';
}

}  // namespace feanet::metrics
