#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ldnet {

/// Per-class one-vs-rest pixel tallies.
class ConfusionCounts {
 public:
  struct Tally {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    bool operator==(const Tally&) const = default;
  };

  explicit ConfusionCounts(std::size_t num_classes) : tallies_(num_classes) {}

  /// Masks are flat class-index arrays of equal length.
  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  /// Summation; associative and commutative.
  void merge(const ConfusionCounts& other);

  std::size_t num_classes() const { return tallies_.size(); }
  const Tally& operator[](std::size_t c) const { return tallies_.at(c); }
  Tally& operator[](std::size_t c) { return tallies_.at(c); }
  bool operator==(const ConfusionCounts&) const = default;

 private:
  std::vector<Tally> tallies_;
};

// Degenerate 0/0 ratios score 0.
double precision(const ConfusionCounts::Tally& t);
double recall(const ConfusionCounts::Tally& t);
/// 2PR / (P + R).
double f1_score(const ConfusionCounts::Tally& t);
/// TP / (TP + FP + FN).
double iou_score(const ConfusionCounts::Tally& t);

inline double f1_score(const ConfusionCounts& c, std::size_t cls) { return f1_score(c[cls]); }
inline double iou_score(const ConfusionCounts& c, std::size_t cls) { return iou_score(c[cls]); }

enum class ClassSet { kLaneClasses, kAllClasses };

std::string to_string(ClassSet set);

struct ClassMetrics {
  std::size_t cls = 0;
  double precision = 0, recall = 0, f1 = 0, iou = 0;
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

struct MetricsReport {
  ClassSet class_set = ClassSet::kLaneClasses;
  std::vector<ClassMetrics> per_class;  // the classes of `class_set`, ascending
  double mean_f1 = 0;
  double mean_iou = 0;
};

/// Macro mean over the chosen set. Lane classes are 1..C-1 (background 0
/// excluded); all classes are 0..C-1.
MetricsReport mean_report(const ConfusionCounts& counts, ClassSet set = ClassSet::kLaneClasses);

/// {"class_set", "per_class": {"<c>": {P,R,F1,IoU,TP,FP,FN}}, "mean_F1", "mean_IoU"}
/// with scores as percentages rounded to two decimals.
std::string report_json(const MetricsReport& report, int indent = 2);

/// {"lane_classes": <report>, "all_classes": <report>}
std::string reports_json(const ConfusionCounts& counts, int indent = 2);

}  // namespace ldnet
