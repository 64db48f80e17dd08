#include "ldnet/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace ldnet {

void ConfusionCounts::accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("metrics: prediction has " + std::to_string(pred.size()) +
                                " pixels, ground truth " + std::to_string(gt.size()));
  }
  const std::size_t classes = tallies_.size();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= classes || gt[i] >= classes) {
      throw std::invalid_argument("metrics: class index " + std::to_string(std::max(pred[i], gt[i])) +
                                  " at pixel " + std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  // Per pixel: pred==gt is a TP for that class; otherwise FP for pred, FN for gt.
  std::vector<std::uint64_t> tp(classes), fp(classes), fn(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == gt[i]) {
      ++tp[pred[i]];
    } else {
      ++fp[pred[i]];
      ++fn[gt[i]];
    }
  }
  const auto total = static_cast<std::uint64_t>(pred.size());
  for (std::size_t c = 0; c < classes; ++c) {
    tallies_[c].tp += tp[c];
    tallies_[c].fp += fp[c];
    tallies_[c].fn += fn[c];
    tallies_[c].tn += total - tp[c] - fp[c] - fn[c];
  }
}

void ConfusionCounts::merge(const ConfusionCounts& other) {
  if (other.num_classes() != num_classes()) throw std::invalid_argument("metrics: merging different class counts");
  for (std::size_t c = 0; c < tallies_.size(); ++c) {
    tallies_[c].tp += other.tallies_[c].tp;
    tallies_[c].fp += other.tallies_[c].fp;
    tallies_[c].fn += other.tallies_[c].fn;
    tallies_[c].tn += other.tallies_[c].tn;
  }
}

double precision(const ConfusionCounts::Tally& t) {
  const auto d = t.tp + t.fp;
  return d ? static_cast<double>(t.tp) / static_cast<double>(d) : 0.0;
}

double recall(const ConfusionCounts::Tally& t) {
  const auto d = t.tp + t.fn;
  return d ? static_cast<double>(t.tp) / static_cast<double>(d) : 0.0;
}

double f1_score(const ConfusionCounts::Tally& t) {
  // 2PR/(P+R) reduced to counts, which avoids two intermediate roundings.
  const auto d = 2 * t.tp + t.fp + t.fn;
  return t.tp ? static_cast<double>(2 * t.tp) / static_cast<double>(d) : 0.0;
}

double iou_score(const ConfusionCounts::Tally& t) {
  const auto d = t.tp + t.fp + t.fn;
  return d ? static_cast<double>(t.tp) / static_cast<double>(d) : 0.0;
}

std::string to_string(ClassSet set) { return set == ClassSet::kLaneClasses ? "lane_classes" : "all_classes"; }

MetricsReport mean_report(const ConfusionCounts& counts, ClassSet set) {
  MetricsReport report;
  report.class_set = set;
  const std::size_t first = set == ClassSet::kLaneClasses ? 1 : 0;
  for (std::size_t c = first; c < counts.num_classes(); ++c) {
    const auto& t = counts[c];
    report.per_class.push_back({c, precision(t), recall(t), f1_score(t), iou_score(t), t.tp, t.fp, t.fn});
  }
  if (!report.per_class.empty()) {
    for (const auto& m : report.per_class) {
      report.mean_f1 += m.f1;
      report.mean_iou += m.iou;
    }
    report.mean_f1 /= static_cast<double>(report.per_class.size());
    report.mean_iou /= static_cast<double>(report.per_class.size());
  }
  return report;
}

namespace {

double percent(double v) { return std::round(v * 10000.0) / 100.0; }

nlohmann::ordered_json to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["class_set"] = to_string(report.class_set);
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& m : report.per_class) {
    per[std::to_string(m.cls)] = {{"P", percent(m.precision)}, {"R", percent(m.recall)}, {"F1", percent(m.f1)},
                                  {"IoU", percent(m.iou)},     {"TP", m.tp},                {"FP", m.fp},
                                  {"FN", m.fn}};
  }
  j["per_class"] = std::move(per);
  j["mean_F1"] = percent(report.mean_f1);
  j["mean_IoU"] = percent(report.mean_iou);
  return j;
}

}  // namespace

std::string report_json(const MetricsReport& report, int indent) { return to_json(report).dump(indent); }

std::string reports_json(const ConfusionCounts& counts, int indent) {
  nlohmann::ordered_json j;
  j["lane_classes"] = to_json(mean_report(counts, ClassSet::kLaneClasses));
  j["all_classes"] = to_json(mean_report(counts, ClassSet::kAllClasses));
  return j.dump(indent);
}

}  // namespace ldnet
