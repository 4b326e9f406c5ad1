#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hyperseg/grid.hpp"

namespace hyperseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth);
// Counts for the superlevel set p >= tau, without building the label map.
ConfusionCounts confusion_at(const ProbabilityMap& p, const LabelMap& truth, double tau);

// 2tp / (2tp + fp + fn); 1.0 when both maps are empty.
double dice(const ConfusionCounts& c);
// 1.0 when nothing is predicted.
double precision(const ConfusionCounts& c);
// 1.0 when the truth is empty.
double recall(const ConfusionCounts& c);
// (TPR + TNR) / 2, each rate 1.0 when its class is absent.
double balanced_accuracy(const ConfusionCounts& c);

// {0, step, 2 step, ..., 1}
std::vector<double> threshold_grid(double step = 0.05, double lo = 0.0, double hi = 1.0);

struct RocPoint {
  double tau = 0;
  double fpr = 0;
  double tpr = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // grid order, then the (0,0) and (1,1) endpoints
  double auc = 0;                // trapezoid over points sorted by (fpr, tpr)
};

// Absent when the truth lacks positives or negatives.
std::optional<RocCurve> roc_curve(const ProbabilityMap& p, const LabelMap& truth, const std::vector<double>& taus);
// Pooled over several maps.
std::optional<RocCurve> roc_curve(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                                  const std::vector<double>& taus);
// Rank-based AUC over every distinct threshold (ties count one half).
std::optional<double> exact_auc(const ProbabilityMap& p, const LabelMap& truth);

struct SweepPoint {
  double tau = 0;
  double dice = 0;
};

struct DiceSweep {
  std::vector<SweepPoint> points;
  double range = 0;  // max - min
};

DiceSweep dice_threshold_sweep(const ProbabilityMap& p, const LabelMap& truth, const std::vector<double>& taus);
// Dice from counts summed over every map at each tau.
DiceSweep dice_threshold_sweep(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                               const std::vector<double>& taus);

struct ProbabilityQuality {
  double mae = 0;
  double brier = 0;
  double polarization_fraction = 0;  // share of pixels with p in (0.1, 0.9)
};

ProbabilityQuality probability_quality(const ProbabilityMap& p, const ProbabilityMap& p_true);

struct MetricsReport {
  double dice = 0;
  double balanced_accuracy = 0;
  double precision = 0;
  double recall = 0;
  std::optional<double> roc_auc;
  std::vector<SweepPoint> dice_vs_threshold;
  double dice_range = 0;
  std::optional<ProbabilityQuality> quality;  // when p_true is known
};

struct EvaluationOptions {
  double threshold = 0.5;
  std::vector<double> roc_taus = threshold_grid();
  std::vector<double> sweep_taus = threshold_grid();
};

// Micro aggregate: counts summed over every map before dividing, AUC on the
// pooled pixels, probability quality weighted per pixel.
MetricsReport aggregate(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                        const std::vector<ProbabilityMap>* p_true = nullptr, const EvaluationOptions& opts = {});
// Macro aggregate: mean of the per-map reports (AUC over the maps where it is defined).
MetricsReport macro_aggregate(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                              const std::vector<ProbabilityMap>* p_true = nullptr, const EvaluationOptions& opts = {});

struct MethodReport {
  std::string method;
  std::string averaging;  // "micro" or "macro"
  MetricsReport report;
};

void write_summary_csv(const std::filesystem::path& path, const std::vector<MethodReport>& rows);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<MethodReport>& rows);
void write_report_json(const std::filesystem::path& path, const std::vector<MethodReport>& rows);

}  // namespace hyperseg
