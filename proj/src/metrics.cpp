#include "hyperseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "hyperseg/serialize.hpp"

namespace hyperseg {

using nlohmann::json;

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth) {
  require_same_shape(pred, truth, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] != 0, t = truth.values[i] != 0;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
    c.tn += !p && !t;
  }
  return c;
}

ConfusionCounts confusion_at(const ProbabilityMap& p, const LabelMap& truth, double tau) {
  require_same_shape(p, truth, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool f = p.values[i] >= tau, t = truth.values[i] != 0;
    c.tp += f && t;
    c.fp += f && !t;
    c.fn += !f && t;
    c.tn += !f && !t;
  }
  return c;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den, double empty) {
  return den == 0 ? empty : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double dice(const ConfusionCounts& c) { return ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0); }
double precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp, 1.0); }
double recall(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn, 1.0); }
double balanced_accuracy(const ConfusionCounts& c) {
  return 0.5 * (ratio(c.tp, c.tp + c.fn, 1.0) + ratio(c.tn, c.tn + c.fp, 1.0));
}

std::vector<double> threshold_grid(double step, double lo, double hi) {
  if (!(step > 0.0) || hi < lo) throw std::invalid_argument("threshold_grid: need step > 0 and lo <= hi");
  std::vector<double> out;
  const auto n = static_cast<long long>(std::floor((hi - lo) / step + 1e-9));
  for (long long k = 0; k <= n; ++k) out.push_back(std::round((lo + static_cast<double>(k) * step) * 1e12) / 1e12);
  return out;
}

namespace {

std::optional<RocCurve> roc_from_counts(const std::vector<double>& taus, const std::vector<ConfusionCounts>& counts) {
  if (counts.empty()) return std::nullopt;
  const auto& any = counts.front();
  const std::uint64_t pos = any.tp + any.fn, neg = any.fp + any.tn;
  if (pos == 0 || neg == 0) return std::nullopt;
  RocCurve roc;
  for (std::size_t i = 0; i < taus.size(); ++i)
    roc.points.push_back({taus[i], ratio(counts[i].fp, neg, 0.0), ratio(counts[i].tp, pos, 0.0)});
  roc.points.push_back({std::nan(""), 0.0, 0.0});
  roc.points.push_back({std::nan(""), 1.0, 1.0});
  auto sorted = roc.points;
  std::sort(sorted.begin(), sorted.end(), [](const RocPoint& a, const RocPoint& b) {
    return a.fpr != b.fpr ? a.fpr < b.fpr : a.tpr < b.tpr;
  });
  for (std::size_t i = 1; i < sorted.size(); ++i)
    roc.auc += (sorted[i].fpr - sorted[i - 1].fpr) * 0.5 * (sorted[i].tpr + sorted[i - 1].tpr);
  return roc;
}

void check_lists(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths, const char* op) {
  if (ps.empty()) throw std::invalid_argument(std::string(op) + ": no maps");
  if (ps.size() != truths.size())
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(ps.size()) + " predictions vs " +
                                std::to_string(truths.size()) + " label maps");
}

std::vector<ConfusionCounts> pooled_counts(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                                           const std::vector<double>& taus) {
  std::vector<ConfusionCounts> out(taus.size());
  for (std::size_t m = 0; m < ps.size(); ++m)
    for (std::size_t i = 0; i < taus.size(); ++i) out[i] += confusion_at(ps[m], truths[m], taus[i]);
  return out;
}

DiceSweep sweep_from_counts(const std::vector<double>& taus, const std::vector<ConfusionCounts>& counts) {
  DiceSweep s;
  double lo = 1.0, hi = 0.0;
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const double d = dice(counts[i]);
    s.points.push_back({taus[i], d});
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  s.range = s.points.empty() ? 0.0 : hi - lo;
  return s;
}

}  // namespace

std::optional<RocCurve> roc_curve(const ProbabilityMap& p, const LabelMap& truth, const std::vector<double>& taus) {
  return roc_curve(std::vector<ProbabilityMap>{p}, std::vector<LabelMap>{truth}, taus);
}

std::optional<RocCurve> roc_curve(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                                  const std::vector<double>& taus) {
  check_lists(ps, truths, "roc_curve");
  if (taus.empty()) return std::nullopt;
  return roc_from_counts(taus, pooled_counts(ps, truths, taus));
}

std::optional<double> exact_auc(const ProbabilityMap& p, const LabelMap& truth) {
  require_same_shape(p, truth, "exact_auc");
  std::vector<std::pair<double, bool>> v;
  v.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) v.emplace_back(p.values[i], truth.values[i] != 0);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double negatives_below = 0, pos = 0, neg = 0, acc = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    double tie_pos = 0, tie_neg = 0;
    while (j < v.size() && v[j].first == v[i].first) {
      (v[j].second ? tie_pos : tie_neg) += 1;
      ++j;
    }
    acc += tie_pos * (negatives_below + 0.5 * tie_neg);
    negatives_below += tie_neg;
    pos += tie_pos;
    neg += tie_neg;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return acc / (pos * neg);
}

DiceSweep dice_threshold_sweep(const ProbabilityMap& p, const LabelMap& truth, const std::vector<double>& taus) {
  return dice_threshold_sweep(std::vector<ProbabilityMap>{p}, std::vector<LabelMap>{truth}, taus);
}

DiceSweep dice_threshold_sweep(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                               const std::vector<double>& taus) {
  check_lists(ps, truths, "dice_threshold_sweep");
  return sweep_from_counts(taus, pooled_counts(ps, truths, taus));
}

ProbabilityQuality probability_quality(const ProbabilityMap& p, const ProbabilityMap& p_true) {
  require_same_shape(p, p_true, "probability_quality");
  ProbabilityQuality q;
  if (p.size() == 0) return q;
  std::size_t mid = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p.values[i] - p_true.values[i];
    q.mae += std::abs(d);
    q.brier += d * d;
    mid += p.values[i] > 0.1 && p.values[i] < 0.9;
  }
  const double n = static_cast<double>(p.size());
  q.mae /= n;
  q.brier /= n;
  q.polarization_fraction = static_cast<double>(mid) / n;
  return q;
}

MetricsReport aggregate(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                        const std::vector<ProbabilityMap>* p_true, const EvaluationOptions& opts) {
  check_lists(ps, truths, "aggregate");
  MetricsReport r;
  ConfusionCounts c;
  for (std::size_t m = 0; m < ps.size(); ++m) c += confusion_at(ps[m], truths[m], opts.threshold);
  r.dice = dice(c);
  r.balanced_accuracy = balanced_accuracy(c);
  r.precision = precision(c);
  r.recall = recall(c);
  if (auto roc = roc_curve(ps, truths, opts.roc_taus)) r.roc_auc = roc->auc;
  const auto sweep = dice_threshold_sweep(ps, truths, opts.sweep_taus);
  r.dice_vs_threshold = sweep.points;
  r.dice_range = sweep.range;
  if (p_true) {
    if (p_true->size() != ps.size()) throw std::invalid_argument("aggregate: p_true list size mismatch");
    ProbabilityQuality q;
    double pixels = 0, mid = 0;
    for (std::size_t m = 0; m < ps.size(); ++m) {
      const auto one = probability_quality(ps[m], (*p_true)[m]);
      const double n = static_cast<double>(ps[m].size());
      q.mae += one.mae * n;
      q.brier += one.brier * n;
      mid += one.polarization_fraction * n;
      pixels += n;
    }
    q.mae /= pixels;
    q.brier /= pixels;
    q.polarization_fraction = mid / pixels;
    r.quality = q;
  }
  return r;
}

MetricsReport macro_aggregate(const std::vector<ProbabilityMap>& ps, const std::vector<LabelMap>& truths,
                              const std::vector<ProbabilityMap>* p_true, const EvaluationOptions& opts) {
  check_lists(ps, truths, "macro_aggregate");
  MetricsReport r;
  r.dice_vs_threshold.resize(opts.sweep_taus.size());
  for (std::size_t i = 0; i < opts.sweep_taus.size(); ++i) r.dice_vs_threshold[i].tau = opts.sweep_taus[i];
  double auc_sum = 0, range_sum = 0;
  std::size_t auc_n = 0;
  ProbabilityQuality q;
  const double n = static_cast<double>(ps.size());
  for (std::size_t m = 0; m < ps.size(); ++m) {
    std::vector<ProbabilityMap> one_p{ps[m]};
    std::vector<LabelMap> one_t{truths[m]};
    std::vector<ProbabilityMap> one_true;
    if (p_true) one_true.push_back((*p_true).at(m));
    const auto s = aggregate(one_p, one_t, p_true ? &one_true : nullptr, opts);
    r.dice += s.dice / n;
    r.balanced_accuracy += s.balanced_accuracy / n;
    r.precision += s.precision / n;
    r.recall += s.recall / n;
    if (s.roc_auc) {
      auc_sum += *s.roc_auc;
      ++auc_n;
    }
    for (std::size_t i = 0; i < s.dice_vs_threshold.size(); ++i) r.dice_vs_threshold[i].dice += s.dice_vs_threshold[i].dice / n;
    range_sum += s.dice_range;
    if (s.quality) {
      q.mae += s.quality->mae / n;
      q.brier += s.quality->brier / n;
      q.polarization_fraction += s.quality->polarization_fraction / n;
    }
  }
  if (auc_n) r.roc_auc = auc_sum / static_cast<double>(auc_n);
  r.dice_range = range_sum / n;
  if (p_true) r.quality = q;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void write_summary_csv(const std::filesystem::path& path, const std::vector<MethodReport>& rows) {
  std::ostringstream os;
  os << "method,averaging,dice,balanced_accuracy,precision,recall,roc_auc,dice_range,prob_mae,brier,polarization_fraction\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    os << row.method << ',' << row.averaging << ',' << num(r.dice) << ',' << num(r.balanced_accuracy) << ','
       << num(r.precision) << ',' << num(r.recall) << ',' << opt_num(r.roc_auc) << ',' << num(r.dice_range) << ','
       << (r.quality ? num(r.quality->mae) : "") << ',' << (r.quality ? num(r.quality->brier) : "") << ','
       << (r.quality ? num(r.quality->polarization_fraction) : "") << '\n';
  }
  write_text(path, os.str());
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<MethodReport>& rows) {
  std::ostringstream os;
  os << "method,averaging,tau,dice\n";
  for (const auto& row : rows)
    for (const auto& p : row.report.dice_vs_threshold)
      os << row.method << ',' << row.averaging << ',' << num(p.tau) << ',' << num(p.dice) << '\n';
  write_text(path, os.str());
}

void write_report_json(const std::filesystem::path& path, const std::vector<MethodReport>& rows) {
  json out = json::array();
  for (const auto& row : rows) {
    const auto& r = row.report;
    json sweep = json::array();
    for (const auto& p : r.dice_vs_threshold) sweep.push_back({{"tau", p.tau}, {"dice", p.dice}});
    json q = nullptr;
    if (r.quality)
      q = {{"prob_mae", r.quality->mae}, {"brier", r.quality->brier},
           {"polarization_fraction", r.quality->polarization_fraction}};
    out.push_back({{"method", row.method},
                   {"averaging", row.averaging},
                   {"dice", r.dice},
                   {"balanced_accuracy", r.balanced_accuracy},
                   {"precision", r.precision},
                   {"recall", r.recall},
                   {"roc_auc", opt_json(r.roc_auc)},
                   {"dice_range", r.dice_range},
                   {"probability_quality", q},
                   {"dice_vs_threshold", sweep}});
  }
  write_text(path, out.dump(2) + "\n");
}

}  // namespace hyperseg
