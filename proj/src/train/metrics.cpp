#include "contextflow/train/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "contextflow/core/error.hpp"

namespace contextflow {

std::string metric_csv(const std::optional<double>& m) {
  if (!m) return "NA";
  std::ostringstream os;
  os.precision(10);
  os << *m;
  return os.str();
}

std::string MetricsReport::to_string() const {
  std::ostringstream os;
  auto put = [&](const char* name, const std::optional<double>& m) {
    os << name << "=" << metric_csv(m) << " ";
  };
  put("accuracy", accuracy);
  put("balanced_accuracy", balanced_accuracy);
  put("ms", ms);
  put("auroc", auroc);
  put("ap", ap);
  put("f1", f1);
  put("precision", precision);
  put("recall", recall);
  put("nll", nll);
  put("threshold", threshold);
  std::string s = os.str();
  if (!s.empty()) s.pop_back();
  return s;
}

double f1_score(double precision, double recall) {
  const double denom = precision + recall;
  if (denom == 0.0) return 0.0;
  return 2.0 * precision * recall / denom;
}

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<std::size_t>& labels) {
  if (scores.size() != labels.size()) throw DataError("scores/labels length mismatch");
  for (std::size_t l : labels) {
    if (l > 1) throw DataError("binary metric got label " + std::to_string(l));
  }
}

}  // namespace

std::optional<double> auroc_score(const std::vector<double>& scores,
                                  const std::vector<std::size_t>& labels) {
  check_binary(scores, labels);
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] == 1 ? pos : neg).push_back(scores[i]);
  }
  if (pos.empty() || neg.empty()) return std::nullopt;
  double won = 0.0;
  for (double p : pos) {
    for (double n : neg) {
      if (p > n) {
        won += 1.0;
      } else if (p == n) {
        won += 0.5;
      }
    }
  }
  return won / (double(pos.size()) * double(neg.size()));
}

std::optional<double> average_precision(const std::vector<double>& scores,
                                        const std::vector<std::size_t>& labels) {
  check_binary(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0, total_pos = 0;
  double sum = 0.0;
  for (std::size_t l : labels) total_pos += l;
  if (total_pos == 0) return std::nullopt;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1) {
      ++hits;
      sum += double(hits) / double(rank + 1);
    }
  }
  return sum / double(total_pos);
}

double best_f1_threshold(const std::vector<double>& scores,
                         const std::vector<std::size_t>& labels) {
  check_binary(scores, labels);
  if (scores.empty()) throw DataError("empty score list");
  // candidate cuts: each distinct score (>= semantics) plus one above the max
  std::vector<double> cands = scores;
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  cands.push_back(cands.back() + 1.0);
  double best_f1 = -1.0, best_thr = cands.front();
  for (double thr : cands) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool pred = scores[i] >= thr;
      if (pred && labels[i] == 1) ++tp;
      if (pred && labels[i] == 0) ++fp;
      if (!pred && labels[i] == 1) ++fn;
    }
    const double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    const double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    const double f = f1_score(p, r);
    if (f > best_f1) {
      best_f1 = f;
      best_thr = thr;
    }
  }
  return best_thr;
}

MetricsReport classify_metrics(const std::vector<std::size_t>& preds,
                               const std::vector<std::size_t>& labels, const NdArray* probs) {
  if (preds.size() != labels.size()) throw DataError("preds/labels length mismatch");
  if (preds.empty()) throw DataError("empty evaluation set");
  MetricsReport rep;
  const std::size_t n = preds.size();
  std::size_t correct = 0;
  std::size_t n_classes = 0;
  for (std::size_t i = 0; i < n; ++i) {
    n_classes = std::max(n_classes, std::max(preds[i], labels[i]) + 1);
    if (preds[i] == labels[i]) ++correct;
  }
  rep.accuracy = double(correct) / double(n);

  std::vector<std::size_t> support(n_classes, 0), tp(n_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    ++support[labels[i]];
    if (preds[i] == labels[i]) ++tp[labels[i]];
  }
  double recall_sum = 0.0, recall_min = std::numeric_limits<double>::infinity();
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (support[c] == 0) continue;
    const double r = double(tp[c]) / double(support[c]);
    recall_sum += r;
    recall_min = std::min(recall_min, r);
    ++present;
  }
  rep.balanced_accuracy = recall_sum / double(present);
  rep.ms = recall_min;

  // binary extras: treat class 1 as the positive
  bool binary = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (preds[i] > 1 || labels[i] > 1) binary = false;
  }
  if (binary) {
    std::size_t btp = 0, bfp = 0, bfn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (preds[i] == 1 && labels[i] == 1) ++btp;
      if (preds[i] == 1 && labels[i] == 0) ++bfp;
      if (preds[i] == 0 && labels[i] == 1) ++bfn;
    }
    rep.precision = btp + bfp ? double(btp) / double(btp + bfp) : 0.0;
    rep.recall = btp + bfn ? double(btp) / double(btp + bfn) : 0.0;
    rep.f1 = f1_score(*rep.precision, *rep.recall);
    if (probs) {
      if (probs->rank() != 2 || probs->extent(0) != n || probs->extent(1) < 2) {
        throw DataError("probs must be (N, M>=2) for binary ranking metrics");
      }
      std::vector<double> s(n);
      const std::size_t m = probs->extent(1);
      for (std::size_t i = 0; i < n; ++i) s[i] = probs->data()[i * m + 1];
      rep.auroc = auroc_score(s, labels);
      rep.ap = average_precision(s, labels);
    }
  }
  return rep;
}

MetricsReport detect_metrics(const std::vector<double>& scores,
                             const std::vector<std::size_t>& labels, double threshold) {
  check_binary(scores, labels);
  if (scores.empty()) throw DataError("empty evaluation set");
  MetricsReport rep;
  rep.threshold = threshold;
  const std::size_t n = scores.size();
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred == (labels[i] == 1)) ++correct;
    if (pred && labels[i] == 1) ++tp;
    if (pred && labels[i] == 0) ++fp;
    if (!pred && labels[i] == 1) ++fn;
  }
  rep.accuracy = double(correct) / double(n);
  rep.precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
  rep.recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
  rep.f1 = f1_score(*rep.precision, *rep.recall);
  rep.auroc = auroc_score(scores, labels);
  rep.ap = average_precision(scores, labels);
  return rep;
}

}  // namespace contextflow
