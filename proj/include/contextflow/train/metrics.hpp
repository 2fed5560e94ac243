#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"

namespace contextflow {

// Metrics that a given task cannot define stay empty and print as NA
// (e.g. AuROC under single-class labels, AP without positives).
struct MetricsReport {
  std::optional<double> accuracy;
  std::optional<double> balanced_accuracy;  // mean per-class recall
  std::optional<double> ms;                 // minimum per-class recall
  std::optional<double> auroc;
  std::optional<double> ap;
  std::optional<double> f1;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> nll;
  std::optional<double> threshold;  // detection tasks: the applied cut

  std::string to_string() const;  // "metric=value ..." with NA markers
};

std::string metric_csv(const std::optional<double>& m);  // value or "NA"

// 2PR/(P+R), 0 when P+R == 0. Unit-agnostic (fractions or percents).
double f1_score(double precision, double recall);

// Pair-ranking AuROC with half credit for ties; empty when labels contain
// a single class.
std::optional<double> auroc_score(const std::vector<double>& scores,
                                  const std::vector<std::size_t>& labels);

// Average precision: mean over positives of precision at each positive's
// rank, scores sorted descending. Empty when there is no positive.
std::optional<double> average_precision(const std::vector<double>& scores,
                                        const std::vector<std::size_t>& labels);

// Threshold (predict positive when score >= threshold) maximizing F1 on the
// given scores; ties resolved toward the smallest threshold.
double best_f1_threshold(const std::vector<double>& scores,
                         const std::vector<std::size_t>& labels);

// Classification metrics from hard predictions; probs (N, M) optionally
// supplies class-1 scores for AuROC/AP on binary tasks.
MetricsReport classify_metrics(const std::vector<std::size_t>& preds,
                               const std::vector<std::size_t>& labels, const NdArray* probs);

// Detection metrics at a fixed threshold (pred = score >= threshold).
MetricsReport detect_metrics(const std::vector<double>& scores,
                             const std::vector<std::size_t>& labels, double threshold);

}  // namespace contextflow
