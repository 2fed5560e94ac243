#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "contextflow/data/datasets.hpp"
#include "contextflow/flow/model.hpp"
#include "contextflow/train/metrics.hpp"
#include "contextflow/train/schedule.hpp"

namespace contextflow {

struct EpochRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::size_t steps = 0;
  std::size_t rejected = 0;
  std::optional<double> val_nll;
  std::optional<double> val_accuracy;
};

struct TrainLog {
  std::vector<EpochRow> epochs;
  std::size_t rejected_steps = 0;
  bool aborted_nan = false;

  double final_loss() const { return epochs.empty() ? 0.0 : epochs.back().train_loss; }
};

// Trains the current phase of the model on `train`, evaluating on `val`
// (optional) at each epoch end. Appends one CSV row per epoch to
// cfg.log_csv and writes cfg.checkpoint_path at each epoch end when set.
// A non-finite loss aborts the run, leaving the last end-of-epoch
// checkpoint in place; singular mixing matrices reject the step.
TrainLog fit(FlowModel& model, const Dataset& train, const Dataset* val, const TrainConfig& cfg);

// Per-row total log-likelihood (eval mode, batched, deterministic per seed).
std::vector<double> score_total(FlowModel& model, const Dataset& ds, std::uint64_t seed);

// Per-row class log-likelihood matrix (N, M), eval mode.
NdArray class_loglik_matrix(FlowModel& model, const Dataset& ds, std::uint64_t seed);

// Likelihood classification: argmax over per-class log-likelihoods.
MetricsReport evaluate_classify(FlowModel& model, const Dataset& ds, std::uint64_t seed);

// Anomaly detection: score = -log p; the threshold maximizing F1 on `val`
// is applied to `test` (labels: 1 = anomaly).
MetricsReport evaluate_detect(FlowModel& model, const Dataset& val, const Dataset& test,
                              std::uint64_t seed);

}  // namespace contextflow
