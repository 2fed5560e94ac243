#include "contextflow/train/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "contextflow/core/error.hpp"
#include "contextflow/core/log.hpp"
#include "contextflow/train/checkpoint.hpp"
#include "contextflow/train/optimizer.hpp"

namespace contextflow {

namespace {

constexpr std::size_t kEvalBatch = 256;

struct Batch {
  NdArray data;
  NdArray contexts;
  std::vector<std::size_t> labels;
};

Batch slice(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t lo,
            std::size_t hi) {
  std::vector<std::size_t> idx(order.begin() + lo, order.begin() + hi);
  Dataset rows = select_rows(ds, idx);
  Batch b;
  b.data = std::move(rows.data);
  b.contexts = std::move(rows.contexts);
  if (rows.has_labels) b.labels = std::move(rows.labels);
  return b;
}

void append_csv_row(const std::string& path, const EpochRow& row, Phase phase) {
  if (path.empty()) return;
  const bool fresh = [&] {
    std::ifstream probe(path);
    return !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
  }();
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError("cannot append to training log '" + path + "'");
  if (fresh) {
    f << "phase,epoch,lr,train_loss,steps,rejected_steps,val_nll,val_accuracy\n";
  }
  std::ostringstream os;
  os.precision(10);
  os << phase_name(phase) << ',' << row.epoch << ',' << row.lr << ',' << row.train_loss << ','
     << row.steps << ',' << row.rejected << ',' << metric_csv(row.val_nll) << ','
     << metric_csv(row.val_accuracy) << '\n';
  f << os.str();
}

// labels only participate when the head actually distinguishes classes
std::vector<std::size_t> effective_labels(const FlowModel& model, const Batch& batch) {
  if (batch.labels.empty()) return {};
  return model.config().head.classes > 1 ? batch.labels : std::vector<std::size_t>{};
}

}  // namespace

TrainLog fit(FlowModel& model, const Dataset& train, const Dataset* val, const TrainConfig& cfg) {
  cfg.validate();
  if (model.phase() != cfg.phase) {
    throw ConfigError(std::string("config wants the ") + phase_name(cfg.phase) +
                      " phase but the model is in the " + phase_name(model.phase()) + " phase");
  }
  TrainLog log;
  if (cfg.total_epochs == 0) return log;  // zero steps: parameters untouched
  const std::size_t n = train.size();
  if (n == 0) throw DataError("empty training set");
  train.validate();

  Rng base(cfg.seed);
  Rng shuffle_rng = base.split("shuffle");
  Rng noise_rng = base.split("dequant");
  Rng eval_rng = base.split("eval");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;

  // data-dependent actnorm init from the first shuffled batch
  if (!model.actnorm_ready()) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
    Batch first = slice(train, order, 0, std::min(cfg.batch_size, n));
    Rng init_rng = base.split("actnorm_init");
    model.init_actnorm(first.data, model.needs_context() ? &first.contexts : nullptr, init_rng);
  }

  AdamW opt(model.store(), model.trainable_prefix(), cfg.weight_decay);
  log_info("fit: " + std::string(phase_name(cfg.phase)) + " phase, " + std::to_string(n) +
           " rows, " + std::to_string(steps_per_epoch) + " steps/epoch, " +
           std::to_string(opt.slot_count()) + " parameter tensors");

  for (std::size_t epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
    double loss_sum = 0.0;
    std::size_t loss_count = 0, rejected = 0;
    double lr = cfg.lr_init;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t lo = step * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, n);
      Batch batch = slice(train, order, lo, hi);
      lr = lr_at(epoch, double(step) / double(steps_per_epoch), cfg);
      try {
        LogProbResult res = model.log_prob(
            batch.data, model.needs_context() ? &batch.contexts : nullptr, noise_rng, true);
        Tensor loss = gmm_loss(res.class_ll, effective_labels(model, batch), cfg.alpha);
        const double loss_val = loss.value().item();
        if (!std::isfinite(loss_val)) {
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                               std::to_string(step));
        }
        backward(loss);
        opt.step(lr);
        loss_sum += loss_val;
        ++loss_count;
      } catch (const SingularMatrixError& e) {
        ++rejected;
        log_info("step rejected (singular mixing matrix): " + std::string(e.what()));
      } catch (const NumericalError& e) {
        log_error("aborting on non-finite loss: " + std::string(e.what()) +
                  (cfg.checkpoint_path.empty()
                       ? ""
                       : "; last-good checkpoint: " + cfg.checkpoint_path));
        log.aborted_nan = true;
        log.rejected_steps += rejected;
        return log;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_count ? loss_sum / double(loss_count) : 0.0;
    row.steps = loss_count;
    row.rejected = rejected;
    log.rejected_steps += rejected;
    if (val && val->size() > 0) {
      const std::uint64_t ep_seed = eval_rng.next_u64();
      std::vector<double> totals = score_total(model, *val, ep_seed);
      double nll = 0.0;
      for (double t : totals) nll -= t;
      row.val_nll = nll / double(totals.size());
      if (val->has_labels && model.config().head.classes > 1) {
        MetricsReport rep = evaluate_classify(model, *val, ep_seed);
        row.val_accuracy = rep.accuracy;
      }
    }
    log.epochs.push_back(row);
    append_csv_row(cfg.log_csv, row, cfg.phase);
    if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    std::ostringstream os;
    os.precision(6);
    os << "epoch " << epoch << " lr " << lr << " loss " << row.train_loss;
    if (row.val_nll) os << " val_nll " << *row.val_nll;
    if (row.val_accuracy) os << " val_acc " << *row.val_accuracy;
    if (rejected) os << " rejected " << rejected;
    log_info(os.str());
  }
  return log;
}

namespace {

// batched eval-mode pass collecting per-row class log-likelihoods and totals
void eval_pass(FlowModel& model, const Dataset& ds, std::uint64_t seed, NdArray* class_ll_out,
               std::vector<double>* total_out) {
  const std::size_t n = ds.size();
  if (n == 0) throw DataError("empty evaluation set");
  Rng rng = Rng(seed).split("eval_pass");
  const std::size_t m = model.config().head.classes;
  if (class_ll_out) *class_ll_out = NdArray({n, m});
  if (total_out) total_out->assign(n, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t lo = 0; lo < n; lo += kEvalBatch) {
    const std::size_t hi = std::min(lo + kEvalBatch, n);
    Batch batch = slice(ds, order, lo, hi);
    LogProbResult res = model.log_prob(
        batch.data, model.needs_context() ? &batch.contexts : nullptr, rng, false);
    const NdArray& ll = res.class_ll.value();
    const NdArray& total = res.total.value();
    for (std::size_t i = lo; i < hi; ++i) {
      if (class_ll_out) {
        for (std::size_t c = 0; c < m; ++c) {
          class_ll_out->data()[i * m + c] = ll.data()[(i - lo) * m + c];
        }
      }
      if (total_out) (*total_out)[i] = total.data()[i - lo];
    }
  }
}

}  // namespace

std::vector<double> score_total(FlowModel& model, const Dataset& ds, std::uint64_t seed) {
  std::vector<double> totals;
  eval_pass(model, ds, seed, nullptr, &totals);
  return totals;
}

NdArray class_loglik_matrix(FlowModel& model, const Dataset& ds, std::uint64_t seed) {
  NdArray ll;
  eval_pass(model, ds, seed, &ll, nullptr);
  return ll;
}

MetricsReport evaluate_classify(FlowModel& model, const Dataset& ds, std::uint64_t seed) {
  if (!ds.has_labels) throw DataError("classification evaluation needs labels");
  NdArray ll;
  std::vector<double> totals;
  eval_pass(model, ds, seed, &ll, &totals);
  const std::size_t n = ll.extent(0), m = ll.extent(1);
  std::vector<std::size_t> preds(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m; ++c) {
      if (ll.data()[i * m + c] > ll.data()[i * m + best]) best = c;
    }
    preds[i] = best;
  }
  NdArray probs = classify_probs(ll);
  MetricsReport rep = classify_metrics(preds, ds.labels, m >= 2 ? &probs : nullptr);
  double nll = 0.0;
  for (double t : totals) nll -= t;
  rep.nll = nll / double(totals.size());
  return rep;
}

MetricsReport evaluate_detect(FlowModel& model, const Dataset& val, const Dataset& test,
                              std::uint64_t seed) {
  if (!val.has_labels || !test.has_labels) throw DataError("detection evaluation needs labels");
  std::vector<double> val_scores = score_total(model, val, seed);
  std::vector<double> test_scores = score_total(model, test, seed + 1);
  for (double& s : val_scores) s = -s;  // anomaly score = -log p
  double test_nll = 0.0;
  for (double& s : test_scores) {
    test_nll += -s;
    s = -s;
  }
  const double thr = best_f1_threshold(val_scores, val.labels);
  MetricsReport rep = detect_metrics(test_scores, test.labels, thr);
  rep.nll = test_nll / double(test_scores.size());
  return rep;
}

}  // namespace contextflow
