#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "contextflow/flow/model.hpp"

namespace contextflow {

struct TrainConfig {
  std::size_t batch_size = 256;
  double lr_init = 1e-3;
  double lr_warm_start = 1e-4;
  std::size_t warmup_epochs = 4;
  double decay_factor = 10.0;
  std::size_t decay_every = 12;
  std::size_t total_epochs = 48;
  double weight_decay = 1e-4;
  double alpha = 1e-3;  // weight of the marginal-likelihood term in the loss
  std::uint64_t seed = 0;
  Phase phase = Phase::kGeneralist;
  std::string log_csv;          // per-epoch metric rows appended here ("" = off)
  std::string checkpoint_path;  // end-of-epoch checkpoint target ("" = off)

  void validate() const;
};

// Linear warm-up from lr_warm_start to lr_init across warmup_epochs (in
// global progress epoch + frac), then plateaus lr_init / decay_factor^
// floor(epoch / decay_every). frac is the position within the epoch [0,1).
double lr_at(std::size_t epoch, double frac, const TrainConfig& cfg);

}  // namespace contextflow
