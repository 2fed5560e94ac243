#include "contextflow/train/schedule.hpp"

#include <cmath>

#include "contextflow/core/error.hpp"

namespace contextflow {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (lr_init <= 0.0 || lr_warm_start <= 0.0) throw ConfigError("learning rates must be positive");
  if (decay_factor <= 0.0) throw ConfigError("decay_factor must be positive");
  if (decay_every == 0) throw ConfigError("decay_every must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
  if (total_epochs > 0 && warmup_epochs >= total_epochs) {
    throw ConfigError("warmup_epochs must be below total_epochs");
  }
}

double lr_at(std::size_t epoch, double frac, const TrainConfig& cfg) {
  if (epoch >= cfg.total_epochs) {
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside 0.." +
                      std::to_string(cfg.total_epochs) + "-1");
  }
  if (frac < 0.0 || frac >= 1.0) throw ConfigError("lr_at: frac must lie in [0, 1)");
  const double progress = double(epoch) + frac;
  if (cfg.warmup_epochs > 0 && progress < double(cfg.warmup_epochs)) {
    return cfg.lr_warm_start +
           (progress / double(cfg.warmup_epochs)) * (cfg.lr_init - cfg.lr_warm_start);
  }
  const double drops = std::floor(double(epoch) / double(cfg.decay_every));
  return cfg.lr_init / std::pow(cfg.decay_factor, drops);
}

}  // namespace contextflow
