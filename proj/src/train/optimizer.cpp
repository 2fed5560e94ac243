#include "contextflow/train/optimizer.hpp"

#include <cmath>

#include "contextflow/core/error.hpp"

namespace contextflow {

bool decays(const std::string& name) {
  const std::size_t slash = name.find_last_of('/');
  const std::size_t start = slash == std::string::npos ? 0 : slash + 1;
  return start < name.size() && name[start] == 'w';
}

AdamW::AdamW(ParamStore& store, const std::string& prefix, double weight_decay, double beta1,
             double beta2, double eps)
    : store_(&store), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Tensor& p : store.trainable(prefix)) {
    Slot slot;
    slot.param = p;
    slot.m = NdArray(p.shape());
    slot.v = NdArray(p.shape());
    slot.decay = decays(p.name());
    slots_.push_back(std::move(slot));
  }
  if (slots_.empty()) {
    throw ConfigError("no trainable parameters under prefix '" + prefix + "'");
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (Slot& slot : slots_) {
    if (!store_->is_trainable(slot.param.name())) {
      throw NumericalError("optimizer touched frozen parameter '" + slot.param.name() + "'");
    }
    if (!slot.param.has_grad()) continue;  // loss did not reach this parameter
    const NdArray& g = slot.param.grad();
    NdArray& theta = slot.param.mutable_value();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double gi = g.data()[i];
      slot.m.data()[i] = beta1_ * slot.m.data()[i] + (1.0 - beta1_) * gi;
      slot.v.data()[i] = beta2_ * slot.v.data()[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = slot.m.data()[i] / bc1;
      const double vhat = slot.v.data()[i] / bc2;
      theta.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      if (slot.decay) theta.data()[i] -= lr * wd_ * theta.data()[i];
    }
    slot.param.zero_grad();
  }
}

}  // namespace contextflow
