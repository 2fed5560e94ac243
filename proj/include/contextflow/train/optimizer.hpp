#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/param_store.hpp"
#include "contextflow/core/tensor.hpp"

namespace contextflow {

// Adaptive-moment optimizer with decoupled weight decay. Decay applies only
// to network weight matrices (leaf name segment starting with 'w'); biases,
// actnorm scales/offsets, GMM parameters and embeddings are exempt.
class AdamW {
 public:
  AdamW(ParamStore& store, const std::string& prefix, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  // One update at the given rate from the gradients stashed by backward().
  // Parameters without a fresh gradient are skipped; every touched gradient
  // is cleared. Asserts that no slot has been frozen since construction.
  void step(double lr);

  std::size_t slot_count() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor param;
    NdArray m, v;
    bool decay;
  };
  ParamStore* store_;
  std::vector<Slot> slots_;
  double wd_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// True when the final path segment of a parameter name starts with 'w'
// (dense/conv weights w1, w2, w3, w_g).
bool decays(const std::string& name);

}  // namespace contextflow
