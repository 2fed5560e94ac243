#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/param_store.hpp"
#include "contextflow/core/rng.hpp"
#include "contextflow/core/tensor.hpp"

namespace contextflow {

// Gaussian-mixture latent head: one mixture of `components` diagonal
// Gaussians per class. After attach_specialist() the per-class density is
// the even two-way mixture of the frozen generalist head and a trainable
// copy, scored via logaddexp - log 2.
class GmmHead {
 public:
  GmmHead(ParamStore& store, const std::string& prefix, std::size_t classes,
          std::size_t components, std::size_t dim, Rng& rng);

  // Copies the current parameters under `prefix` (the trainable specialist
  // half of the mixture).
  void attach_specialist(ParamStore& store, const std::string& prefix);
  bool has_specialist() const { return !spec_prefix_.empty(); }

  std::size_t classes() const { return m_; }
  std::size_t components() const { return k_; }
  std::size_t dim() const { return d_; }

  Tensor class_loglik(const Tensor& u) const;         // (N, D) -> (N, M)
  Tensor total_loglik(const Tensor& class_ll) const;  // lse over classes - log M

  // One latent draw per row; class_idx < 0 draws the class uniformly.
  // classes_out (optional) records the class of each row.
  NdArray sample(std::size_t n, int class_idx, Rng& rng,
                 std::vector<std::size_t>* classes_out) const;

 private:
  Tensor mixture_loglik(const std::string& prefix, const Tensor& u, std::size_t cls) const;

  ParamStore* store_;
  std::string gen_prefix_;
  std::string spec_prefix_;
  std::size_t m_, k_, d_;
};

// Per-batch head loss. With labels (size N) and more than one class:
// mean of -(class_ll[y] - lse) - alpha * lse. Unlabeled (empty labels) or
// single-class heads reduce to -mean lse, the plain flow objective.
Tensor gmm_loss(const Tensor& class_ll, const std::vector<std::size_t>& labels, double alpha);

// Row-wise softmax of the class log-likelihoods, value-level.
NdArray classify_probs(const NdArray& class_ll);

}  // namespace contextflow
