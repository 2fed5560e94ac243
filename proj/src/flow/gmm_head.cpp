#include "contextflow/flow/gmm_head.hpp"

#include <cmath>

#include "contextflow/core/error.hpp"

namespace contextflow {

namespace {
constexpr double kLn2 = 0.6931471805599453094;
}

GmmHead::GmmHead(ParamStore& store, const std::string& prefix, std::size_t classes,
                 std::size_t components, std::size_t dim, Rng& rng)
    : store_(&store), gen_prefix_(prefix), m_(classes), k_(components), d_(dim) {
  if (m_ == 0 || k_ == 0 || d_ == 0) {
    throw ConfigError("gmm head needs classes, components and dim all >= 1");
  }
  store.create(prefix + "/means", NdArray::normal({m_, k_, d_}, rng, 1.0));
  store.create(prefix + "/logvars", NdArray::zeros({m_, k_, d_}));
  store.create(prefix + "/logits", NdArray::zeros({m_, k_}));
}

void GmmHead::attach_specialist(ParamStore& store, const std::string& prefix) {
  if (has_specialist()) throw ConfigError("gmm head already has a specialist");
  store.create(prefix + "/means", store.get(gen_prefix_ + "/means").value());
  store.create(prefix + "/logvars", store.get(gen_prefix_ + "/logvars").value());
  store.create(prefix + "/logits", store.get(gen_prefix_ + "/logits").value());
  spec_prefix_ = prefix;
}

Tensor GmmHead::mixture_loglik(const std::string& prefix, const Tensor& u,
                               std::size_t cls) const {
  std::vector<std::size_t> pick{cls};
  Tensor means = reshape(index_select(store_->get(prefix + "/means"), 0, pick), {k_, d_});
  Tensor logvars = reshape(index_select(store_->get(prefix + "/logvars"), 0, pick), {k_, d_});
  Tensor logits = reshape(index_select(store_->get(prefix + "/logits"), 0, pick), {k_});
  return gauss_mixture_logpdf(u, means, logvars, logits);
}

Tensor GmmHead::class_loglik(const Tensor& u) const {
  if (u.shape().size() != 2 || u.shape()[1] != d_) {
    throw ConfigError("gmm head expects latents (N, " + std::to_string(d_) + "), got " +
                      shape_str(u.shape()));
  }
  const std::size_t n = u.shape()[0];
  Tensor out;
  for (std::size_t m = 0; m < m_; ++m) {
    Tensor col = mixture_loglik(gen_prefix_, u, m);
    if (has_specialist()) {
      col = add_scalar(logaddexp(col, mixture_loglik(spec_prefix_, u, m)), -kLn2);
    }
    col = reshape(col, {n, 1});
    out = m == 0 ? col : concat(out, col, 1);
  }
  return out;
}

Tensor GmmHead::total_loglik(const Tensor& class_ll) const {
  return add_scalar(logsumexp_last(class_ll), -std::log(double(m_)));
}

NdArray GmmHead::sample(std::size_t n, int class_idx, Rng& rng,
                        std::vector<std::size_t>* classes_out) const {
  if (class_idx >= 0 && std::size_t(class_idx) >= m_) {
    throw ConfigError("class index " + std::to_string(class_idx) + " out of range (classes=" +
                      std::to_string(m_) + ")");
  }
  NdArray out({n, d_});
  if (classes_out) classes_out->assign(n, 0);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t cls =
        class_idx >= 0 ? std::size_t(class_idx) : rng.uniform_int(m_);
    if (classes_out) (*classes_out)[s] = cls;
    // specialist rule: even coin between the two halves of the mixture
    const std::string& prefix = (has_specialist() && rng.uniform() < 0.5) ? spec_prefix_
                                                                          : gen_prefix_;
    const NdArray& logits = store_->get(prefix + "/logits").value();
    double lse = -1e300;
    for (std::size_t k = 0; k < k_; ++k) {
      const double l = logits.data()[cls * k_ + k];
      lse = lse > l ? lse + std::log1p(std::exp(l - lse)) : l + std::log1p(std::exp(lse - l));
    }
    double r = rng.uniform(), acc = 0.0;
    std::size_t comp = k_ - 1;
    for (std::size_t k = 0; k < k_; ++k) {
      acc += std::exp(logits.data()[cls * k_ + k] - lse);
      if (r < acc) {
        comp = k;
        break;
      }
    }
    const NdArray& means = store_->get(prefix + "/means").value();
    const NdArray& logvars = store_->get(prefix + "/logvars").value();
    for (std::size_t j = 0; j < d_; ++j) {
      const std::size_t off = (cls * k_ + comp) * d_ + j;
      out.data()[s * d_ + j] =
          means.data()[off] + std::exp(0.5 * logvars.data()[off]) * rng.normal();
    }
  }
  return out;
}

Tensor gmm_loss(const Tensor& class_ll, const std::vector<std::size_t>& labels, double alpha) {
  const Shape& sh = class_ll.shape();
  if (sh.size() != 2) throw ConfigError("gmm_loss expects (N, M) log-likelihoods");
  Tensor lse = logsumexp_last(class_ll);
  if (labels.empty() || sh[1] == 1) {
    return neg(mean_all(lse));
  }
  if (labels.size() != sh[0]) {
    throw ConfigError("gmm_loss: label count " + std::to_string(labels.size()) +
                      " does not match batch " + std::to_string(sh[0]));
  }
  for (std::size_t s = 0; s < labels.size(); ++s) {
    if (labels[s] >= sh[1]) {
      throw DataError("label " + std::to_string(labels[s]) + " out of range (classes=" +
                      std::to_string(sh[1]) + ")");
    }
  }
  Tensor sel = select_last(class_ll, labels);
  return mean_all(add(neg(sel), mul_scalar(lse, 1.0 - alpha)));
}

NdArray classify_probs(const NdArray& class_ll) {
  if (class_ll.rank() != 2) throw ConfigError("classify_probs expects (N, M)");
  const std::size_t n = class_ll.extent(0), m = class_ll.extent(1);
  NdArray out({n, m});
  for (std::size_t s = 0; s < n; ++s) {
    double mx = class_ll.data()[s * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, class_ll.data()[s * m + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out.data()[s * m + j] = std::exp(class_ll.data()[s * m + j] - mx);
      z += out.data()[s * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out.data()[s * m + j] /= z;
  }
  return out;
}

}  // namespace contextflow
