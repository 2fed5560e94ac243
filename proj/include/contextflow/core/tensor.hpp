#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "contextflow/core/ndarray.hpp"

namespace contextflow {

namespace detail {

struct Node {
  NdArray value;
  NdArray grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool grad_ready = false;
  std::string name;  // leaf name or op name, used in diagnostics
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  int visit_mark = 0;

  void accumulate(const NdArray& delta);
};

}  // namespace detail

// Handle to a node of the reverse-mode tape. The tape is rebuilt on every
// step: leaves (parameters, inputs) persist, interior nodes live as long
// as some Tensor references the graph. Value semantics: copying a Tensor
// copies the handle, not the array.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(NdArray value, bool requires_grad = false, std::string name = "");
  static Tensor constant(NdArray value) { return leaf(std::move(value), false); }
  static Tensor constant(double v) { return leaf(NdArray::scalar(v), false); }

  bool defined() const { return node_ != nullptr; }
  const NdArray& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  // Populated by backward() for requires_grad leaves.
  const NdArray& grad() const;
  bool has_grad() const { return node_ && node_->grad_ready; }
  void zero_grad() { node_->grad_ready = false; }

  // Owner-only mutation (optimizer steps, data-dependent init, finite
  // differences). Must not be called while a recorded graph that read the
  // old value is still going to be differentiated.
  NdArray& mutable_value() { return node_->value; }
  void set_value(NdArray v);

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Runs reverse-mode accumulation from a scalar loss. Gradients of all
// requires_grad leaves that the loss depends on become available via
// Tensor::grad(). With retain_graph=false (the default) interior edges are
// released afterwards and the graph cannot be differentiated again.
// Non-scalar roots are an error; a non-finite loss raises NumericalError
// naming the first offending node and its inputs.
void backward(const Tensor& loss, bool retain_graph = false);

// Gradient entries for the given parameters, skipping constants
// (requires_grad == false) and parameters the loss did not touch.
std::vector<std::pair<std::string, NdArray>> grad_map(const std::vector<Tensor>& params);

// ---- differentiable operations -------------------------------------------
// Binary elementwise ops accept equal shapes, or a right operand whose
// shape is a trailing suffix of the left one (leading-dimension batch
// broadcast; the gradient sums over the leading dimensions).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor logaddexp(const Tensor& a, const Tensor& b);  // equal shapes only

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum_all(const Tensor& a);                    // -> scalar
Tensor mean_all(const Tensor& a);                   // -> scalar
Tensor sum_trailing(const Tensor& a, std::size_t k);  // reduce last k axes
Tensor logsumexp_last(const Tensor& a);             // (..., M) -> (...)

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
// out[i] = a[map[i]]; backward scatter-adds. map need not be bijective.
Tensor reindex(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> map, Shape out_shape);
Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& idx);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

// x: (..., I) folded over leading axes, w: (I, J) -> (..., J)
Tensor matmul(const Tensor& x, const Tensor& w);
// W: (C, C) applied at every position: out[n,:,p] = W x[n,:,p]
Tensor channel_matvec(const Tensor& w, const Tensor& x);
// W: (N, C, C) per-sample matrices
Tensor batched_matvec(const Tensor& w, const Tensor& x);
// log|det W|; throws SingularMatrixError on pivot < 1e-12
Tensor logabsdet(const Tensor& w);                  // (C,C) -> scalar
Tensor batched_logabsdet(const Tensor& w);          // (N,C,C) -> (N)

// t: (rest...) -> (n, rest...), all rows equal; backward sums over rows.
Tensor repeat_rows(const Tensor& t, std::size_t n);
// y: (N, K) -> (N, G, K); backward sums over the middle axis.
Tensor repeat_mid(const Tensor& y, std::size_t g);
// scalar -> (n), all entries equal
Tensor broadcast_scalar(const Tensor& s, std::size_t n);

// x: (N, C, pos...), s/t: (C) or (N, C), applied per channel
Tensor mul_channel(const Tensor& x, const Tensor& s);
Tensor add_channel(const Tensor& x, const Tensor& t);

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx);  // (K,E) -> (N,E)
Tensor select_last(const Tensor& x, const std::vector<std::size_t>& idx);      // (N,M) -> (N)

// Diagonal-Gaussian mixture log density with mixture-logit weights:
// out[n] = logsumexp_k [ log softmax(logits)_k + sum_d log N(u[n,d]; means[k,d], exp(logvars[k,d])) ]
Tensor gauss_mixture_logpdf(const Tensor& u, const Tensor& means, const Tensor& logvars,
                            const Tensor& logits);

Tensor stop_grad(const Tensor& a);

// ---- gradient checking -----------------------------------------------------
// f rebuilds the loss graph from the current parameter values. Central
// differences at eps; returns max over all parameter coordinates of
// |analytic - fd| / max(1, |fd|). Non-finite comparisons count as +inf.
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps);

}  // namespace contextflow
