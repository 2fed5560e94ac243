#include "contextflow/core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "contextflow/core/error.hpp"
#include "contextflow/core/linalg.hpp"

namespace contextflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  }
  return true;
}

void check_binary_shapes(const char* op, const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ConfigError(std::string(op) + ": rhs shape " + shape_str(b.shape()) +
                      " is not a trailing suffix of lhs shape " + shape_str(a.shape()));
  }
}

using NodePtr = std::shared_ptr<detail::Node>;

Tensor make_op(std::string op, NdArray value, std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->is_leaf = false;
  node->name = std::move(op);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  node->requires_grad = needs;
  if (needs) {
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Topological order (parents before children) by iterative post-order DFS.
std::vector<detail::Node*> topo_order(detail::Node* root) {
  std::vector<detail::Node*> order;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  root->visit_mark = 1;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].get();
      if (p->visit_mark == 0) {
        p->visit_mark = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order) n->visit_mark = 0;
  return order;
}

[[noreturn]] void report_nonfinite(const std::vector<detail::Node*>& order) {
  // First node (in dependency order) whose value went non-finite while all
  // of its inputs were still finite: that is where the blow-up happened.
  for (auto* n : order) {
    if (n->value.all_finite()) continue;
    bool parents_ok = true;
    for (const auto& p : n->parents) parents_ok = parents_ok && p->value.all_finite();
    if (!parents_ok) continue;
    std::ostringstream msg;
    msg << "non-finite loss: first bad node is '" << n->name << "' " << shape_str(n->value.shape());
    if (!n->parents.empty()) {
      msg << " with inputs [";
      for (std::size_t i = 0; i < n->parents.size(); ++i) {
        if (i) msg << ", ";
        msg << (n->parents[i]->name.empty() ? "?" : n->parents[i]->name);
      }
      msg << "]";
    }
    throw NumericalError(msg.str());
  }
  throw NumericalError("non-finite loss but every recorded node is finite (non-grad path?)");
}

}  // namespace

namespace detail {

void Node::accumulate(const NdArray& delta) {
  if (!grad_ready) {
    if (!grad.same_shape(value)) grad = NdArray::zeros(value.shape());
    std::fill(grad.vec().begin(), grad.vec().end(), 0.0);
    grad_ready = true;
  }
  double* g = grad.data();
  const double* d = delta.data();
  for (std::size_t i = 0; i < grad.numel(); ++i) g[i] += d[i];
}

}  // namespace detail

Tensor Tensor::leaf(NdArray value, bool requires_grad, std::string name) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  node->name = std::move(name);
  return Tensor(std::move(node));
}

const NdArray& Tensor::grad() const {
  if (!node_->grad_ready) {
    throw NumericalError("grad() on '" + node_->name + "' before backward populated it");
  }
  return node_->grad;
}

void Tensor::set_value(NdArray v) {
  node_->value = std::move(v);
  node_->grad_ready = false;
}

void backward(const Tensor& loss, bool retain_graph) {
  if (!loss.defined()) throw ConfigError("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw ConfigError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto order = topo_order(loss.node().get());
  if (!std::isfinite(loss.value().data()[0])) report_nonfinite(order);

  loss.node()->accumulate(NdArray::full(loss.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->grad_ready && n->backward_fn) n->backward_fn(*n);
  }
  if (!retain_graph) {
    for (auto* n : order) {
      if (!n->is_leaf) {
        n->backward_fn = nullptr;
        n->parents.clear();
      }
    }
  }
}

std::vector<std::pair<std::string, NdArray>> grad_map(const std::vector<Tensor>& params) {
  std::vector<std::pair<std::string, NdArray>> out;
  for (const auto& p : params) {
    if (p.requires_grad() && p.has_grad()) out.emplace_back(p.name(), p.grad());
  }
  return out;
}

// ---- elementwise binary ----------------------------------------------------

namespace {

// Shared skeleton for binary elementwise ops with suffix broadcast on rhs.
// fwd(a, b) -> out; bwd fills per-element da and db contributions.
template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da_fn, DB db_fn) {
  check_binary_shapes(name, a, b);
  const std::size_t bn = b.numel() == 0 ? 1 : b.numel();
  NdArray out = NdArray::zeros(a.shape());
  const double* ap = a.value().data();
  const double* bp = b.value().data();
  double* op = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) op[i] = fwd(ap[i], bp[i % bn]);
  return make_op(name, std::move(out), {a, b},
                 [an = a.node(), bn_node = b.node(), da_fn, db_fn](detail::Node& self) {
                   const double* g = self.grad.data();
                   const double* av = an->value.data();
                   const double* bv = bn_node->value.data();
                   const std::size_t n = self.value.numel();
                   const std::size_t bsz = bn_node->value.numel() == 0 ? 1 : bn_node->value.numel();
                   if (an->requires_grad) {
                     NdArray da = NdArray::zeros(an->value.shape());
                     double* d = da.data();
                     for (std::size_t i = 0; i < n; ++i) d[i] = da_fn(g[i], av[i], bv[i % bsz]);
                     an->accumulate(da);
                   }
                   if (bn_node->requires_grad) {
                     NdArray db = NdArray::zeros(bn_node->value.shape());
                     double* d = db.data();
                     for (std::size_t i = 0; i < n; ++i) d[i % bsz] += db_fn(g[i], av[i], bv[i % bsz]);
                     bn_node->accumulate(db);
                   }
                 });
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  NdArray out = NdArray::zeros(a.shape());
  const double* ap = a.value().data();
  double* op = out.data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) op[i] = fwd(ap[i]);
  return make_op(name, std::move(out), {a}, [an = a.node(), bwd](detail::Node& self) {
    if (!an->requires_grad) return;
    const double* g = self.grad.data();
    const double* av = an->value.data();
    const double* ov = self.value.data();
    NdArray da = NdArray::zeros(an->value.shape());
    double* d = da.data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) d[i] = bwd(g[i], av[i], ov[i]);
    an->accumulate(da);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  if (!a.value().same_shape(b.value())) {
    throw ConfigError("logaddexp: shapes differ: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  return binary_op(
      "logaddexp", a, b,
      [](double x, double y) {
        const double m = std::max(x, y);
        if (!std::isfinite(m)) return m;  // both -inf (or a nan) propagate
        return m + std::log(std::exp(x - m) + std::exp(y - m));
      },
      [](double g, double x, double y) {
        const double m = std::max(x, y);
        const double den = std::exp(x - m) + std::exp(y - m);
        return g * std::exp(x - m) / den;
      },
      [](double g, double x, double y) {
        const double m = std::max(x, y);
        const double den = std::exp(x - m) + std::exp(y - m);
        return g * std::exp(y - m) / den;
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double g, double, double) { return g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](double g, double, double) { return g * c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double o) { return g * o; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double g, double, double o) { return g * (1.0 - o * o); });
}

namespace {
double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, sigmoid_scalar, [](double g, double, double o) { return g * o * (1.0 - o); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      "softplus", a,
      [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double g, double x, double) { return g * sigmoid_scalar(x); });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double g, double x, double) { return 2.0 * g * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo > hi");
  return unary_op(
      "clamp", a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double g, double x, double) { return (x >= lo && x <= hi) ? g : 0.0; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  const double* ap = a.value().data();
  for (std::size_t i = 0; i < a.numel(); ++i) s += ap[i];
  return make_op("sum_all", NdArray::scalar(s), {a}, [an = a.node()](detail::Node& self) {
    if (!an->requires_grad) return;
    an->accumulate(NdArray::full(an->value.shape(), self.grad.data()[0]));
  });
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ConfigError("mean_all: empty tensor");
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_trailing(const Tensor& a, std::size_t k) {
  const Shape& sh = a.shape();
  if (k > sh.size()) throw ConfigError("sum_trailing: k exceeds rank");
  Shape out_shape(sh.begin(), sh.end() - static_cast<std::ptrdiff_t>(k));
  const std::size_t trail = a.numel() / std::max<std::size_t>(1, shape_numel(out_shape));
  const std::size_t lead = shape_numel(out_shape);
  NdArray out = NdArray::zeros(out_shape);
  const double* ap = a.value().data();
  double* op = out.data();
  for (std::size_t r = 0; r < lead; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < trail; ++t) s += ap[r * trail + t];
    op[r] = s;
  }
  return make_op("sum_trailing", std::move(out), {a},
                 [an = a.node(), lead, trail](detail::Node& self) {
                   if (!an->requires_grad) return;
                   NdArray da = NdArray::zeros(an->value.shape());
                   const double* g = self.grad.data();
                   double* d = da.data();
                   for (std::size_t r = 0; r < lead; ++r) {
                     for (std::size_t t = 0; t < trail; ++t) d[r * trail + t] = g[r];
                   }
                   an->accumulate(da);
                 });
}

Tensor logsumexp_last(const Tensor& a) {
  const Shape& sh = a.shape();
  if (sh.empty()) throw ConfigError("logsumexp_last: rank-0 input");
  const std::size_t m = sh.back();
  if (m == 0) throw ConfigError("logsumexp_last: empty last axis");
  Shape out_shape(sh.begin(), sh.end() - 1);
  const std::size_t rows = shape_numel(out_shape);
  NdArray out = NdArray::zeros(out_shape);
  const double* ap = a.value().data();
  double* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = ap + r * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) {
      op[r] = mx;  // all -inf -> -inf; nan propagates
      continue;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    op[r] = mx + std::log(s);
  }
  return make_op("logsumexp_last", std::move(out), {a},
                 [an = a.node(), rows, m](detail::Node& self) {
                   if (!an->requires_grad) return;
                   NdArray da = NdArray::zeros(an->value.shape());
                   const double* g = self.grad.data();
                   const double* av = an->value.data();
                   const double* ov = self.value.data();
                   double* d = da.data();
                   for (std::size_t r = 0; r < rows; ++r) {
                     for (std::size_t j = 0; j < m; ++j) {
                       d[r * m + j] = g[r] * std::exp(av[r * m + j] - ov[r]);
                     }
                   }
                   an->accumulate(da);
                 });
}

// ---- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: numel mismatch: " + shape_str(a.shape()) + " -> " +
                      shape_str(shape));
  }
  NdArray out(shape, a.value().vec());
  return make_op("reshape", std::move(out), {a}, [an = a.node()](detail::Node& self) {
    if (!an->requires_grad) return;
    an->accumulate(NdArray(an->value.shape(), self.grad.vec()));
  });
}

Tensor reindex(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> map,
               Shape out_shape) {
  if (!map || map->size() != shape_numel(out_shape)) {
    throw ConfigError("reindex: map size does not match output shape");
  }
  NdArray out = NdArray::zeros(out_shape);
  const double* ap = a.value().data();
  double* op = out.data();
  const std::size_t an_ = a.numel();
  for (std::size_t i = 0; i < map->size(); ++i) {
    const std::size_t src = (*map)[i];
    if (src >= an_) throw ConfigError("reindex: map entry out of range");
    op[i] = ap[src];
  }
  return make_op("reindex", std::move(out), {a}, [an = a.node(), map](detail::Node& self) {
    if (!an->requires_grad) return;
    NdArray da = NdArray::zeros(an->value.shape());
    const double* g = self.grad.data();
    double* d = da.data();
    for (std::size_t i = 0; i < map->size(); ++i) d[(*map)[i]] += g[i];
    an->accumulate(da);
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const Shape& sh = a.shape();
  if (order.size() != sh.size()) throw ConfigError("permute: order rank mismatch");
  std::vector<bool> seen(order.size(), false);
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= sh.size() || seen[order[i]]) throw ConfigError("permute: invalid order");
    seen[order[i]] = true;
    out_shape[i] = sh[order[i]];
  }
  // strides of the input
  std::vector<std::size_t> in_strides(sh.size(), 1);
  for (std::size_t i = sh.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * sh[i];
  auto map = std::make_shared<std::vector<std::size_t>>(a.numel());
  std::vector<std::size_t> idx(out_shape.size(), 0);
  for (std::size_t flat = 0; flat < map->size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) src += idx[d] * in_strides[order[d]];
    (*map)[flat] = src;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return reindex(a, map, out_shape);
}

Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& idx) {
  const Shape& sh = a.shape();
  if (axis >= sh.size()) throw ConfigError("index_select: axis out of range");
  for (std::size_t j : idx) {
    if (j >= sh[axis]) throw ConfigError("index_select: index out of range");
  }
  Shape out_shape = sh;
  out_shape[axis] = idx.size();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  auto map = std::make_shared<std::vector<std::size_t>>(shape_numel(out_shape));
  std::size_t w = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j : idx) {
      const std::size_t base = (o * sh[axis] + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) (*map)[w++] = base + i;
    }
  }
  return reindex(a, map, out_shape);
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size()) {
    throw ConfigError("concat: rank mismatch or bad axis");
  }
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (i != axis && sa[i] != sb[i]) {
      throw ConfigError("concat: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                        " differ off-axis");
    }
  }
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t ablk = sa[axis] * inner, bblk = sb[axis] * inner;
  NdArray out = NdArray::zeros(out_shape);
  const double* ap = a.value().data();
  const double* bp = b.value().data();
  double* op = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(ap + o * ablk, ap + (o + 1) * ablk, op + o * (ablk + bblk));
    std::copy(bp + o * bblk, bp + (o + 1) * bblk, op + o * (ablk + bblk) + ablk);
  }
  return make_op("concat", std::move(out), {a, b},
                 [an = a.node(), bn = b.node(), outer, ablk, bblk](detail::Node& self) {
                   const double* g = self.grad.data();
                   if (an->requires_grad) {
                     NdArray da = NdArray::zeros(an->value.shape());
                     double* d = da.data();
                     for (std::size_t o = 0; o < outer; ++o) {
                       const double* src = g + o * (ablk + bblk);
                       std::copy(src, src + ablk, d + o * ablk);
                     }
                     an->accumulate(da);
                   }
                   if (bn->requires_grad) {
                     NdArray db = NdArray::zeros(bn->value.shape());
                     double* d = db.data();
                     for (std::size_t o = 0; o < outer; ++o) {
                       const double* src = g + o * (ablk + bblk) + ablk;
                       std::copy(src, src + bblk, d + o * bblk);
                     }
                     bn->accumulate(db);
                   }
                 });
}

// ---- linear ops -------------------------------------------------------------

Tensor matmul(const Tensor& x, const Tensor& w) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.empty() || sw.size() != 2 || sx.back() != sw[0]) {
    throw ConfigError("matmul: incompatible shapes " + shape_str(sx) + " x " + shape_str(sw));
  }
  const std::size_t in = sw[0], out_dim = sw[1];
  const std::size_t rows = x.numel() / in;
  Shape out_shape(sx.begin(), sx.end() - 1);
  out_shape.push_back(out_dim);
  NdArray out = NdArray::zeros(out_shape);
  const double* xp = x.value().data();
  const double* wp = w.value().data();
  double* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xp[r * in + i];
      if (xv == 0.0) continue;
      const double* wrow = wp + i * out_dim;
      double* orow = op + r * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) orow[j] += xv * wrow[j];
    }
  }
  return make_op("matmul", std::move(out), {x, w},
                 [xn = x.node(), wn = w.node(), rows, in, out_dim](detail::Node& self) {
                   const double* g = self.grad.data();
                   const double* xv = xn->value.data();
                   const double* wv = wn->value.data();
                   if (xn->requires_grad) {
                     NdArray dx = NdArray::zeros(xn->value.shape());
                     double* d = dx.data();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t i = 0; i < in; ++i) {
                         double s = 0.0;
                         const double* grow = g + r * out_dim;
                         const double* wrow = wv + i * out_dim;
                         for (std::size_t j = 0; j < out_dim; ++j) s += grow[j] * wrow[j];
                         d[r * in + i] = s;
                       }
                     }
                     xn->accumulate(dx);
                   }
                   if (wn->requires_grad) {
                     NdArray dw = NdArray::zeros(wn->value.shape());
                     double* d = dw.data();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* grow = g + r * out_dim;
                       for (std::size_t i = 0; i < in; ++i) {
                         const double xri = xv[r * in + i];
                         if (xri == 0.0) continue;
                         double* drow = d + i * out_dim;
                         for (std::size_t j = 0; j < out_dim; ++j) drow[j] += xri * grow[j];
                       }
                     }
                     wn->accumulate(dw);
                   }
                 });
}

Tensor channel_matvec(const Tensor& w, const Tensor& x) {
  const Shape& sw = w.shape();
  const Shape& sx = x.shape();
  if (sw.size() != 2 || sw[0] != sw[1] || sx.size() < 2 || sx[1] != sw[0]) {
    throw ConfigError("channel_matvec: want W (C,C), x (N,C,pos...), got " + shape_str(sw) +
                      ", " + shape_str(sx));
  }
  const std::size_t n = sx[0], c = sw[0];
  const std::size_t p = x.numel() / (n * c);
  NdArray out = NdArray::zeros(sx);
  const double* wp = w.value().data();
  const double* xp = x.value().data();
  double* op = out.data();
  for (std::size_t s = 0; s < n; ++s) {
    const double* xs = xp + s * c * p;
    double* os = op + s * c * p;
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double wij = wp[i * c + j];
        if (wij == 0.0) continue;
        const double* xr = xs + j * p;
        double* orow = os + i * p;
        for (std::size_t q = 0; q < p; ++q) orow[q] += wij * xr[q];
      }
    }
  }
  return make_op("channel_matvec", std::move(out), {w, x},
                 [wn = w.node(), xn = x.node(), n, c, p](detail::Node& self) {
                   const double* g = self.grad.data();
                   const double* wv = wn->value.data();
                   const double* xv = xn->value.data();
                   if (wn->requires_grad) {
                     NdArray dw = NdArray::zeros(wn->value.shape());
                     double* d = dw.data();
                     for (std::size_t s = 0; s < n; ++s) {
                       for (std::size_t i = 0; i < c; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           double acc = 0.0;
                           const double* grow = g + (s * c + i) * p;
                           const double* xr = xv + (s * c + j) * p;
                           for (std::size_t q = 0; q < p; ++q) acc += grow[q] * xr[q];
                           d[i * c + j] += acc;
                         }
                       }
                     }
                     wn->accumulate(dw);
                   }
                   if (xn->requires_grad) {
                     NdArray dx = NdArray::zeros(xn->value.shape());
                     double* d = dx.data();
                     for (std::size_t s = 0; s < n; ++s) {
                       for (std::size_t j = 0; j < c; ++j) {
                         for (std::size_t i = 0; i < c; ++i) {
                           const double wij = wv[i * c + j];
                           if (wij == 0.0) continue;
                           const double* grow = g + (s * c + i) * p;
                           double* drow = d + (s * c + j) * p;
                           for (std::size_t q = 0; q < p; ++q) drow[q] += wij * grow[q];
                         }
                       }
                     }
                     xn->accumulate(dx);
                   }
                 });
}

Tensor batched_matvec(const Tensor& w, const Tensor& x) {
  const Shape& sw = w.shape();
  const Shape& sx = x.shape();
  if (sw.size() != 3 || sw[1] != sw[2] || sx.size() < 2 || sx[0] != sw[0] || sx[1] != sw[1]) {
    throw ConfigError("batched_matvec: want W (N,C,C), x (N,C,pos...), got " + shape_str(sw) +
                      ", " + shape_str(sx));
  }
  const std::size_t n = sx[0], c = sw[1];
  const std::size_t p = x.numel() / (n * c);
  NdArray out = NdArray::zeros(sx);
  const double* wp = w.value().data();
  const double* xp = x.value().data();
  double* op = out.data();
  for (std::size_t s = 0; s < n; ++s) {
    const double* ws = wp + s * c * c;
    const double* xs = xp + s * c * p;
    double* os = op + s * c * p;
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double wij = ws[i * c + j];
        if (wij == 0.0) continue;
        for (std::size_t q = 0; q < p; ++q) os[i * p + q] += wij * xs[j * p + q];
      }
    }
  }
  return make_op("batched_matvec", std::move(out), {w, x},
                 [wn = w.node(), xn = x.node(), n, c, p](detail::Node& self) {
                   const double* g = self.grad.data();
                   const double* wv = wn->value.data();
                   const double* xv = xn->value.data();
                   if (wn->requires_grad) {
                     NdArray dw = NdArray::zeros(wn->value.shape());
                     double* d = dw.data();
                     for (std::size_t s = 0; s < n; ++s) {
                       for (std::size_t i = 0; i < c; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           double acc = 0.0;
                           for (std::size_t q = 0; q < p; ++q) {
                             acc += g[(s * c + i) * p + q] * xv[(s * c + j) * p + q];
                           }
                           d[(s * c + i) * c + j] = acc;
                         }
                       }
                     }
                     wn->accumulate(dw);
                   }
                   if (xn->requires_grad) {
                     NdArray dx = NdArray::zeros(xn->value.shape());
                     double* d = dx.data();
                     for (std::size_t s = 0; s < n; ++s) {
                       for (std::size_t j = 0; j < c; ++j) {
                         for (std::size_t i = 0; i < c; ++i) {
                           const double wij = wv[(s * c + i) * c + j];
                           if (wij == 0.0) continue;
                           for (std::size_t q = 0; q < p; ++q) {
                             d[(s * c + j) * p + q] += wij * g[(s * c + i) * p + q];
                           }
                         }
                       }
                     }
                     xn->accumulate(dx);
                   }
                 });
}

Tensor logabsdet(const Tensor& w) {
  const Shape& sw = w.shape();
  if (sw.size() != 2 || sw[0] != sw[1]) {
    throw ConfigError("logabsdet: want square matrix, got " + shape_str(sw));
  }
  SignLogDet sld = lu_logabsdet(w.value());  // throws SingularMatrixError
  // The inverse is computed eagerly so the backward pass cannot hit a
  // pivot failure after the step already started.
  NdArray winv = lu_inverse(w.value());
  const std::size_t c = sw[0];
  return make_op("logabsdet", NdArray::scalar(sld.logabsdet), {w},
                 [wn = w.node(), winv, c](detail::Node& self) {
                   if (!wn->requires_grad) return;
                   const double g = self.grad.data()[0];
                   NdArray dw = NdArray::zeros(wn->value.shape());
                   double* d = dw.data();
                   const double* iv = winv.data();
                   // d log|det W| / dW = (W^{-1})^T
                   for (std::size_t i = 0; i < c; ++i) {
                     for (std::size_t j = 0; j < c; ++j) d[i * c + j] = g * iv[j * c + i];
                   }
                   wn->accumulate(dw);
                 });
}

Tensor batched_logabsdet(const Tensor& w) {
  const Shape& sw = w.shape();
  if (sw.size() != 3 || sw[1] != sw[2]) {
    throw ConfigError("batched_logabsdet: want (N,C,C), got " + shape_str(sw));
  }
  const std::size_t n = sw[0], c = sw[1];
  NdArray out = NdArray::zeros({n});
  NdArray invs = NdArray::zeros(sw);
  const double* wp = w.value().data();
  for (std::size_t s = 0; s < n; ++s) {
    NdArray ws({c, c}, std::vector<double>(wp + s * c * c, wp + (s + 1) * c * c));
    out.data()[s] = lu_logabsdet(ws).logabsdet;
    NdArray wi = lu_inverse(ws);
    std::copy(wi.data(), wi.data() + c * c, invs.data() + s * c * c);
  }
  return make_op("batched_logabsdet", std::move(out), {w},
                 [wn = w.node(), invs, n, c](detail::Node& self) {
                   if (!wn->requires_grad) return;
                   const double* g = self.grad.data();
                   NdArray dw = NdArray::zeros(wn->value.shape());
                   double* d = dw.data();
                   const double* iv = invs.data();
                   for (std::size_t s = 0; s < n; ++s) {
                     for (std::size_t i = 0; i < c; ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         d[(s * c + i) * c + j] = g[s] * iv[(s * c + j) * c + i];
                       }
                     }
                   }
                   wn->accumulate(dw);
                 });
}

// ---- broadcast helpers ------------------------------------------------------

Tensor repeat_rows(const Tensor& t, std::size_t n) {
  Shape out_shape;
  out_shape.push_back(n);
  for (std::size_t d : t.shape()) out_shape.push_back(d);
  const std::size_t block = t.numel();
  NdArray out = NdArray::zeros(out_shape);
  const double* tp = t.value().data();
  for (std::size_t r = 0; r < n; ++r) std::copy(tp, tp + block, out.data() + r * block);
  return make_op("repeat_rows", std::move(out), {t}, [tn = t.node(), n, block](detail::Node& self) {
    if (!tn->requires_grad) return;
    NdArray dt = NdArray::zeros(tn->value.shape());
    const double* g = self.grad.data();
    double* d = dt.data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t i = 0; i < block; ++i) d[i] += g[r * block + i];
    }
    tn->accumulate(dt);
  });
}

Tensor repeat_mid(const Tensor& y, std::size_t g_count) {
  const Shape& sy = y.shape();
  if (sy.size() != 2) throw ConfigError("repeat_mid: want (N,K), got " + shape_str(sy));
  const std::size_t n = sy[0], k = sy[1];
  NdArray out = NdArray::zeros({n, g_count, k});
  const double* yp = y.value().data();
  double* op = out.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < g_count; ++g) {
      std::copy(yp + s * k, yp + (s + 1) * k, op + (s * g_count + g) * k);
    }
  }
  return make_op("repeat_mid", std::move(out), {y},
                 [yn = y.node(), n, g_count, k](detail::Node& self) {
                   if (!yn->requires_grad) return;
                   NdArray dy = NdArray::zeros(yn->value.shape());
                   const double* g = self.grad.data();
                   double* d = dy.data();
                   for (std::size_t s = 0; s < n; ++s) {
                     for (std::size_t q = 0; q < g_count; ++q) {
                       for (std::size_t i = 0; i < k; ++i) {
                         d[s * k + i] += g[(s * g_count + q) * k + i];
                       }
                     }
                   }
                   yn->accumulate(dy);
                 });
}

Tensor broadcast_scalar(const Tensor& s, std::size_t n) {
  if (s.numel() != 1) throw ConfigError("broadcast_scalar: want scalar input");
  NdArray out = NdArray::full({n}, s.value().data()[0]);
  return make_op("broadcast_scalar", std::move(out), {s}, [sn = s.node(), n](detail::Node& self) {
    if (!sn->requires_grad) return;
    double acc = 0.0;
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) acc += g[i];
    NdArray ds = NdArray::full(sn->value.shape(), acc);
    sn->accumulate(ds);
  });
}

namespace {

// Shared forward/backward skeleton for per-channel affine parameters of
// shape (C) or (N,C) applied to x (N,C,pos...).
void channel_shapes(const char* op, const Tensor& x, const Tensor& s, std::size_t& n,
                    std::size_t& c, std::size_t& p, bool& per_sample) {
  const Shape& sx = x.shape();
  if (sx.size() < 2) throw ConfigError(std::string(op) + ": x must be (N,C,pos...)");
  n = sx[0];
  c = sx[1];
  p = x.numel() / (n * c);
  const Shape& ss = s.shape();
  if (ss.size() == 1 && ss[0] == c) {
    per_sample = false;
  } else if (ss.size() == 2 && ss[0] == n && ss[1] == c) {
    per_sample = true;
  } else {
    throw ConfigError(std::string(op) + ": params must be (C) or (N,C), got " + shape_str(ss) +
                      " for x " + shape_str(sx));
  }
}

}  // namespace

Tensor mul_channel(const Tensor& x, const Tensor& s) {
  std::size_t n, c, p;
  bool per_sample;
  channel_shapes("mul_channel", x, s, n, c, p, per_sample);
  NdArray out = NdArray::zeros(x.shape());
  const double* xp = x.value().data();
  const double* sp = s.value().data();
  double* op = out.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    const double sv = per_sample ? sp[i] : sp[i % c];
    for (std::size_t q = 0; q < p; ++q) op[i * p + q] = xp[i * p + q] * sv;
  }
  return make_op("mul_channel", std::move(out), {x, s},
                 [xn = x.node(), sn = s.node(), n, c, p, per_sample](detail::Node& self) {
                   const double* g = self.grad.data();
                   const double* xv = xn->value.data();
                   const double* sv = sn->value.data();
                   if (xn->requires_grad) {
                     NdArray dx = NdArray::zeros(xn->value.shape());
                     double* d = dx.data();
                     for (std::size_t i = 0; i < n * c; ++i) {
                       const double s_i = per_sample ? sv[i] : sv[i % c];
                       for (std::size_t q = 0; q < p; ++q) d[i * p + q] = g[i * p + q] * s_i;
                     }
                     xn->accumulate(dx);
                   }
                   if (sn->requires_grad) {
                     NdArray ds = NdArray::zeros(sn->value.shape());
                     double* d = ds.data();
                     for (std::size_t i = 0; i < n * c; ++i) {
                       double acc = 0.0;
                       for (std::size_t q = 0; q < p; ++q) acc += g[i * p + q] * xv[i * p + q];
                       d[per_sample ? i : (i % c)] += acc;
                     }
                     sn->accumulate(ds);
                   }
                 });
}

Tensor add_channel(const Tensor& x, const Tensor& t) {
  std::size_t n, c, p;
  bool per_sample;
  channel_shapes("add_channel", x, t, n, c, p, per_sample);
  NdArray out = NdArray::zeros(x.shape());
  const double* xp = x.value().data();
  const double* tp = t.value().data();
  double* op = out.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    const double tv = per_sample ? tp[i] : tp[i % c];
    for (std::size_t q = 0; q < p; ++q) op[i * p + q] = xp[i * p + q] + tv;
  }
  return make_op("add_channel", std::move(out), {x, t},
                 [xn = x.node(), tn = t.node(), n, c, p, per_sample](detail::Node& self) {
                   const double* g = self.grad.data();
                   if (xn->requires_grad) xn->accumulate(self.grad);
                   if (tn->requires_grad) {
                     NdArray dt = NdArray::zeros(tn->value.shape());
                     double* d = dt.data();
                     for (std::size_t i = 0; i < n * c; ++i) {
                       double acc = 0.0;
                       for (std::size_t q = 0; q < p; ++q) acc += g[i * p + q];
                       d[per_sample ? i : (i % c)] += acc;
                     }
                     tn->accumulate(dt);
                   }
                 });
}

// ---- gather / select --------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  const Shape& st = table.shape();
  if (st.size() != 2) throw ConfigError("gather_rows: want (K,E) table, got " + shape_str(st));
  const std::size_t k = st[0], e = st[1];
  for (std::size_t i : idx) {
    if (i >= k) throw ConfigError("gather_rows: index out of range");
  }
  NdArray out = NdArray::zeros({idx.size(), e});
  const double* tp = table.value().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(tp + idx[r] * e, tp + (idx[r] + 1) * e, out.data() + r * e);
  }
  return make_op("gather_rows", std::move(out), {table},
                 [tn = table.node(), idx, e](detail::Node& self) {
                   if (!tn->requires_grad) return;
                   NdArray dt = NdArray::zeros(tn->value.shape());
                   const double* g = self.grad.data();
                   double* d = dt.data();
                   for (std::size_t r = 0; r < idx.size(); ++r) {
                     for (std::size_t j = 0; j < e; ++j) d[idx[r] * e + j] += g[r * e + j];
                   }
                   tn->accumulate(dt);
                 });
}

Tensor select_last(const Tensor& x, const std::vector<std::size_t>& idx) {
  const Shape& sx = x.shape();
  if (sx.size() != 2) throw ConfigError("select_last: want (N,M), got " + shape_str(sx));
  const std::size_t n = sx[0], m = sx[1];
  if (idx.size() != n) throw ConfigError("select_last: index count != rows");
  for (std::size_t i : idx) {
    if (i >= m) throw ConfigError("select_last: index out of range");
  }
  NdArray out = NdArray::zeros({n});
  const double* xp = x.value().data();
  for (std::size_t r = 0; r < n; ++r) out.data()[r] = xp[r * m + idx[r]];
  return make_op("select_last", std::move(out), {x}, [xn = x.node(), idx, m](detail::Node& self) {
    if (!xn->requires_grad) return;
    NdArray dx = NdArray::zeros(xn->value.shape());
    const double* g = self.grad.data();
    for (std::size_t r = 0; r < idx.size(); ++r) dx.data()[r * m + idx[r]] = g[r];
    xn->accumulate(dx);
  });
}

// ---- mixture density ---------------------------------------------------------

Tensor gauss_mixture_logpdf(const Tensor& u, const Tensor& means, const Tensor& logvars,
                            const Tensor& logits) {
  const Shape& su = u.shape();
  const Shape& sm = means.shape();
  if (su.size() != 2 || sm.size() != 2 || !means.value().same_shape(logvars.value()) ||
      logits.shape().size() != 1 || logits.shape()[0] != sm[0] || su[1] != sm[1]) {
    throw ConfigError("gauss_mixture_logpdf: want u (N,D), means/logvars (K,D), logits (K)");
  }
  const std::size_t n = su[0], d = su[1], k = sm[0];
  // log mixture weights
  std::vector<double> logw(k);
  {
    const double* lp = logits.value().data();
    double mx = lp[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lp[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(lp[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) logw[j] = lp[j] - lse;
  }
  // per-(sample, component) joint log density, kept for the backward pass
  auto lp_nk = std::make_shared<std::vector<double>>(n * k);
  NdArray out = NdArray::zeros({n});
  const double* up = u.value().data();
  const double* mp = means.value().data();
  const double* vp = logvars.value().data();
  for (std::size_t s = 0; s < n; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      double acc = logw[j];
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = up[s * d + t] - mp[j * d + t];
        acc += -0.5 * kLog2Pi - 0.5 * vp[j * d + t] - 0.5 * diff * diff * std::exp(-vp[j * d + t]);
      }
      (*lp_nk)[s * k + j] = acc;
      mx = std::max(mx, acc);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp((*lp_nk)[s * k + j] - mx);
    out.data()[s] = mx + std::log(sum);
  }
  return make_op(
      "gauss_mixture_logpdf", std::move(out), {u, means, logvars, logits},
      [un = u.node(), mn = means.node(), vn = logvars.node(), ln = logits.node(), lp_nk, logw, n, d,
       k](detail::Node& self) {
        const double* g = self.grad.data();
        const double* ov = self.value.data();
        const double* uv = un->value.data();
        const double* mv = mn->value.data();
        const double* vv = vn->value.data();
        NdArray du = un->requires_grad ? NdArray::zeros(un->value.shape()) : NdArray();
        NdArray dm = mn->requires_grad ? NdArray::zeros(mn->value.shape()) : NdArray();
        NdArray dv = vn->requires_grad ? NdArray::zeros(vn->value.shape()) : NdArray();
        NdArray dl = ln->requires_grad ? NdArray::zeros(ln->value.shape()) : NdArray();
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t j = 0; j < k; ++j) {
            const double r = std::exp((*lp_nk)[s * k + j] - ov[s]);  // responsibility
            const double gr = g[s] * r;
            if (gr == 0.0) continue;
            for (std::size_t t = 0; t < d; ++t) {
              const double inv_var = std::exp(-vv[j * d + t]);
              const double diff = uv[s * d + t] - mv[j * d + t];
              if (un->requires_grad) du.data()[s * d + t] += gr * (-diff * inv_var);
              if (mn->requires_grad) dm.data()[j * d + t] += gr * diff * inv_var;
              if (vn->requires_grad) {
                dv.data()[j * d + t] += gr * 0.5 * (diff * diff * inv_var - 1.0);
              }
            }
            if (ln->requires_grad) dl.data()[j] += gr;
          }
          if (ln->requires_grad) {
            // subtract the softmax-normalization term: d logw_j / d logit_q = δ - w_q
            for (std::size_t q = 0; q < k; ++q) dl.data()[q] -= g[s] * std::exp(logw[q]);
          }
        }
        if (un->requires_grad) un->accumulate(du);
        if (mn->requires_grad) mn->accumulate(dm);
        if (vn->requires_grad) vn->accumulate(dv);
        if (ln->requires_grad) ln->accumulate(dl);
      });
}

Tensor stop_grad(const Tensor& a) { return Tensor::constant(a.value()); }

// ---- finite differences -------------------------------------------------------

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps) {
  if (eps <= 0.0) throw ConfigError("finite_diff_check: eps must be positive");
  for (Tensor p : params) p.zero_grad();  // gradients accumulate; start clean
  Tensor loss = f();
  backward(loss);
  std::vector<NdArray> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    analytic.push_back(p.has_grad() ? p.grad() : NdArray::zeros(p.shape()));
  }
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.mutable_value().data()[i];
      p.mutable_value().data()[i] = orig + eps;
      const double fp = f().value().data()[0];
      p.mutable_value().data()[i] = orig - eps;
      const double fm = f().value().data()[0];
      p.mutable_value().data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[pi].data()[i];
      double err;
      if (!std::isfinite(fd) || !std::isfinite(an)) {
        err = std::numeric_limits<double>::infinity();
      } else {
        err = std::abs(an - fd) / std::max(1.0, std::abs(fd));
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace contextflow
