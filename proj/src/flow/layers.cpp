#include "contextflow/flow/layers.hpp"

#include <cmath>

#include "contextflow/core/error.hpp"
#include "contextflow/core/linalg.hpp"
#include "contextflow/core/log.hpp"

namespace contextflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kClamp = 8.0;

// Layers work on a (N, C, P) view; remember the incoming shape to restore it.
Tensor to3(const Tensor& x, std::size_t& n, std::size_t& c, std::size_t& p) {
  const Shape& sh = x.shape();
  if (sh.size() < 2) throw ConfigError("layer input must be batched (N, C, ...), got " +
                                       shape_str(sh));
  n = sh[0];
  c = sh[1];
  p = 1;
  for (std::size_t i = 2; i < sh.size(); ++i) p *= sh[i];
  if (sh.size() == 3) return x;
  return reshape(x, {n, c, p});
}

Tensor from3(const Tensor& x3, const Shape& like) {
  if (like.size() == 3) return x3;
  return reshape(x3, like);
}

std::vector<std::size_t> iota_range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> r;
  r.reserve(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) r.push_back(i);
  return r;
}

}  // namespace

CondMode cond_mode_from_name(const std::string& s) {
  if (s == "additive") return CondMode::kAdditive;
  if (s == "concat") return CondMode::kConcat;
  if (s == "none") return CondMode::kNone;
  throw ConfigError("unknown conditioning mode '" + s + "' (want additive | concat | none)");
}

const char* cond_mode_name(CondMode m) {
  switch (m) {
    case CondMode::kAdditive: return "additive";
    case CondMode::kConcat: return "concat";
    case CondMode::kNone: return "none";
  }
  return "?";
}

void Layer::attach_specialist(ParamStore&, const std::string&, std::size_t, std::size_t, Rng&) {}

// ---- ConditionNet ----------------------------------------------------------

void ConditionNet::allocate(ParamStore& store, const std::string& prefix, std::size_t in,
                            std::size_t hidden, std::size_t out, Rng& rng) {
  if (allocated()) throw ConfigError("condition net '" + prefix + "' allocated twice");
  if (in == 0) throw ConfigError("condition net '" + prefix + "' needs a non-empty context");
  store.create(prefix + "/w1", NdArray::normal({in, hidden}, rng, 1.0 / std::sqrt(double(in))));
  store.create(prefix + "/b1", NdArray::zeros({hidden}));
  // zero-initialized output: a fresh CN is exactly neutral
  store.create(prefix + "/w2", NdArray::zeros({hidden, out}));
  store.create(prefix + "/b2", NdArray::zeros({out}));
  store_ = &store;
  prefix_ = prefix;
  out_ = out;
}

Tensor ConditionNet::apply(const Tensor& ctx_v) const {
  if (!allocated()) throw ConfigError("condition net used before allocation");
  Tensor h = tanh(add(matmul(ctx_v, store_->get(prefix_ + "/w1")), store_->get(prefix_ + "/b1")));
  return add(matmul(h, store_->get(prefix_ + "/w2")), store_->get(prefix_ + "/b2"));
}

// ---- ActNorm ----------------------------------------------------------------

ActNorm::ActNorm(ParamStore& store, const std::string& base, std::size_t channels, CondMode mode,
                 bool data_init)
    : store_(&store), base_(base), c_(channels), mode_(mode), data_init_(data_init) {
  if (mode_ != CondMode::kConcat) {
    store.create(base + "/log_s", NdArray::zeros({c_}));
    store.create(base + "/t", NdArray::zeros({c_}));
    const bool ready = !data_init_;
    store.create(base + "/initialized", NdArray::scalar(ready ? 1.0 : 0.0), /*trainable=*/false);
  }
}

bool ActNorm::initialized() const {
  if (mode_ == CondMode::kConcat) return true;
  return store_->get(base_ + "/initialized").value().data()[0] != 0.0;
}

void ActNorm::attach_specialist(ParamStore& store, const std::string& prefix,
                                std::size_t ctx_width, std::size_t cn_hidden, Rng& rng) {
  allocate_condition(store, prefix + "/cn", ctx_width, cn_hidden, rng);
}

void ActNorm::allocate_condition(ParamStore& store, const std::string& prefix,
                                 std::size_t ctx_width, std::size_t cn_hidden, Rng& rng) {
  cn_.allocate(store, prefix, ctx_width, cn_hidden, 2 * c_, rng);
}

LayerResult ActNorm::inverse(const Tensor& x, const LayerIo& io) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != c_) throw ConfigError(describe() + ": channel mismatch");

  if (mode_ != CondMode::kConcat && !initialized()) {
    if (io.init_actnorm) {
      // per-channel whitening from this batch: u = exp(log_s) * v + t
      const double* xv = x3.value().data();
      NdArray log_s = NdArray::zeros({c_});
      NdArray t = NdArray::zeros({c_});
      for (std::size_t ch = 0; ch < c_; ++ch) {
        double mean = 0.0, var = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t q = 0; q < p; ++q) mean += xv[(s * c_ + ch) * p + q];
        }
        mean /= double(n * p);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t q = 0; q < p; ++q) {
            const double d = xv[(s * c_ + ch) * p + q] - mean;
            var += d * d;
          }
        }
        const double sd = std::max(std::sqrt(var / double(n * p)), 1e-6);
        log_s.data()[ch] = -std::log(sd);
        t.data()[ch] = -mean / sd;
      }
      store_->set(base_ + "/log_s", std::move(log_s));
      store_->set(base_ + "/t", std::move(t));
      store_->set(base_ + "/initialized", NdArray::scalar(1.0));
    } else {
      throw ConfigError(describe() +
                        ": not initialized; run the data-dependent init pass (init_actnorm) "
                        "on a training batch first");
    }
  }

  LayerResult res;
  const bool use_ctx = cn_.allocated() && io.ctx != nullptr;
  if (mode_ == CondMode::kConcat) {
    if (io.ctx == nullptr) throw ConfigError(describe() + ": concat mode requires a context");
    Tensor cn_out = cn_.apply(io.ctx->v);  // (N, 2C)
    Tensor ls = index_select(cn_out, 1, iota_range(0, c_));
    Tensor t = index_select(cn_out, 1, iota_range(c_, 2 * c_));
    res.output = from3(add_channel(mul_channel(x3, exp(ls)), t), x.shape());
    res.logdet = mul_scalar(sum_trailing(ls, 1), double(p));
    res.logdet_ctx = NdArray::zeros({n});
  } else if (use_ctx) {
    Tensor base_ls = repeat_rows(store_->get(base_ + "/log_s"), n);
    Tensor base_t = repeat_rows(store_->get(base_ + "/t"), n);
    Tensor cn_out = cn_.apply(io.ctx->v);
    Tensor cn_ls = index_select(cn_out, 1, iota_range(0, c_));
    Tensor cn_t = index_select(cn_out, 1, iota_range(c_, 2 * c_));
    Tensor ls = add(base_ls, cn_ls);
    Tensor t = add(base_t, cn_t);
    res.output = from3(add_channel(mul_channel(x3, exp(ls)), t), x.shape());
    res.logdet = mul_scalar(sum_trailing(ls, 1), double(p));
    // context share of the volume change: positions * sum_c CN log-scale
    NdArray share = NdArray::zeros({n});
    const double* cv = cn_ls.value().data();
    for (std::size_t s = 0; s < n; ++s) {
      double acc = 0.0;
      for (std::size_t ch = 0; ch < c_; ++ch) acc += cv[s * c_ + ch];
      share.data()[s] = acc * double(p);
    }
    res.logdet_ctx = std::move(share);
  } else {
    Tensor ls = store_->get(base_ + "/log_s");
    Tensor t = store_->get(base_ + "/t");
    res.output = from3(add_channel(mul_channel(x3, exp(ls)), t), x.shape());
    res.logdet = broadcast_scalar(mul_scalar(sum_all(ls), double(p)), n);
    res.logdet_ctx = NdArray::zeros({n});
  }
  return res;
}

LayerResult ActNorm::forward(const Tensor& x, const LayerIo& io) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != c_) throw ConfigError(describe() + ": channel mismatch");
  if (mode_ != CondMode::kConcat && !initialized()) {
    throw ConfigError(describe() + ": not initialized; sampling needs trained parameters");
  }
  Tensor ls, t;
  if (mode_ == CondMode::kConcat) {
    if (io.ctx == nullptr) throw ConfigError(describe() + ": concat mode requires a context");
    Tensor cn_out = cn_.apply(io.ctx->v);
    ls = index_select(cn_out, 1, iota_range(0, c_));
    t = index_select(cn_out, 1, iota_range(c_, 2 * c_));
  } else if (cn_.allocated() && io.ctx != nullptr) {
    Tensor cn_out = cn_.apply(io.ctx->v);
    ls = add(repeat_rows(store_->get(base_ + "/log_s"), n),
             index_select(cn_out, 1, iota_range(0, c_)));
    t = add(repeat_rows(store_->get(base_ + "/t"), n),
            index_select(cn_out, 1, iota_range(c_, 2 * c_)));
  } else {
    ls = store_->get(base_ + "/log_s");
    t = store_->get(base_ + "/t");
  }
  LayerResult res;
  res.output = from3(mul_channel(add_channel(x3, neg(t)), exp(neg(ls))), x.shape());
  res.logdet = ls.shape().size() == 2 ? mul_scalar(sum_trailing(ls, 1), -double(p))
                                      : broadcast_scalar(mul_scalar(sum_all(ls), -double(p)), n);
  res.logdet_ctx = NdArray::zeros({n});
  return res;
}

// ---- Conv1x1 ----------------------------------------------------------------

Conv1x1::Conv1x1(ParamStore& store, const std::string& base, std::size_t channels, CondMode mode,
                 bool conv_context, Rng& rng)
    : store_(&store), base_(base), c_(channels), mode_(mode), conv_context_(conv_context) {
  if (mode_ != CondMode::kConcat) {
    store.create(base + "/w_g", random_orthogonal(c_, rng));
  }
}

void Conv1x1::attach_specialist(ParamStore& store, const std::string& prefix,
                                std::size_t ctx_width, std::size_t cn_hidden, Rng& rng) {
  if (mode_ == CondMode::kAdditive && conv_context_) {
    allocate_condition(store, prefix + "/cn", ctx_width, cn_hidden, rng);
  }
}

void Conv1x1::allocate_condition(ParamStore& store, const std::string& prefix,
                                 std::size_t ctx_width, std::size_t cn_hidden, Rng& rng) {
  cn_.allocate(store, prefix, ctx_width, cn_hidden, c_ * c_, rng);
}

LayerResult Conv1x1::inverse(const Tensor& x, const LayerIo& io) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != c_) throw ConfigError(describe() + ": channel mismatch");
  LayerResult res;
  const bool ctx_path =
      (mode_ == CondMode::kConcat) || (cn_.allocated() && io.ctx != nullptr && conv_context_);
  if (ctx_path) {
    if (io.ctx == nullptr) throw ConfigError(describe() + ": conditioning requires a context");
    Tensor g = reshape(cn_.apply(io.ctx->v), {n, c_, c_});
    Tensor base = mode_ == CondMode::kConcat
                      ? repeat_rows(Tensor::constant(NdArray::eye(c_)), n)
                      : repeat_rows(store_->get(base_ + "/w_g"), n);
    Tensor w_eff = add(base, g);
    res.output = from3(batched_matvec(w_eff, x3), x.shape());
    res.logdet = mul_scalar(batched_logabsdet(w_eff), double(p));
    if (mode_ == CondMode::kAdditive) {
      // context share: log|det W_eff| - log|det W_g| per sample
      const double base_ld = lu_logabsdet(store_->get(base_ + "/w_g").value()).logabsdet;
      NdArray share = NdArray::zeros({n});
      const double* ldv = res.logdet.value().data();
      for (std::size_t s = 0; s < n; ++s) share.data()[s] = ldv[s] - double(p) * base_ld;
      res.logdet_ctx = std::move(share);
    } else {
      res.logdet_ctx = NdArray::zeros({n});
    }
  } else {
    Tensor w = store_->get(base_ + "/w_g");
    res.output = from3(channel_matvec(w, x3), x.shape());
    res.logdet = broadcast_scalar(mul_scalar(logabsdet(w), double(p)), n);
    res.logdet_ctx = NdArray::zeros({n});
  }
  return res;
}

LayerResult Conv1x1::forward(const Tensor& x, const LayerIo& io) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != c_) throw ConfigError(describe() + ": channel mismatch");
  // generation path: solve W_eff v = u via LU, value-level
  const bool ctx_path =
      (mode_ == CondMode::kConcat) || (cn_.allocated() && io.ctx != nullptr && conv_context_);
  NdArray out = NdArray::zeros(x3.shape());
  NdArray ld = NdArray::zeros({n});
  const double* xv = x3.value().data();
  NdArray g_val;
  if (ctx_path) {
    if (io.ctx == nullptr) throw ConfigError(describe() + ": conditioning requires a context");
    g_val = cn_.apply(io.ctx->v).value();
  }
  NdArray w_base = mode_ == CondMode::kConcat ? NdArray::eye(c_)
                                              : store_->get(base_ + "/w_g").value();
  for (std::size_t s = 0; s < n; ++s) {
    NdArray w = w_base;
    if (ctx_path) {
      for (std::size_t i = 0; i < c_ * c_; ++i) w.data()[i] += g_val.data()[s * c_ * c_ + i];
    }
    LuFactors lu = lu_factor(w);
    ld.data()[s] = -double(p) * lu.logabsdet();
    std::vector<double> col(c_);
    for (std::size_t q = 0; q < p; ++q) {
      for (std::size_t ch = 0; ch < c_; ++ch) col[ch] = xv[(s * c_ + ch) * p + q];
      std::vector<double> sol = lu.solve(col);
      for (std::size_t ch = 0; ch < c_; ++ch) out.data()[(s * c_ + ch) * p + q] = sol[ch];
    }
    if (!ctx_path) {
      // same factorization for every sample; fill and stop early
      for (std::size_t s2 = s + 1; s2 < n; ++s2) {
        for (std::size_t q = 0; q < p; ++q) {
          for (std::size_t ch = 0; ch < c_; ++ch) col[ch] = xv[(s2 * c_ + ch) * p + q];
          std::vector<double> sol = lu.solve(col);
          for (std::size_t ch = 0; ch < c_; ++ch) out.data()[(s2 * c_ + ch) * p + q] = sol[ch];
        }
        ld.data()[s2] = ld.data()[s];
      }
      break;
    }
  }
  LayerResult res;
  res.output = from3(Tensor::constant(std::move(out)), x.shape());
  res.logdet = Tensor::constant(std::move(ld));
  res.logdet_ctx = NdArray::zeros({n});
  return res;
}

// ---- Coupling ----------------------------------------------------------------

Coupling::Coupling(ParamStore& store, const std::string& base, const Shape& sample_shape,
                   MaskSpec mask, std::size_t width_factor, CondMode mode, std::size_t ctx_width,
                   std::size_t cn_hidden, Rng& rng, std::size_t hidden_override)
    : store_(&store), base_(base), sample_shape_(sample_shape), mode_(mode) {
  plan_ = plan_mask(mask, sample_shape);
  const std::size_t c = sample_shape[0];
  if (plan_.axis == 1) {
    feat_ = plan_.a_idx.size();
    net_in_ = plan_.b_idx.size();
  } else {
    feat_ = c;
    net_in_ = c;
  }
  std::size_t in = net_in_;
  if (mode_ == CondMode::kConcat) {
    if (ctx_width == 0) throw ConfigError(base + ": concat mode needs the context width at build");
    cn_.allocate(store, base + "/cn", ctx_width, cn_hidden, cn_hidden, rng);
    in += cn_hidden;
  }
  hidden_ = hidden_override ? hidden_override : width_factor * in;
  const std::string p = base + "/nn";
  store.create(p + "/w1", NdArray::normal({in, hidden_}, rng, 1.0 / std::sqrt(double(in))));
  store.create(p + "/b1", NdArray::zeros({hidden_}));
  store.create(p + "/w2", NdArray::normal({hidden_, hidden_}, rng, 1.0 / std::sqrt(double(hidden_))));
  store.create(p + "/b2", NdArray::zeros({hidden_}));
  // zero-initialized output layer: the flow starts at the identity
  store.create(p + "/w3", NdArray::zeros({hidden_, 2 * feat_}));
  store.create(p + "/b3", NdArray::zeros({2 * feat_}));
}

void Coupling::attach_specialist(ParamStore& store, const std::string& prefix,
                                 std::size_t ctx_width, std::size_t cn_hidden, Rng& rng) {
  if (mode_ == CondMode::kAdditive) {
    allocate_condition(store, prefix + "/cn", ctx_width, cn_hidden, rng);
  }
}

void Coupling::allocate_condition(ParamStore& store, const std::string& prefix,
                                  std::size_t ctx_width, std::size_t cn_hidden, Rng& rng) {
  cn_.allocate(store, prefix, ctx_width, cn_hidden, 2 * feat_, rng);
}

LayerResult Coupling::apply(const Tensor& x, const LayerIo& io, bool inverse_dir) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != sample_shape_[0]) throw ConfigError(describe() + ": channel mismatch");

  Tensor part_a = index_select(x3, plan_.axis, plan_.a_idx);
  Tensor part_b = index_select(x3, plan_.axis, plan_.b_idx);
  // arrange as (N, groups, features): the net runs once per group
  Tensor a_gf, b_gf;
  if (plan_.axis == 1) {
    a_gf = permute(part_a, {0, 2, 1});  // (N, P, Fa)
    b_gf = permute(part_b, {0, 2, 1});  // (N, P, Cb)
  } else {
    a_gf = permute(part_a, {0, 2, 1});  // (N, Pa, C)
    b_gf = permute(part_b, {0, 2, 1});  // partner positions, same order as a
  }
  const std::size_t groups = a_gf.shape()[1];

  Tensor net_in = b_gf;
  if (mode_ == CondMode::kConcat) {
    if (io.ctx == nullptr) throw ConfigError(describe() + ": concat mode requires a context");
    net_in = concat(net_in, repeat_mid(cn_.apply(io.ctx->v), groups), 2);
  }
  const std::string pn = base_ + "/nn";
  Tensor h1 = tanh(add(matmul(net_in, store_->get(pn + "/w1")), store_->get(pn + "/b1")));
  Tensor h2 = tanh(add(matmul(h1, store_->get(pn + "/w2")), store_->get(pn + "/b2")));
  Tensor raw = add(matmul(h2, store_->get(pn + "/w3")), store_->get(pn + "/b3"));
  if (!raw.value().all_finite()) {
    throw NumericalError(describe() + ": non-finite coupling-net output");
  }

  Tensor nn_shat;  // generalist-only pre-activation, for the context share
  const bool additive_ctx = mode_ == CondMode::kAdditive && cn_.allocated() && io.ctx != nullptr;
  if (additive_ctx) {
    nn_shat = index_select(raw, 2, iota_range(0, feat_));
    raw = add(raw, repeat_mid(cn_.apply(io.ctx->v), groups));
  }
  Tensor shat = clamp(index_select(raw, 2, iota_range(0, feat_)), -kClamp, kClamp);
  Tensor t = index_select(raw, 2, iota_range(feat_, 2 * feat_));

  Tensor out_a_gf;
  LayerResult res;
  if (inverse_dir) {
    out_a_gf = add(mul(a_gf, exp(shat)), t);
    res.logdet = sum_trailing(shat, 2);
  } else {
    out_a_gf = mul(sub(a_gf, t), exp(neg(shat)));
    res.logdet = neg(sum_trailing(shat, 2));
  }

  res.logdet_ctx = NdArray::zeros({n});
  if (additive_ctx && inverse_dir) {
    // exact context share: sum clamp(nn+cn) - sum clamp(nn), value-level
    const double* with_c = shat.value().data();
    const double* nn_only = nn_shat.value().data();
    const std::size_t per = groups * feat_;
    for (std::size_t s = 0; s < n; ++s) {
      double acc = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        const double base_v = std::min(std::max(nn_only[s * per + i], -kClamp), kClamp);
        acc += with_c[s * per + i] - base_v;
      }
      res.logdet_ctx.data()[s] = acc;
    }
  }

  Tensor out_a = permute(out_a_gf, {0, 2, 1});
  Tensor recombined = index_select(concat(out_a, part_b, plan_.axis), plan_.axis,
                                   plan_.inverse_perm);
  res.output = from3(recombined, x.shape());
  return res;
}

LayerResult Coupling::inverse(const Tensor& x, const LayerIo& io) { return apply(x, io, true); }
LayerResult Coupling::forward(const Tensor& x, const LayerIo& io) { return apply(x, io, false); }

// ---- Squeeze -----------------------------------------------------------------

Squeeze::Squeeze(const Shape& sample_shape) : in_shape_(sample_shape) {
  if (sample_shape.size() == 3) {
    const std::size_t c = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
    if (h % 2 != 0 || w % 2 != 0) {
      throw ConfigError("squeeze: spatial extents must be even, got " + shape_str(sample_shape));
    }
    out_shape_ = {4 * c, h / 2, w / 2};
    // out channel = c*4 + 2*(h%2) + (w%2)
    fwd_map_ = std::make_shared<std::vector<std::size_t>>(shape_numel(out_shape_));
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t oc = ch * 4 + 2 * (y % 2) + (x % 2);
          const std::size_t out_flat = (oc * (h / 2) + y / 2) * (w / 2) + x / 2;
          (*fwd_map_)[out_flat] = (ch * h + y) * w + x;
        }
      }
    }
  } else if (sample_shape.size() == 2) {
    const std::size_t c = sample_shape[0], t = sample_shape[1];
    if (t % 2 != 0) {
      throw ConfigError("squeeze: temporal extent must be even, got " + shape_str(sample_shape));
    }
    out_shape_ = {2 * c, t / 2};
    fwd_map_ = std::make_shared<std::vector<std::size_t>>(shape_numel(out_shape_));
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t q = 0; q < t; ++q) {
        const std::size_t oc = ch * 2 + (q % 2);
        (*fwd_map_)[oc * (t / 2) + q / 2] = ch * t + q;
      }
    }
  } else {
    throw ConfigError("squeeze needs a spatial or temporal axis, got " + shape_str(sample_shape));
  }
  inv_map_ = std::make_shared<std::vector<std::size_t>>(fwd_map_->size());
  for (std::size_t i = 0; i < fwd_map_->size(); ++i) (*inv_map_)[(*fwd_map_)[i]] = i;
}

Shape Squeeze::out_shape(const Shape& s) const {
  if (s != in_shape_) throw ConfigError("squeeze: unexpected input shape " + shape_str(s));
  return out_shape_;
}

namespace {

// lift a per-sample flat map to the whole batch
std::shared_ptr<std::vector<std::size_t>> batch_map(const std::vector<std::size_t>& sample_map,
                                                    std::size_t n, std::size_t in_numel) {
  auto m = std::make_shared<std::vector<std::size_t>>(n * sample_map.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < sample_map.size(); ++i) {
      (*m)[s * sample_map.size() + i] = s * in_numel + sample_map[i];
    }
  }
  return m;
}

}  // namespace

LayerResult Squeeze::inverse(const Tensor& x, const LayerIo&) {
  const std::size_t n = x.shape()[0];
  Shape out = out_shape_;
  out.insert(out.begin(), n);
  LayerResult res;
  res.output = reindex(x, batch_map(*fwd_map_, n, shape_numel(in_shape_)), out);
  res.logdet = Tensor::constant(NdArray::zeros({n}));
  res.logdet_ctx = NdArray::zeros({n});
  return res;
}

LayerResult Squeeze::forward(const Tensor& x, const LayerIo&) {
  const std::size_t n = x.shape()[0];
  Shape out = in_shape_;
  out.insert(out.begin(), n);
  LayerResult res;
  res.output = reindex(x, batch_map(*inv_map_, n, shape_numel(out_shape_)), out);
  res.logdet = Tensor::constant(NdArray::zeros({n}));
  res.logdet_ctx = NdArray::zeros({n});
  return res;
}

// ---- SplitPrior ---------------------------------------------------------------

SplitPrior::SplitPrior(ParamStore& store, const std::string& base, const Shape& sample_shape,
                       Rng& rng)
    : store_(&store), base_(base), c_(sample_shape[0]) {
  (void)rng;
  if (c_ % 2 != 0) {
    throw ConfigError("split prior needs an even channel count, got " + std::to_string(c_));
  }
  keep_ = c_ / 2;
  store.create(base + "/mean", NdArray::zeros({c_ - keep_}));
  store.create(base + "/logvar", NdArray::zeros({c_ - keep_}));
}

Shape SplitPrior::out_shape(const Shape& s) const {
  Shape out = s;
  out[0] = keep_;
  return out;
}

LayerResult SplitPrior::inverse(const Tensor& x, const LayerIo&) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != c_) throw ConfigError(describe() + ": channel mismatch");
  Tensor keep = index_select(x3, 1, iota_range(0, keep_));
  Tensor drop = index_select(x3, 1, iota_range(keep_, c_));
  Tensor mean = store_->get(base_ + "/mean");
  Tensor logvar = store_->get(base_ + "/logvar");
  Tensor diff = add_channel(drop, neg(mean));
  Tensor scaled = mul_channel(square(diff), exp(neg(logvar)));
  Tensor logp = mul_scalar(sum_trailing(scaled, 2), -0.5);
  logp = add(logp, broadcast_scalar(mul_scalar(sum_all(logvar), -0.5 * double(p)), n));
  logp = add_scalar(logp, -0.5 * double((c_ - keep_) * p) * kLog2Pi);

  Shape like = x.shape();
  like[1] = keep_;
  LayerResult res;
  res.output = from3(keep, like);
  res.logdet = Tensor::constant(NdArray::zeros({n}));
  res.logdet_ctx = NdArray::zeros({n});
  res.split_logp = logp;
  return res;
}

LayerResult SplitPrior::forward(const Tensor& x, const LayerIo& io) {
  std::size_t n, c, p;
  Tensor x3 = to3(x, n, c, p);
  if (c != keep_) throw ConfigError(describe() + ": channel mismatch on the sampling path");
  if (io.rng == nullptr) {
    throw ConfigError(describe() + ": sampling through a split prior requires an rng");
  }
  const NdArray& mean = store_->get(base_ + "/mean").value();
  const NdArray& logvar = store_->get(base_ + "/logvar").value();
  NdArray drop = NdArray::zeros({n, c_ - keep_, p});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c_ - keep_; ++ch) {
      const double sd = std::exp(0.5 * logvar.data()[ch]);
      for (std::size_t q = 0; q < p; ++q) {
        drop.data()[(s * (c_ - keep_) + ch) * p + q] = mean.data()[ch] + sd * io.rng->normal();
      }
    }
  }
  Shape like = x.shape();
  like[1] = c_;
  LayerResult res;
  res.output = from3(concat(x3, Tensor::constant(std::move(drop)), 1), like);
  res.logdet = Tensor::constant(NdArray::zeros({n}));
  res.logdet_ctx = NdArray::zeros({n});
  return res;
}

// ---- PermuteAxes ----------------------------------------------------------------

PermuteAxes::PermuteAxes(const Shape& sample_shape) {
  if (sample_shape.size() != 2) {
    throw ConfigError("permute_axes expects (C, T) samples, got " + shape_str(sample_shape));
  }
}

Shape PermuteAxes::out_shape(const Shape& s) const {
  if (s.size() != 2) throw ConfigError("permute_axes expects rank-2 samples");
  return {s[1], s[0]};
}

LayerResult PermuteAxes::inverse(const Tensor& x, const LayerIo&) {
  const std::size_t n = x.shape()[0];
  LayerResult res;
  res.output = permute(x, {0, 2, 1});
  res.logdet = Tensor::constant(NdArray::zeros({n}));
  res.logdet_ctx = NdArray::zeros({n});
  return res;
}

LayerResult PermuteAxes::forward(const Tensor& x, const LayerIo& io) { return inverse(x, io); }

}  // namespace contextflow
