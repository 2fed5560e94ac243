#include "contextflow/enc/encoders.hpp"

#include <cmath>

#include "contextflow/core/error.hpp"

namespace contextflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// sum_d log N(z_d; 0, 1), one constant per sample
NdArray base_logpdf(const NdArray& z) {
  const std::size_t n = z.shape()[0];
  const std::size_t d = z.numel() / n;
  NdArray out = NdArray::zeros({n});
  for (std::size_t s = 0; s < n; ++s) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = z.data()[s * d + j];
      acc += -0.5 * kLog2Pi - 0.5 * v * v;
    }
    out.data()[s] = acc;
  }
  return out;
}

void check_categories(const std::vector<std::size_t>& x, std::size_t k, const char* who) {
  for (std::size_t v : x) {
    if (v >= k) {
      throw DataError(std::string(who) + ": category " + std::to_string(v) +
                      " out of range [0, " + std::to_string(k) + ")");
    }
  }
}

std::vector<std::size_t> iota_range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> r;
  r.reserve(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) r.push_back(i);
  return r;
}

}  // namespace

Encoded uniform_dequantize(const std::vector<std::size_t>& x, std::size_t cardinality, Rng& rng) {
  check_categories(x, cardinality, "uniform_dequantize");
  NdArray v = NdArray::zeros({x.size(), 1});
  for (std::size_t i = 0; i < x.size(); ++i) {
    v.data()[i] = static_cast<double>(x[i]) + rng.uniform();
  }
  return {Tensor::constant(std::move(v)), Tensor::constant(NdArray::zeros({x.size()}))};
}

// ---- VariationalDequantizer ---------------------------------------------------

VariationalDequantizer::VariationalDequantizer(ParamStore& store, const std::string& prefix,
                                               std::size_t cardinality, Mapping mapping, Rng& rng)
    : store_(&store), prefix_(prefix), k_(cardinality), mapping_(mapping) {
  if (k_ < 2) throw ConfigError(prefix + ": variational dequantizer needs cardinality >= 2");
  if (mapping_ == Mapping::kBinary) {
    throw ConfigError(prefix + ": variational dequantizer supports integer or one-hot mapping");
  }
  dim_ = mapping_ == Mapping::kOneHot ? k_ : 1;
  if (dim_ == 1) {
    // two conditional elementwise affine sub-layers (couplings need >= 2 dims)
    for (int c = 1; c <= 2; ++c) {
      store.create(prefix + "/a" + std::to_string(c), NdArray::zeros({k_, 1}));
      store.create(prefix + "/b" + std::to_string(c), NdArray::zeros({k_, 1}));
    }
    hidden_ = 0;
  } else {
    for (int c = 0; c < 2; ++c) {
      const std::size_t da = (dim_ + ((c == 0) ? 1 : 0)) / 2;  // dims with parity c
      const std::size_t in = dim_ - da;
      const std::size_t h = 4 * in;
      const std::string p = prefix + "/cpl" + std::to_string(c);
      const double w_scale = 1.0 / std::sqrt(static_cast<double>(in));
      store.create(p + "/w1", NdArray::normal({in, h}, rng, w_scale));
      store.create(p + "/b1", NdArray::zeros({h}));
      store.create(p + "/w2", NdArray::normal({h, h}, rng, 1.0 / std::sqrt(double(h))));
      store.create(p + "/b2", NdArray::zeros({h}));
      store.create(p + "/w3", NdArray::zeros({h, 2 * da}));
      store.create(p + "/b3", NdArray::zeros({2 * da}));
      store.create(p + "/bias", NdArray::zeros({k_, 2 * da}));
    }
    hidden_ = 4 * (dim_ / 2);
    store.create(prefix + "/a", NdArray::zeros({k_, dim_}));
    store.create(prefix + "/b", NdArray::zeros({k_, dim_}));
  }
}

Encoded VariationalDequantizer::encode(const std::vector<std::size_t>& x, Rng& rng) const {
  check_categories(x, k_, prefix_.c_str());
  const std::size_t n = x.size();
  NdArray z0 = NdArray::normal({n, dim_}, rng, 1.0);
  Tensor log_q = Tensor::constant(base_logpdf(z0));
  Tensor z = Tensor::constant(std::move(z0));

  if (dim_ == 1) {
    for (int c = 1; c <= 2; ++c) {
      Tensor a = gather_rows(store_->get(prefix_ + "/a" + std::to_string(c)), x);
      Tensor b = gather_rows(store_->get(prefix_ + "/b" + std::to_string(c)), x);
      z = add(mul(z, exp(a)), b);
      log_q = sub(log_q, sum_trailing(a, 1));
    }
  } else {
    for (int c = 0; c < 2; ++c) {
      std::vector<std::size_t> idx_a, idx_b;
      for (std::size_t j = 0; j < dim_; ++j) ((j % 2 == std::size_t(c)) ? idx_a : idx_b).push_back(j);
      const std::size_t da = idx_a.size();
      const std::string p = prefix_ + "/cpl" + std::to_string(c);
      Tensor z_b = index_select(z, 1, idx_b);
      Tensor z_a = index_select(z, 1, idx_a);
      Tensor h1 = tanh(add(matmul(z_b, store_->get(p + "/w1")), store_->get(p + "/b1")));
      Tensor h2 = tanh(add(matmul(h1, store_->get(p + "/w2")), store_->get(p + "/b2")));
      Tensor raw = add(matmul(h2, store_->get(p + "/w3")), store_->get(p + "/b3"));
      raw = add(raw, gather_rows(store_->get(p + "/bias"), x));
      Tensor shat = clamp(index_select(raw, 1, iota_range(0, da)), -8.0, 8.0);
      Tensor t = index_select(raw, 1, iota_range(da, 2 * da));
      z_a = add(mul(z_a, exp(shat)), t);
      log_q = sub(log_q, sum_trailing(shat, 1));
      // stitch transformed and passthrough dims back into natural order
      std::vector<std::size_t> inv(dim_);
      for (std::size_t i = 0; i < idx_a.size(); ++i) inv[idx_a[i]] = i;
      for (std::size_t i = 0; i < idx_b.size(); ++i) inv[idx_b[i]] = da + i;
      z = index_select(concat(z_a, z_b, 1), 1, inv);
    }
    Tensor a = gather_rows(store_->get(prefix_ + "/a"), x);
    Tensor b = gather_rows(store_->get(prefix_ + "/b"), x);
    z = add(mul(z, exp(a)), b);
    log_q = sub(log_q, sum_trailing(a, 1));
  }

  // squash to (0,1): log|d eps/dz| = -softplus(z) - softplus(-z)
  Tensor eps = sigmoid(z);
  log_q = add(log_q, sum_trailing(add(softplus(z), softplus(neg(z))), 1));

  NdArray target = NdArray::zeros({n, dim_});
  if (mapping_ == Mapping::kOneHot) {
    for (std::size_t i = 0; i < n; ++i) target.data()[i * dim_ + x[i]] = 1.0;
  } else {
    for (std::size_t i = 0; i < n; ++i) target.data()[i] = static_cast<double>(x[i]);
  }
  Tensor v = add(eps, Tensor::constant(std::move(target)));
  return {v, log_q};
}

std::size_t VariationalDequantizer::decode_one(const double* v) const {
  if (mapping_ == Mapping::kOneHot) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < dim_; ++j) {
      if (v[j] > v[best]) best = j;
    }
    return best;
  }
  const double f = std::floor(v[0]);
  if (f < 0.0 || f >= static_cast<double>(k_)) {
    throw DecodeError(prefix_ + ": dequantized value " + std::to_string(v[0]) +
                      " decodes outside [0, " + std::to_string(k_) + ")");
  }
  return static_cast<std::size_t>(f);
}

// ---- ArgmaxEncoder -------------------------------------------------------------

ArgmaxEncoder::ArgmaxEncoder(ParamStore& store, const std::string& prefix, std::size_t cardinality,
                             Rng& rng)
    : store_(&store), prefix_(prefix), k_(cardinality), bits_(bits_for(cardinality)) {
  (void)rng;
  store.create(prefix + "/a", NdArray::zeros({k_, bits_}));
  store.create(prefix + "/b", NdArray::zeros({k_, bits_}));
}

Encoded ArgmaxEncoder::encode(const std::vector<std::size_t>& x, Rng& rng) const {
  check_categories(x, k_, prefix_.c_str());
  const std::size_t n = x.size();
  NdArray z0 = NdArray::normal({n, bits_}, rng, 1.0);
  Tensor log_q = Tensor::constant(base_logpdf(z0));
  Tensor z = Tensor::constant(std::move(z0));
  Tensor a = gather_rows(store_->get(prefix_ + "/a"), x);
  Tensor b = gather_rows(store_->get(prefix_ + "/b"), x);
  Tensor zp = add(mul(z, exp(a)), b);
  log_q = sub(log_q, sum_trailing(a, 1));
  // v_j = sign_j * softplus(z'_j); |dv/dz'| = sigmoid(z')
  NdArray signs = NdArray::zeros({n, bits_});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < bits_; ++j) {
      const bool bit = (x[i] >> (bits_ - 1 - j)) & 1u;  // MSB first
      signs.data()[i * bits_ + j] = bit ? 1.0 : -1.0;
    }
  }
  Tensor v = mul(softplus(zp), Tensor::constant(std::move(signs)));
  log_q = add(log_q, sum_trailing(softplus(neg(zp)), 1));  // -= sum log sigmoid(z')
  return {v, log_q};
}

std::size_t ArgmaxEncoder::decode_one(const double* v) const {
  std::size_t pattern = 0;
  for (std::size_t j = 0; j < bits_; ++j) {
    pattern = (pattern << 1) | (v[j] > 0.0 ? 1u : 0u);
  }
  if (pattern >= k_) {
    throw DecodeError(prefix_ + ": sign pattern " + std::to_string(pattern) +
                      " has no category (K=" + std::to_string(k_) + ")");
  }
  return pattern;
}

// ---- Embedding -----------------------------------------------------------------

Embedding::Embedding(ParamStore& store, const std::string& prefix, std::size_t cardinality,
                     bool stochastic, Rng& rng)
    : store_(&store),
      prefix_(prefix),
      k_(cardinality),
      e_(bits_for(cardinality) + 2),
      stochastic_(stochastic) {
  if (stochastic_) {
    store.create(prefix + "/mean", NdArray::normal({k_, e_}, rng, 0.5));
    store.create(prefix + "/logvar", NdArray::full({k_, e_}, -2.0));
  } else {
    store.create(prefix + "/table", NdArray::normal({k_, e_}, rng, 0.5));
  }
}

Encoded Embedding::encode(const std::vector<std::size_t>& x, Rng& rng, bool train_mode) const {
  check_categories(x, k_, prefix_.c_str());
  const std::size_t n = x.size();
  if (!stochastic_) {
    return {gather_rows(store_->get(prefix_ + "/table"), x),
            Tensor::constant(NdArray::zeros({n}))};
  }
  Tensor mu = gather_rows(store_->get(prefix_ + "/mean"), x);
  if (!train_mode) {
    return {mu, Tensor::constant(NdArray::zeros({n}))};
  }
  Tensor lv = gather_rows(store_->get(prefix_ + "/logvar"), x);
  NdArray z0 = NdArray::normal({n, e_}, rng, 1.0);
  Tensor log_q = add(Tensor::constant(base_logpdf(z0)), mul_scalar(sum_trailing(lv, 1), -0.5));
  Tensor v = add(mu, mul(exp(mul_scalar(lv, 0.5)), Tensor::constant(std::move(z0))));
  return {v, log_q};
}

// ---- ContextEncoder ------------------------------------------------------------

ContextEncoder::ContextEncoder(const ContextSpec& spec, ParamStore& store,
                               const std::string& prefix, Rng& rng)
    : spec_(spec), store_(&store), prefix_(prefix) {
  spec_.validate();
  vdq_.resize(spec_.vars.size());
  argmax_.resize(spec_.vars.size());
  embed_.resize(spec_.vars.size());
  for (std::size_t i = 0; i < spec_.vars.size(); ++i) {
    const ContextVar& var = spec_.vars[i];
    const std::string p = prefix + "/" + var.name;
    if (!var.discrete) {
      if (var.standardize) {
        store.create(p + "/mean", NdArray::scalar(0.0), /*trainable=*/false);
        store.create(p + "/std", NdArray::scalar(1.0), /*trainable=*/false);
      }
      continue;
    }
    switch (var.encoder) {
      case EncoderKind::kUniform:
        break;  // no parameters
      case EncoderKind::kVariational:
        vdq_[i] = std::make_unique<VariationalDequantizer>(store, p, var.cardinality, var.mapping,
                                                           rng);
        break;
      case EncoderKind::kArgmax:
        argmax_[i] = std::make_unique<ArgmaxEncoder>(store, p, var.cardinality, rng);
        break;
      case EncoderKind::kEmbedDet:
        embed_[i] = std::make_unique<Embedding>(store, p, var.cardinality, false, rng);
        break;
      case EncoderKind::kEmbedStoch:
        embed_[i] = std::make_unique<Embedding>(store, p, var.cardinality, true, rng);
        break;
    }
  }
}

Encoded ContextEncoder::encode(const NdArray& raw, Rng& rng, bool train_mode) const {
  const Shape& sh = raw.shape();
  if (sh.size() != 2 || sh[1] != spec_.vars.size()) {
    throw DataError("context record batch must be (N, " + std::to_string(spec_.vars.size()) +
                    "), got " + shape_str(sh));
  }
  const std::size_t n = sh[0];
  Tensor v;
  Tensor log_q = Tensor::constant(NdArray::zeros({n}));
  if (spec_.vars.empty()) {
    return {Tensor::constant(NdArray::zeros({n, 0})), log_q};
  }
  for (std::size_t i = 0; i < spec_.vars.size(); ++i) {
    const ContextVar& var = spec_.vars[i];
    Encoded enc;
    if (var.discrete) {
      std::vector<std::size_t> cats(n);
      for (std::size_t s = 0; s < n; ++s) {
        const double raw_v = raw.data()[s * spec_.vars.size() + i];
        if (raw_v < 0.0 || raw_v != std::floor(raw_v) ||
            raw_v >= static_cast<double>(var.cardinality)) {
          throw DataError("context variable '" + var.name + "': value " + std::to_string(raw_v) +
                          " is not a category in [0, " + std::to_string(var.cardinality) + ")");
        }
        cats[s] = static_cast<std::size_t>(raw_v);
      }
      switch (var.encoder) {
        case EncoderKind::kUniform:
          enc = uniform_dequantize(cats, var.cardinality, rng);
          break;
        case EncoderKind::kVariational:
          enc = vdq_[i]->encode(cats, rng);
          break;
        case EncoderKind::kArgmax:
          enc = argmax_[i]->encode(cats, rng);
          break;
        case EncoderKind::kEmbedDet:
        case EncoderKind::kEmbedStoch:
          enc = embed_[i]->encode(cats, rng, train_mode);
          break;
      }
    } else {
      NdArray col = NdArray::zeros({n, 1});
      for (std::size_t s = 0; s < n; ++s) col.data()[s] = raw.data()[s * spec_.vars.size() + i];
      Tensor col_t = Tensor::constant(std::move(col));
      if (var.standardize) {
        const double m = store_->get(prefix_ + "/" + var.name + "/mean").value().data()[0];
        const double sd = store_->get(prefix_ + "/" + var.name + "/std").value().data()[0];
        col_t = mul_scalar(add_scalar(col_t, -m), 1.0 / sd);
      }
      enc = {col_t, Tensor::constant(NdArray::zeros({n}))};
    }
    v = v.defined() ? concat(v, enc.v, 1) : enc.v;
    log_q = add(log_q, enc.log_q);
  }
  return {v, log_q};
}

std::size_t ContextEncoder::decode_var(std::size_t var, const double* v_slice) const {
  const ContextVar& cv = spec_.vars.at(var);
  if (!cv.discrete) throw ConfigError("decode_var: '" + cv.name + "' is continuous");
  switch (cv.encoder) {
    case EncoderKind::kUniform: {
      const double f = std::floor(v_slice[0]);
      if (f < 0.0 || f >= static_cast<double>(cv.cardinality)) {
        throw DecodeError("context variable '" + cv.name + "': value decodes out of range");
      }
      return static_cast<std::size_t>(f);
    }
    case EncoderKind::kVariational:
      return vdq_[var]->decode_one(v_slice);
    case EncoderKind::kArgmax:
      return argmax_[var]->decode_one(v_slice);
    default:
      throw ConfigError("decode_var: '" + cv.name + "' uses a deterministic embedding (no decode)");
  }
}

// ---- DataDequantizer -----------------------------------------------------------

DataDequant data_dequant_from_name(const std::string& s) {
  if (s == "none") return DataDequant::kNone;
  if (s == "uniform") return DataDequant::kUniform;
  if (s == "variational") return DataDequant::kVariational;
  throw ConfigError("unknown data dequantization '" + s + "' (want none | uniform | variational)");
}

const char* data_dequant_name(DataDequant d) {
  switch (d) {
    case DataDequant::kNone: return "none";
    case DataDequant::kUniform: return "uniform";
    case DataDequant::kVariational: return "variational";
  }
  return "?";
}

DataDequantizer::DataDequantizer(DataDequant kind, std::size_t cardinality, ParamStore& store,
                                 const std::string& prefix, Rng& rng)
    : kind_(kind), k_(cardinality) {
  if (kind_ == DataDequant::kVariational) {
    if (k_ < 2) throw ConfigError("variational data dequantization needs data_cardinality >= 2");
    vdq_ = std::make_unique<VariationalDequantizer>(store, prefix, k_, Mapping::kInteger, rng);
  }
}

Encoded DataDequantizer::encode(const NdArray& x, Rng& rng) const {
  const std::size_t n = x.shape().empty() ? 0 : x.shape()[0];
  switch (kind_) {
    case DataDequant::kNone:
      return {Tensor::constant(x), Tensor::constant(NdArray::zeros({n}))};
    case DataDequant::kUniform: {
      NdArray v = x;
      for (std::size_t i = 0; i < v.numel(); ++i) v.data()[i] += rng.uniform();
      return {Tensor::constant(std::move(v)), Tensor::constant(NdArray::zeros({n}))};
    }
    case DataDequant::kVariational: {
      if (x.numel() != n) {
        throw ConfigError("variational data dequantization supports width-1 data, got " +
                          shape_str(x.shape()));
      }
      std::vector<std::size_t> cats(n);
      for (std::size_t s = 0; s < n; ++s) {
        const double raw_v = x.data()[s];
        if (raw_v < 0.0 || raw_v != std::floor(raw_v) || raw_v >= static_cast<double>(k_)) {
          throw DataError("data value " + std::to_string(raw_v) + " is not a category in [0, " +
                          std::to_string(k_) + ")");
        }
        cats[s] = static_cast<std::size_t>(raw_v);
      }
      return vdq_->encode(cats, rng);
    }
  }
  throw ConfigError("unreachable data dequant kind");
}

}  // namespace contextflow
