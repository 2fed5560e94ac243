#include "contextflow/flow/model.hpp"

#include <cmath>
#include <sstream>

#include "contextflow/core/error.hpp"
#include "contextflow/core/log.hpp"

namespace contextflow {

Phase phase_from_name(const std::string& s) {
  if (s == "generalist") return Phase::kGeneralist;
  if (s == "specialist") return Phase::kSpecialist;
  throw ConfigError("unknown phase '" + s + "' (want generalist | specialist)");
}

const char* phase_name(Phase p) {
  return p == Phase::kGeneralist ? "generalist" : "specialist";
}

void FlowConfig::validate() const {
  if (input_shape.empty() || input_shape.size() > 3) {
    throw ConfigError("input_shape must have rank 1..3, got " + shape_str(input_shape));
  }
  for (std::size_t e : input_shape) {
    if (e == 0) throw ConfigError("input_shape extents must be positive");
  }
  if (!splits.empty() && splits.size() != blocks) {
    throw ConfigError("splits needs one flag per block (" + std::to_string(blocks) + "), got " +
                      std::to_string(splits.size()));
  }
  if (permute_axes && input_shape.size() != 2) {
    throw ConfigError("permute_axes applies to rank-2 (C, T) inputs only");
  }
  if (coupling_hidden == 0 && width_factor == 0) {
    throw ConfigError("width_factor must be positive (or set coupling_hidden)");
  }
  if (mode != CondMode::kNone && cn_hidden == 0) {
    throw ConfigError("cn_hidden must be positive in conditional modes");
  }
  if (mode == CondMode::kConcat && context.vars.empty()) {
    throw ConfigError("concat mode needs a non-empty context spec");
  }
  if (mode == CondMode::kNone && !context.vars.empty()) {
    throw ConfigError("unconditional mode cannot carry a context spec");
  }
  if (data_dequant == DataDequant::kVariational) {
    if (shape_numel(input_shape) != 1) {
      throw ConfigError("variational data dequantization supports width-1 data, got input_shape " +
                        shape_str(input_shape));
    }
    if (data_cardinality < 2) {
      throw ConfigError("variational data dequantization needs data_cardinality >= 2");
    }
  }
  if (data_dequant == DataDequant::kUniform && data_cardinality == 0) {
    throw ConfigError("data_cardinality must be positive for integer data");
  }
  if (head.classes == 0 || head.components == 0) {
    throw ConfigError("head needs classes >= 1 and components >= 1");
  }
  context.validate();
}

std::string FlowConfig::canonical_str() const {
  std::ostringstream os;
  os << "input_shape=";
  for (std::size_t i = 0; i < input_shape.size(); ++i) os << (i ? "x" : "") << input_shape[i];
  os << ";blocks=" << blocks << ";sub_blocks=" << sub_blocks << ";width_factor=" << width_factor
     << ";coupling_hidden=" << coupling_hidden << ";cn_hidden=" << cn_hidden
     << ";mask=" << mask_name(mask) << ";splits=";
  for (bool b : splits) os << (b ? '1' : '0');
  os << ";mode=" << cond_mode_name(mode) << ";conv_context=" << (conv_context ? 1 : 0)
     << ";permute_axes=" << (permute_axes ? 1 : 0)
     << ";actnorm_data_init=" << (actnorm_data_init ? 1 : 0)
     << ";data_dequant=" << data_dequant_name(data_dequant)
     << ";data_cardinality=" << data_cardinality << ";head=" << head.classes << "x"
     << head.components << ";context={" << context.canonical_str() << "}";
  return os.str();
}

std::uint64_t FlowConfig::digest() const {
  const std::string s = canonical_str();
  return fnv1a(s.data(), s.size());
}

namespace {

bool coupling_possible(MaskKind kind, const Shape& s) {
  switch (kind) {
    case MaskKind::kChannelHalf:
    case MaskKind::kAlternating:
      return s[0] >= 2;
    case MaskKind::kCheckerboard:
      if (s.size() == 2) return s[1] % 2 == 0;
      if (s.size() == 3) return s[2] % 2 == 0;
      return false;
  }
  return false;
}

}  // namespace

FlowModel::FlowModel(FlowConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = Rng(seed).split("build");
  build(rng);
}

void FlowModel::build(Rng& rng) {
  Shape s = cfg_.input_shape;
  std::size_t idx = 0;
  const std::size_t ctx_w = cfg_.context.encoded_width();
  const bool concat = cfg_.mode == CondMode::kConcat;
  bool warned_skip = false;

  auto push = [&](std::unique_ptr<Layer> l, const std::string& kind) {
    layer_names_.push_back("layers/" + std::to_string(idx) + "/" + kind);
    layers_.push_back(std::move(l));
    ++idx;
  };

  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    if (cfg_.permute_axes && s.size() == 2) {
      auto p = std::make_unique<PermuteAxes>(s);
      s = p->out_shape(s);
      push(std::move(p), "permute");
    }
    if (s.size() >= 2) {
      auto sq = std::make_unique<Squeeze>(s);
      s = sq->out_shape(s);
      push(std::move(sq), "squeeze");
    }
    for (std::size_t l = 0; l < cfg_.sub_blocks; ++l) {
      const std::string an_base = "generalist/layers/" + std::to_string(idx) + "/actnorm";
      auto an = std::make_unique<ActNorm>(store_, an_base, s[0], cfg_.mode,
                                          cfg_.actnorm_data_init);
      if (concat) an->allocate_condition(store_, an_base + "/cn", ctx_w, cfg_.cn_hidden, rng);
      push(std::move(an), "actnorm");

      const std::string cv_base = "generalist/layers/" + std::to_string(idx) + "/conv1x1";
      auto cv = std::make_unique<Conv1x1>(store_, cv_base, s[0], cfg_.mode, cfg_.conv_context,
                                          rng);
      if (concat) cv->allocate_condition(store_, cv_base + "/cn", ctx_w, cfg_.cn_hidden, rng);
      push(std::move(cv), "conv1x1");

      if (coupling_possible(cfg_.mask, s)) {
        MaskSpec mask{cfg_.mask, int(l % 2)};
        const std::string cp_base = "generalist/layers/" + std::to_string(idx) + "/coupling";
        push(std::make_unique<Coupling>(store_, cp_base, s, mask, cfg_.width_factor, cfg_.mode,
                                        concat ? ctx_w : 0, cfg_.cn_hidden, rng,
                                        cfg_.coupling_hidden),
             "coupling");
      } else if (!warned_skip) {
        log_info("coupling layers skipped: mask '" + std::string(mask_name(cfg_.mask)) +
                 "' cannot partition sample shape " + shape_str(s));
        warned_skip = true;
      }
    }
    if (!cfg_.splits.empty() && cfg_.splits[b]) {
      const std::string sp_base = "generalist/layers/" + std::to_string(idx) + "/split";
      auto sp = std::make_unique<SplitPrior>(store_, sp_base, s, rng);
      s = sp->out_shape(s);
      push(std::move(sp), "split");
    }
  }

  latent_shape_ = s;
  latent_dim_ = shape_numel(s);
  head_ = std::make_unique<GmmHead>(store_, "generalist/head", cfg_.head.classes,
                                    cfg_.head.components, latent_dim_, rng);
  dequant_ = std::make_unique<DataDequantizer>(cfg_.data_dequant, cfg_.data_cardinality, store_,
                                               "generalist/data_dequant", rng);
  if (concat) {
    enc_ = std::make_unique<ContextEncoder>(cfg_.context, store_, "generalist/enc", rng);
  }
  gen_param_count_ = store_.param_count("generalist");
}

std::string FlowModel::trainable_prefix() const {
  return phase_ == Phase::kSpecialist ? "specialist" : "generalist";
}

bool FlowModel::needs_context() const {
  if (cfg_.mode == CondMode::kConcat) return true;
  return cfg_.mode == CondMode::kAdditive && phase_ == Phase::kSpecialist;
}

Encoded FlowModel::encode_context(const NdArray& ctx, Rng& rng, bool train_mode) const {
  if (!enc_) throw ConfigError("no context encoder in this phase");
  return enc_->encode(ctx, rng, train_mode);
}

bool FlowModel::actnorm_ready() const {
  for (const auto& l : layers_) {
    if (auto* an = dynamic_cast<const ActNorm*>(l.get()); an && !an->initialized()) return false;
  }
  return true;
}

void FlowModel::init_actnorm(const NdArray& data, const NdArray* ctx, Rng& rng) {
  if (actnorm_ready()) return;
  const std::size_t n = data.shape().empty() ? 0 : data.shape()[0];
  if (n == 0) throw DataError("actnorm init needs a non-empty batch");
  Encoded dq = dequant_->encode(data, rng);
  Tensor x = reshape(dq.v, [&] {
    Shape sh{n};
    sh.insert(sh.end(), cfg_.input_shape.begin(), cfg_.input_shape.end());
    return sh;
  }());
  Encoded ctx_enc;
  LayerIo io;
  io.init_actnorm = true;
  if (needs_context()) {
    if (!ctx) throw ConfigError("this model is conditional; actnorm init needs a context batch");
    ctx_enc = encode_context(*ctx, rng, /*train_mode=*/false);
    io.ctx = &ctx_enc;
  } else if (ctx) {
    throw ConfigError("unexpected context: the model is unconditional in this phase");
  }
  for (auto& l : layers_) x = l->inverse(x, io).output;
}

LogProbResult FlowModel::log_prob(const NdArray& data, const NdArray* ctx, Rng& rng,
                                  bool train_mode) {
  const Shape& dsh = data.shape();
  if (dsh.size() != cfg_.input_shape.size() + 1) {
    throw DataError("data batch must be (N, " + shape_str(cfg_.input_shape) + "), got " +
                    shape_str(dsh));
  }
  for (std::size_t i = 0; i < cfg_.input_shape.size(); ++i) {
    if (dsh[i + 1] != cfg_.input_shape[i]) {
      throw DataError("data batch must be (N, " + shape_str(cfg_.input_shape) + "), got " +
                      shape_str(dsh));
    }
  }
  const std::size_t n = dsh[0];
  if (n == 0) throw DataError("empty batch");
  if (cfg_.actnorm_data_init && !actnorm_ready()) {
    throw ConfigError("actnorm layers are uninitialized; run init_actnorm on a batch first");
  }

  Encoded dq = dequant_->encode(data, rng);
  Shape full{n};
  full.insert(full.end(), cfg_.input_shape.begin(), cfg_.input_shape.end());
  Tensor x = reshape(dq.v, full);

  Encoded ctx_enc;
  LayerIo io;
  if (needs_context()) {
    if (!ctx) {
      throw ConfigError(std::string("this model is conditional (") + cond_mode_name(cfg_.mode) +
                        ", " + phase_name(phase_) + " phase); log_prob needs a context batch");
    }
    if (ctx->shape().empty() || ctx->shape()[0] != n) {
      throw DataError("context batch size does not match the data batch");
    }
    ctx_enc = encode_context(*ctx, rng, train_mode);
    io.ctx = &ctx_enc;
  } else if (ctx) {
    throw ConfigError("unexpected context: the model is unconditional in this phase");
  }

  Tensor logdet_acc = Tensor::constant(NdArray::zeros({n}));
  Tensor split_acc = Tensor::constant(NdArray::zeros({n}));
  NdArray ctx_share = NdArray::zeros({n});
  for (auto& l : layers_) {
    LayerResult res = l->inverse(x, io);
    x = res.output;
    logdet_acc = add(logdet_acc, res.logdet);
    if (res.split_logp.defined()) split_acc = add(split_acc, res.split_logp);
    for (std::size_t s = 0; s < n; ++s) ctx_share.data()[s] += res.logdet_ctx.data()[s];
  }

  Tensor u = reshape(x, {n, latent_dim_});
  Tensor head_ll = head_->class_loglik(u);

  Tensor log_q_ctx = ctx_enc.log_q.defined() ? ctx_enc.log_q
                                             : Tensor::constant(NdArray::zeros({n}));
  Tensor shared = sub(add(logdet_acc, split_acc), add(dq.log_q, log_q_ctx));
  const std::size_t m = head_->classes();
  Tensor shared_cols = reshape(repeat_mid(reshape(shared, {n, 1}), m), {n, m});

  LogProbResult res;
  res.class_ll = add(head_ll, shared_cols);
  res.total = head_->total_loglik(res.class_ll);
  res.parts.base_logp = head_->total_loglik(head_ll).value();
  res.parts.logdet_g = NdArray::zeros({n});
  for (std::size_t s = 0; s < n; ++s) {
    res.parts.logdet_g.data()[s] = logdet_acc.value().data()[s] - ctx_share.data()[s];
  }
  res.parts.logdet_c = ctx_share;
  res.parts.split_logp = split_acc.value();
  res.parts.log_q_data = dq.log_q.value();
  res.parts.log_q_ctx = log_q_ctx.value();
  return res;
}

void FlowModel::attach_specialist(Rng& rng) {
  if (cfg_.mode != CondMode::kAdditive) {
    throw ConfigError("attach_specialist applies to additive mode only");
  }
  if (phase_ != Phase::kGeneralist) throw ConfigError("specialist already attached");
  if (cfg_.context.vars.empty()) {
    throw ConfigError("attach_specialist needs a non-empty context spec");
  }
  if (cfg_.actnorm_data_init && !actnorm_ready()) {
    throw ConfigError("initialize actnorms (one init_actnorm pass) before attaching");
  }
  enc_ = std::make_unique<ContextEncoder>(cfg_.context, store_, "specialist/enc", rng);
  head_->attach_specialist(store_, "specialist/head");
  const std::size_t ctx_w = cfg_.context.encoded_width();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->attach_specialist(store_, "specialist/" + layer_names_[i], ctx_w, cfg_.cn_hidden,
                                  rng);
  }
  store_.freeze("generalist");
  gen_fingerprint_ = store_.fingerprint("generalist");
  phase_ = Phase::kSpecialist;
  log_info("specialist attached: " + std::to_string(store_.param_count("specialist")) +
           " trainable parameters, generalist frozen (fingerprint " +
           std::to_string(gen_fingerprint_) + ")");
}

NdArray FlowModel::sample(std::size_t n, int class_idx, const NdArray* ctx, Rng& rng,
                          std::vector<std::size_t>* classes_out) {
  if (n == 0) throw ConfigError("sample needs n >= 1");
  if (cfg_.actnorm_data_init && !actnorm_ready()) {
    throw ConfigError("actnorm layers are uninitialized; train or load before sampling");
  }
  Encoded ctx_enc;
  LayerIo io;
  io.rng = &rng;
  if (needs_context()) {
    if (!ctx) throw ConfigError("this model is conditional; sample needs a context batch");
    if (ctx->shape().empty() || ctx->shape()[0] != n) {
      throw DataError("context batch size does not match n");
    }
    ctx_enc = encode_context(*ctx, rng, /*train_mode=*/false);
    io.ctx = &ctx_enc;
  } else if (ctx) {
    throw ConfigError("unexpected context: the model is unconditional in this phase");
  }

  NdArray u = head_->sample(n, class_idx, rng, classes_out);
  Shape full{n};
  full.insert(full.end(), latent_shape_.begin(), latent_shape_.end());
  Tensor x = Tensor::constant(u.reshaped(full));
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    x = (*it)->forward(x, io).output;
  }
  NdArray out = x.value();
  if (cfg_.data_dequant != DataDequant::kNone) {
    // integer data: floor back onto the grid and clamp into range
    const double hi = double(cfg_.data_cardinality - 1);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      out.data()[i] = std::min(std::max(std::floor(out.data()[i]), 0.0), hi);
    }
  }
  return out;
}

}  // namespace contextflow
