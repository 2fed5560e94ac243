#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/param_store.hpp"
#include "contextflow/core/rng.hpp"
#include "contextflow/core/tensor.hpp"
#include "contextflow/enc/context_spec.hpp"
#include "contextflow/enc/encoders.hpp"
#include "contextflow/flow/gmm_head.hpp"
#include "contextflow/flow/layers.hpp"

namespace contextflow {

// Lifecycle: the generalist is trained unconditionally (additive mode),
// then attach_specialist() bolts zero-initialized context nets plus a head
// copy on top and freezes everything generalist. Concat mode is
// single-phase: conditional from the first step, everything trainable.
enum class Phase { kGeneralist, kSpecialist };

Phase phase_from_name(const std::string& s);
const char* phase_name(Phase p);

struct HeadConfig {
  std::size_t classes = 1;
  std::size_t components = 8;
};

struct FlowConfig {
  Shape input_shape;             // per-sample shape: (D) | (C,T) | (C,H,W)
  std::size_t blocks = 1;
  std::size_t sub_blocks = 1;    // (actnorm, conv1x1, coupling) triples per block
  std::size_t width_factor = 4;  // coupling hidden = width_factor * net input
  std::size_t coupling_hidden = 0;  // explicit override, 0 = use width_factor
  std::size_t cn_hidden = 8;     // context-net hidden width
  MaskKind mask = MaskKind::kChannelHalf;
  std::vector<bool> splits;      // per-block split-prior flags (empty = none)
  CondMode mode = CondMode::kAdditive;
  bool conv_context = false;     // additive mode: also condition the 1x1 convs
  bool permute_axes = false;     // rank-2 inputs: swap (C,T) at each block start
  bool actnorm_data_init = true;
  DataDequant data_dequant = DataDequant::kUniform;
  std::size_t data_cardinality = 256;
  ContextSpec context;
  HeadConfig head;

  void validate() const;
  std::string canonical_str() const;  // stable textual form, feeds digest()
  std::uint64_t digest() const;
};

// Value-level decomposition of the per-sample total, for reports. The
// generalist/context logdet split follows the additive decomposition; in
// concat mode everything lands in logdet_g.
struct LogProbParts {
  NdArray base_logp;   // head log p(u) with a uniform class prior
  NdArray logdet_g;
  NdArray logdet_c;
  NdArray split_logp;
  NdArray log_q_data;
  NdArray log_q_ctx;
};

struct LogProbResult {
  Tensor class_ll;  // (N, M) per-class conditional log-likelihood (ELBO form)
  Tensor total;     // (N) lse over classes - log M
  LogProbParts parts;
};

class FlowModel {
 public:
  FlowModel(FlowConfig cfg, std::uint64_t seed);

  const FlowConfig& config() const { return cfg_; }
  Phase phase() const { return phase_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  std::size_t latent_dim() const { return latent_dim_; }
  const Shape& latent_shape() const { return latent_shape_; }
  std::size_t layer_count() const { return layers_.size(); }
  GmmHead& head() { return *head_; }

  // Namespace whose parameters train in the current phase.
  std::string trainable_prefix() const;
  std::size_t generalist_param_count() const { return gen_param_count_; }
  std::uint64_t generalist_fingerprint() const { return gen_fingerprint_; }

  // Whether log_prob/sample must receive a context batch right now.
  bool needs_context() const;

  // One data-dependent initialization pass for the actnorm layers.
  void init_actnorm(const NdArray& data, const NdArray* ctx, Rng& rng);
  bool actnorm_ready() const;

  LogProbResult log_prob(const NdArray& data, const NdArray* ctx, Rng& rng, bool train_mode);

  // Additive mode only: allocate specialist context nets + head copy,
  // freeze the generalist, record its fingerprint, switch phase.
  void attach_specialist(Rng& rng);

  NdArray sample(std::size_t n, int class_idx, const NdArray* ctx, Rng& rng,
                 std::vector<std::size_t>* classes_out = nullptr);

 private:
  void build(Rng& rng);
  Encoded encode_context(const NdArray& ctx, Rng& rng, bool train_mode) const;

  FlowConfig cfg_;
  ParamStore store_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<std::string> layer_names_;  // "layers/<idx>/<kind>"
  std::unique_ptr<GmmHead> head_;
  std::unique_ptr<DataDequantizer> dequant_;
  std::unique_ptr<ContextEncoder> enc_;   // specialist (additive) or build-time (concat)
  Shape latent_shape_;
  std::size_t latent_dim_ = 0;
  Phase phase_ = Phase::kGeneralist;
  std::size_t gen_param_count_ = 0;
  std::uint64_t gen_fingerprint_ = 0;
};

}  // namespace contextflow
