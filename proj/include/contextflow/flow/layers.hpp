#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/param_store.hpp"
#include "contextflow/core/rng.hpp"
#include "contextflow/core/tensor.hpp"
#include "contextflow/enc/encoders.hpp"
#include "contextflow/flow/mask.hpp"

namespace contextflow {

// How layers consume the encoded context. kAdditive adds CN(c) into the
// generalist pre-activations (adapters attach later, zero-initialized);
// kConcat derives the conditional parameters from the context alone /
// concatenates it into the coupling-net input (trained end-to-end);
// kNone is unconditional.
enum class CondMode { kAdditive, kConcat, kNone };

CondMode cond_mode_from_name(const std::string& s);
const char* cond_mode_name(CondMode m);

struct LayerIo {
  const Encoded* ctx = nullptr;  // encoded context, or null when unconditional
  Rng* rng = nullptr;            // needed only by sampling paths (split prior)
  bool init_actnorm = false;     // data-dependent initialization pass
};

// Direction accounting, the single source of truth: inverse() maps data v to
// latent u and returns log|det du/dv|, the term log p_V accumulates with a
// plus sign; forward() maps u back to v and returns log|det dv/du| (the
// negation). Sampling never scores, so only inverse() logdets ever enter a
// likelihood.
struct LayerResult {
  Tensor output;
  Tensor logdet;       // (N)
  NdArray logdet_ctx;  // (N) value-only share attributable to the context nets
  Tensor split_logp;   // (N), split-prior layers only (undefined elsewhere)
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerResult inverse(const Tensor& x, const LayerIo& io) = 0;
  virtual LayerResult forward(const Tensor& x, const LayerIo& io) = 0;
  virtual Shape out_shape(const Shape& sample_in) const = 0;  // inverse direction
  // Allocates the zero-initialized context net for additive conditioning.
  virtual void attach_specialist(ParamStore& store, const std::string& prefix,
                                 std::size_t ctx_width, std::size_t cn_hidden, Rng& rng);
  virtual std::string describe() const = 0;
};

// Small conditioning net CN: dense(ctx -> hidden, tanh) -> dense(hidden ->
// out). The output layer is zero-initialized, so a freshly attached CN is
// exactly neutral.
class ConditionNet {
 public:
  ConditionNet() = default;
  void allocate(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                std::size_t out, Rng& rng);
  bool allocated() const { return store_ != nullptr; }
  Tensor apply(const Tensor& ctx_v) const;  // (N, in) -> (N, out)
  std::size_t out_width() const { return out_; }

 private:
  ParamStore* store_ = nullptr;
  std::string prefix_;
  std::size_t out_ = 0;
};

class ActNorm : public Layer {
 public:
  // mode kConcat allocates no base parameters (they come from CN alone).
  ActNorm(ParamStore& store, const std::string& base, std::size_t channels, CondMode mode,
          bool data_init);
  LayerResult inverse(const Tensor& x, const LayerIo& io) override;
  LayerResult forward(const Tensor& x, const LayerIo& io) override;
  Shape out_shape(const Shape& s) const override { return s; }
  void attach_specialist(ParamStore& store, const std::string& prefix, std::size_t ctx_width,
                         std::size_t cn_hidden, Rng& rng) override;
  void allocate_condition(ParamStore& store, const std::string& prefix, std::size_t ctx_width,
                          std::size_t cn_hidden, Rng& rng);
  bool initialized() const;
  std::string describe() const override { return "actnorm[" + base_ + "]"; }

 private:
  ParamStore* store_;
  std::string base_;
  std::size_t c_;
  CondMode mode_;
  bool data_init_;
  ConditionNet cn_;
};

class Conv1x1 : public Layer {
 public:
  // conv_context: whether additive mode conditions this layer (off by
  // default; the generator ctx -> C*C dwarfs W_g for small C).
  Conv1x1(ParamStore& store, const std::string& base, std::size_t channels, CondMode mode,
          bool conv_context, Rng& rng);
  LayerResult inverse(const Tensor& x, const LayerIo& io) override;
  LayerResult forward(const Tensor& x, const LayerIo& io) override;
  Shape out_shape(const Shape& s) const override { return s; }
  void attach_specialist(ParamStore& store, const std::string& prefix, std::size_t ctx_width,
                         std::size_t cn_hidden, Rng& rng) override;
  void allocate_condition(ParamStore& store, const std::string& prefix, std::size_t ctx_width,
                          std::size_t cn_hidden, Rng& rng);
  std::string describe() const override { return "conv1x1[" + base_ + "]"; }

 private:
  ParamStore* store_;
  std::string base_;
  std::size_t c_;
  CondMode mode_;
  bool conv_context_;
  ConditionNet cn_;
};

class Coupling : public Layer {
 public:
  // sample_shape: (C[,pos...]) at this point of the stack. In concat mode
  // ctx_width must be known at construction (end-to-end training); hidden
  // width = width_factor * net input width unless hidden_override > 0.
  Coupling(ParamStore& store, const std::string& base, const Shape& sample_shape, MaskSpec mask,
           std::size_t width_factor, CondMode mode, std::size_t ctx_width, std::size_t cn_hidden,
           Rng& rng, std::size_t hidden_override = 0);
  LayerResult inverse(const Tensor& x, const LayerIo& io) override;
  LayerResult forward(const Tensor& x, const LayerIo& io) override;
  Shape out_shape(const Shape& s) const override { return s; }
  void attach_specialist(ParamStore& store, const std::string& prefix, std::size_t ctx_width,
                         std::size_t cn_hidden, Rng& rng) override;
  void allocate_condition(ParamStore& store, const std::string& prefix, std::size_t ctx_width,
                          std::size_t cn_hidden, Rng& rng);
  std::string describe() const override { return "coupling[" + base_ + "]"; }

 private:
  LayerResult apply(const Tensor& x, const LayerIo& io, bool inverse_dir);
  ParamStore* store_;
  std::string base_;
  Shape sample_shape_;
  MaskPlan plan_;
  std::size_t feat_;     // transformed features per position
  std::size_t net_in_;   // coupling-net input width
  std::size_t hidden_;
  CondMode mode_;
  ConditionNet cn_;      // additive: out 2*feat; concat: context embed
};

class Squeeze : public Layer {
 public:
  explicit Squeeze(const Shape& sample_shape);  // throws on odd extents
  LayerResult inverse(const Tensor& x, const LayerIo& io) override;
  LayerResult forward(const Tensor& x, const LayerIo& io) override;
  Shape out_shape(const Shape& s) const override;
  std::string describe() const override { return "squeeze"; }

 private:
  Shape in_shape_, out_shape_;
  std::shared_ptr<std::vector<std::size_t>> fwd_map_;  // out flat -> in flat (per sample)
  std::shared_ptr<std::vector<std::size_t>> inv_map_;
};

class SplitPrior : public Layer {
 public:
  SplitPrior(ParamStore& store, const std::string& base, const Shape& sample_shape, Rng& rng);
  LayerResult inverse(const Tensor& x, const LayerIo& io) override;
  LayerResult forward(const Tensor& x, const LayerIo& io) override;
  Shape out_shape(const Shape& s) const override;
  std::string describe() const override { return "split_prior[" + base_ + "]"; }

 private:
  ParamStore* store_;
  std::string base_;
  std::size_t c_, keep_;
};

class PermuteAxes : public Layer {
 public:
  explicit PermuteAxes(const Shape& sample_shape);  // swaps axes 1 and 2 of the batch
  LayerResult inverse(const Tensor& x, const LayerIo& io) override;
  LayerResult forward(const Tensor& x, const LayerIo& io) override;
  Shape out_shape(const Shape& s) const override;
  std::string describe() const override { return "permute_axes"; }
};

}  // namespace contextflow
