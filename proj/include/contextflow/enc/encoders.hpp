#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/param_store.hpp"
#include "contextflow/core/rng.hpp"
#include "contextflow/core/tensor.hpp"
#include "contextflow/enc/context_spec.hpp"

namespace contextflow {

// Result of lifting discrete/raw values into continuous space. log_q is the
// per-sample density of the stochastic part (0 for deterministic encoders);
// the model subtracts it from the total, turning log-likelihoods into ELBOs.
struct Encoded {
  Tensor v;      // (N, W)
  Tensor log_q;  // (N)
};

// x + U[0,1) noise per entry; log_q = 0. floor() is the exact right inverse.
Encoded uniform_dequantize(const std::vector<std::size_t>& x, std::size_t cardinality, Rng& rng);

// Learnable dequantizer q(eps | x) built from a squashed Gaussian passed
// through a small per-category conditional flow; v = target(x) + eps with
// eps in (0,1) per dim. Used both for context variables and for 1-D
// categorical data. Parameters live in the given store under `prefix`.
class VariationalDequantizer {
 public:
  VariationalDequantizer(ParamStore& store, const std::string& prefix, std::size_t cardinality,
                         Mapping mapping, Rng& rng);

  Encoded encode(const std::vector<std::size_t>& x, Rng& rng) const;
  std::size_t decode_one(const double* v) const;  // floor (integer) / argmax (one-hot)
  std::size_t width() const { return dim_; }

 private:
  ParamStore* store_;
  std::string prefix_;
  std::size_t k_;
  Mapping mapping_;
  std::size_t dim_;     // 1 (integer) or K (one-hot)
  std::size_t hidden_;  // coupling net width (dim_ >= 2 only)
};

// Sign-pattern encoder: v_j = sign(bit_j) * softplus(z'_j) over
// ceil(log2 K) dims, bits MSB-first; decode reads the sign pattern and
// refuses patterns >= K.
class ArgmaxEncoder {
 public:
  ArgmaxEncoder(ParamStore& store, const std::string& prefix, std::size_t cardinality, Rng& rng);

  Encoded encode(const std::vector<std::size_t>& x, Rng& rng) const;
  std::size_t decode_one(const double* v) const;  // throws DecodeError on pattern >= K
  std::size_t width() const { return bits_; }

 private:
  ParamStore* store_;
  std::string prefix_;
  std::size_t k_;
  std::size_t bits_;
};

// Table lookup, E = ceil(log2 K) + 2 dims. Deterministic kind always returns
// the table row with log_q = 0; stochastic kind samples N(mu[x], sigma^2[x])
// in train mode (log_q = Gaussian logpdf) and returns mu[x] in eval mode.
class Embedding {
 public:
  Embedding(ParamStore& store, const std::string& prefix, std::size_t cardinality, bool stochastic,
            Rng& rng);

  Encoded encode(const std::vector<std::size_t>& x, Rng& rng, bool train_mode) const;
  std::size_t width() const { return e_; }

 private:
  ParamStore* store_;
  std::string prefix_;
  std::size_t k_;
  std::size_t e_;
  bool stochastic_;
};

// Encodes a raw context record batch (N, num_vars) per a ContextSpec:
// per-variable encodings concatenated, log_q summed. Continuous variables
// pass through optional standardization buffers (mean/std, persisted).
class ContextEncoder {
 public:
  ContextEncoder(const ContextSpec& spec, ParamStore& store, const std::string& prefix, Rng& rng);

  Encoded encode(const NdArray& raw, Rng& rng, bool train_mode) const;
  std::size_t width() const { return spec_.encoded_width(); }
  const ContextSpec& spec() const { return spec_; }

  // Category index for variable `var` recovered from its encoded slice
  // (surjection right-inverse; deterministic encoders have no decode).
  std::size_t decode_var(std::size_t var, const double* v_slice) const;

 private:
  ContextSpec spec_;
  ParamStore* store_;
  std::string prefix_;
  std::vector<std::unique_ptr<VariationalDequantizer>> vdq_;  // per var or null
  std::vector<std::unique_ptr<ArgmaxEncoder>> argmax_;
  std::vector<std::unique_ptr<Embedding>> embed_;
};

enum class DataDequant { kNone, kUniform, kVariational };

DataDequant data_dequant_from_name(const std::string& s);
const char* data_dequant_name(DataDequant d);

// Lifts the raw data batch. kNone passes through (continuous data);
// kUniform adds U[0,1) noise with log_q = 0; kVariational trains a
// q(eps|x) for width-1 integer data with known cardinality.
class DataDequantizer {
 public:
  DataDequantizer(DataDequant kind, std::size_t cardinality, ParamStore& store,
                  const std::string& prefix, Rng& rng);

  Encoded encode(const NdArray& x, Rng& rng) const;

 private:
  DataDequant kind_;
  std::size_t k_;
  std::unique_ptr<VariationalDequantizer> vdq_;
};

}  // namespace contextflow
