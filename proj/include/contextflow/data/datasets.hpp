#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/rng.hpp"
#include "contextflow/enc/context_spec.hpp"

namespace contextflow {

enum class Split { kTrain, kVal, kTest };

// One batch of examples: data rows, raw context records (N, num_vars) and
// optional class labels, all row-aligned. context_spec describes the record
// columns; generators fill it with their default encoder choices (configs
// may override the encoder kinds downstream).
struct Dataset {
  NdArray data;
  NdArray contexts;  // (N, num_vars); (N, 0) when there is no context
  std::vector<std::size_t> labels;
  bool has_labels = false;
  ContextSpec context_spec;
  Split split = Split::kTrain;

  std::size_t size() const { return data.shape().empty() ? 0 : data.extent(0); }
  void validate() const;  // row alignment + context values against the spec
};

// Row subset (batching, custom splits); keeps spec and split tag.
Dataset select_rows(const Dataset& ds, const std::vector<std::size_t>& idx);

struct DatasetSplits {
  Dataset train, val, test;
};

// Seeded-shuffle split, 80/10/10.
DatasetSplits split_dataset(const Dataset& ds, std::uint64_t seed);

// k-fold split: fold `fold` (0-based) becomes the held-out part.
struct FoldPair {
  Dataset train, test;
};
FoldPair kfold_split(const Dataset& ds, std::size_t k, std::size_t fold, std::uint64_t seed);

// ---- IDX image/label files --------------------------------------------------
// Big-endian magic + dims + uint8 payload. Magic 2051 (images) decodes to
// (N, 1, H, W) doubles in [0, 256); magic 2049 (labels) to a 1-D array.
// Paths ending in .gz are compressed; reading handles both transparently.
NdArray load_idx(const std::string& path);

// rank-1 arrays save as labels (magic 2049); (N,H,W) or (N,1,H,W) as images
// (magic 2051). Values are rounded and clamped to bytes.
void save_idx(const std::string& path, const NdArray& arr);

// ---- CSV --------------------------------------------------------------------
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const;  // throws DataError if absent
};

Csv load_csv(const std::string& path);  // header required; RFC quoting; .gz ok
void save_csv(const std::string& path, const Csv& csv);

// ---- benchmark generators ----------------------------------------------------

// Rotates each image by c * 360/n_rot degrees (c uniform per image),
// bilinear about the center, zero fill. images: (N, 1, H, W) or (N, H, W),
// square. Context record: {rotation: c}.
Dataset rotate_context(const NdArray& images, std::size_t n_rot, Rng& rng);

// Single-image rotation helper (exposed for tests). angle in degrees.
NdArray rotate_image(const NdArray& img, std::size_t h, std::size_t w, double angle_deg);

// Desk-scale corruption stand-in: per image draws type in {1..types} and
// severity in {1..severities}; the perturbation magnitude grows with
// severity within each type. Context record: {type, severity}.
Dataset corrupt_context(const NdArray& images, std::size_t types, std::size_t severities,
                        Rng& rng);

// Applies one fixed (type, severity) corruption to a batch (exposed so the
// severity-monotonicity property can sweep severities over a fixed batch).
NdArray apply_corruption(const NdArray& images, std::size_t type, std::size_t severity, Rng& rng);

// Window t = points [t-w+1 .. t] with left replication of point 0.
// series (T, D) -> (T, w, D); per-point labels stay aligned by index.
NdArray sliding_windows(const NdArray& series, std::size_t w);

// Two-moons samples rotated by c * 360/n_contexts degrees, c uniform per
// sample; labels are the moon index, context record {rotation: c}.
Dataset two_moons_context(std::size_t n, std::size_t n_contexts, Rng& rng);

// Synthetic 10-class glyph benchmark: per-class smooth template fields
// rendered at img x img, rotated by c * 360/n_rot degrees (field-level,
// exact), small jitter + pixel noise, quantized to [0, 256). Labels are
// the class, context record {rotation: c}.
Dataset synthetic_digits(std::size_t n, std::size_t n_rot, std::size_t img, Rng& rng);

}  // namespace contextflow
