#include "contextflow/data/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "contextflow/core/error.hpp"

namespace contextflow {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ---- Dataset ------------------------------------------------------------------

void Dataset::validate() const {
  const std::size_t n = size();
  const std::size_t ctx_rows = contexts.shape().empty() ? 0 : contexts.extent(0);
  if (contexts.numel() > 0 && ctx_rows != n) {
    throw DataError("context rows (" + std::to_string(ctx_rows) + ") do not match data rows (" +
                    std::to_string(n) + ")");
  }
  if (has_labels && labels.size() != n) {
    throw DataError("label count (" + std::to_string(labels.size()) +
                    ") does not match data rows (" + std::to_string(n) + ")");
  }
  context_spec.validate();
  const std::size_t vars = context_spec.vars.size();
  if (vars > 0) {
    if (contexts.rank() != 2 || contexts.extent(1) != vars) {
      throw DataError("context record width does not match the context spec (" +
                      std::to_string(vars) + " variables)");
    }
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t j = 0; j < vars; ++j) {
        const ContextVar& var = context_spec.vars[j];
        if (!var.discrete) continue;
        const double v = contexts.data()[s * vars + j];
        if (v != std::floor(v) || v < 0.0 || v >= double(var.cardinality)) {
          throw DataError("context variable '" + var.name + "' value " + std::to_string(v) +
                          " outside [0, " + std::to_string(var.cardinality) + ")");
        }
      }
    }
  }
}

namespace {

Dataset take_rows(const Dataset& ds, const std::vector<std::size_t>& idx, Split tag) {
  Dataset out;
  out.context_spec = ds.context_spec;
  out.split = tag;
  out.has_labels = ds.has_labels;
  const std::size_t n = ds.size();
  const std::size_t row = n ? ds.data.numel() / n : 0;
  Shape dsh = ds.data.shape();
  dsh[0] = idx.size();
  out.data = NdArray(dsh);
  const std::size_t vars = ds.contexts.rank() == 2 ? ds.contexts.extent(1) : 0;
  out.contexts = NdArray({idx.size(), vars});
  if (ds.has_labels) out.labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(out.data.data() + i * row, ds.data.data() + idx[i] * row, row * sizeof(double));
    for (std::size_t j = 0; j < vars; ++j) {
      out.contexts.data()[i * vars + j] = ds.contexts.data()[idx[i] * vars + j];
    }
    if (ds.has_labels) out.labels[i] = ds.labels[idx[i]];
  }
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng(seed).split("split");
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  }
  return idx;
}

}  // namespace

Dataset select_rows(const Dataset& ds, const std::vector<std::size_t>& idx) {
  for (std::size_t i : idx) {
    if (i >= ds.size()) throw DataError("select_rows: index " + std::to_string(i) + " out of range");
  }
  return take_rows(ds, idx, ds.split);
}

DatasetSplits split_dataset(const Dataset& ds, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (n < 3) throw DataError("split needs at least 3 rows");
  std::vector<std::size_t> idx = shuffled_indices(n, seed);
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  DatasetSplits out;
  out.train = take_rows(ds, {idx.begin(), idx.begin() + n_train}, Split::kTrain);
  out.val = take_rows(ds, {idx.begin() + n_train, idx.begin() + n_train + n_val}, Split::kVal);
  out.test = take_rows(ds, {idx.begin() + n_train + n_val, idx.end()}, Split::kTest);
  return out;
}

FoldPair kfold_split(const Dataset& ds, std::size_t k, std::size_t fold, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (k < 2 || k > n) throw DataError("k-fold needs 2 <= k <= n");
  if (fold >= k) throw DataError("fold index " + std::to_string(fold) + " out of range (k=" +
                                 std::to_string(k) + ")");
  std::vector<std::size_t> idx = shuffled_indices(n, seed);
  const std::size_t lo = fold * n / k, hi = (fold + 1) * n / k;
  std::vector<std::size_t> test_idx(idx.begin() + lo, idx.begin() + hi);
  std::vector<std::size_t> train_idx(idx.begin(), idx.begin() + lo);
  train_idx.insert(train_idx.end(), idx.begin() + hi, idx.end());
  FoldPair out;
  out.train = take_rows(ds, train_idx, Split::kTrain);
  out.test = take_rows(ds, test_idx, Split::kTest);
  return out;
}

// ---- IDX ------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_all_bytes(const std::string& path) {
  // gzread decompresses .gz and passes plain files through unchanged
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes;
  unsigned char buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + got);
  const bool bad = got < 0;
  gzclose(f);
  if (bad) throw DataError("read error in '" + path + "'");
  return bytes;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void write_all_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  if (ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    const int wrote = gzwrite(f, bytes.data(), unsigned(bytes.size()));
    gzclose(f);
    if (wrote != int(bytes.size())) throw DataError("short write to '" + path + "'");
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw DataError("short write to '" + path + "'");
}

}  // namespace

NdArray load_idx(const std::string& path) {
  std::vector<unsigned char> bytes = read_all_bytes(path);
  if (bytes.size() < 4) {
    throw DataError("'" + path + "' truncated: expected at least 4 header bytes, got " +
                    std::to_string(bytes.size()));
  }
  const std::uint32_t magic = be32(bytes.data());
  std::size_t ndims;
  if (magic == 2049) {
    ndims = 1;
  } else if (magic == 2051) {
    ndims = 3;
  } else {
    throw DataError("'" + path + "' has bad magic " + std::to_string(magic) +
                    " (want 2049 labels or 2051 images) at offset 0");
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) {
    throw DataError("'" + path + "' truncated: expected " + std::to_string(header) +
                    " header bytes, got " + std::to_string(bytes.size()));
  }
  Shape dims(ndims);
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    dims[i] = be32(bytes.data() + 4 + 4 * i);
    total *= dims[i];
  }
  if (bytes.size() != header + total) {
    throw DataError("'" + path + "' truncated: expected " + std::to_string(header + total) +
                    " bytes total, got " + std::to_string(bytes.size()) + " (payload at offset " +
                    std::to_string(header) + ")");
  }
  Shape out_shape = magic == 2051 ? Shape{dims[0], 1, dims[1], dims[2]} : Shape{dims[0]};
  NdArray out(out_shape);
  for (std::size_t i = 0; i < total; ++i) out.data()[i] = double(bytes[header + i]);
  return out;
}

void save_idx(const std::string& path, const NdArray& arr) {
  std::uint32_t magic;
  Shape dims;
  if (arr.rank() == 1) {
    magic = 2049;
    dims = arr.shape();
  } else if (arr.rank() == 3) {
    magic = 2051;
    dims = arr.shape();
  } else if (arr.rank() == 4 && arr.extent(1) == 1) {
    magic = 2051;
    dims = {arr.extent(0), arr.extent(2), arr.extent(3)};
  } else {
    throw DataError("save_idx supports (N), (N,H,W) or (N,1,H,W) arrays, got " +
                    shape_str(arr.shape()));
  }
  std::vector<unsigned char> bytes;
  bytes.reserve(4 + 4 * dims.size() + arr.numel());
  auto push32 = [&](std::uint32_t v) {
    bytes.push_back((v >> 24) & 0xff);
    bytes.push_back((v >> 16) & 0xff);
    bytes.push_back((v >> 8) & 0xff);
    bytes.push_back(v & 0xff);
  };
  push32(magic);
  for (std::size_t d : dims) push32(std::uint32_t(d));
  for (std::size_t i = 0; i < arr.numel(); ++i) {
    const double v = std::min(std::max(std::round(arr.data()[i]), 0.0), 255.0);
    bytes.push_back(static_cast<unsigned char>(v));
  }
  write_all_bytes(path, bytes);
}

// ---- CSV ------------------------------------------------------------------------

std::size_t Csv::col(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw DataError("csv has no column '" + name + "'");
}

Csv load_csv(const std::string& path) {
  std::vector<unsigned char> bytes = read_all_bytes(path);
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, field_open = false;
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_open = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  while (i < n) {
    const char ch = char(bytes[i]);
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < n && bytes[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
      ++i;
    } else if (ch == '"' && field.empty() && !field_open) {
      quoted = true;
      field_open = true;
      ++i;
    } else if (ch == ',') {
      end_field();
      ++i;
    } else if (ch == '\r') {
      ++i;  // tolerate CRLF
    } else if (ch == '\n') {
      end_record();
      ++i;
    } else {
      field.push_back(ch);
      field_open = true;
      ++i;
    }
  }
  if (quoted) throw DataError("'" + path + "': unterminated quoted field");
  if (field_open || !record.empty()) end_record();
  if (records.empty()) throw DataError("'" + path + "': empty csv (header required)");
  Csv out;
  out.header = std::move(records.front());
  const std::size_t width = out.header.size();
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != width) {
      throw DataError("'" + path + "': row " + std::to_string(r) + " has " +
                      std::to_string(records[r].size()) + " fields, header has " +
                      std::to_string(width));
    }
    out.rows.push_back(std::move(records[r]));
  }
  return out;
}

namespace {

void append_csv_field(std::string& out, const std::string& f) {
  if (f.find_first_of(",\"\n\r") == std::string::npos) {
    out += f;
    return;
  }
  out.push_back('"');
  for (char ch : f) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
}

}  // namespace

void save_csv(const std::string& path, const Csv& csv) {
  std::string text;
  auto append_row = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) text.push_back(',');
      append_csv_field(text, row[i]);
    }
    text.push_back('\n');
  };
  append_row(csv.header);
  for (const auto& row : csv.rows) {
    if (row.size() != csv.header.size()) {
      throw DataError("csv row width " + std::to_string(row.size()) + " does not match header");
    }
    append_row(row);
  }
  write_all_bytes(path, {text.begin(), text.end()});
}

// ---- rotation ---------------------------------------------------------------------

NdArray rotate_image(const NdArray& img, std::size_t h, std::size_t w, double angle_deg) {
  if (img.numel() != h * w) throw DataError("rotate_image: extent mismatch");
  const double rad = angle_deg * kPi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cy = (double(h) - 1.0) / 2.0, cx = (double(w) - 1.0) / 2.0;
  NdArray out({h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // sample the source at the inverse-rotated position
      const double dx = double(x) - cx, dy = double(y) - cy;
      const double xs = c * dx + s * dy + cx;
      const double ys = -s * dx + c * dy + cy;
      const double xf = std::floor(xs), yf = std::floor(ys);
      const double fx = xs - xf, fy = ys - yf;
      const long x0 = long(xf), y0 = long(yf);
      auto pix = [&](long yy, long xx) -> double {
        if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) return 0.0;
        return img.data()[std::size_t(yy) * w + std::size_t(xx)];
      };
      out.data()[y * w + x] = pix(y0, x0) * (1.0 - fy) * (1.0 - fx) +
                              pix(y0, x0 + 1) * (1.0 - fy) * fx +
                              pix(y0 + 1, x0) * fy * (1.0 - fx) + pix(y0 + 1, x0 + 1) * fy * fx;
    }
  }
  return out;
}

namespace {

struct ImageView {
  std::size_t n, h, w;
  Shape full;  // original shape
};

ImageView image_view(const NdArray& images) {
  if (images.rank() == 4 && images.extent(1) == 1) {
    return {images.extent(0), images.extent(2), images.extent(3), images.shape()};
  }
  if (images.rank() == 3) {
    return {images.extent(0), images.extent(1), images.extent(2), images.shape()};
  }
  throw DataError("expected (N,1,H,W) or (N,H,W) images, got " + shape_str(images.shape()));
}

ContextSpec rotation_spec(std::size_t n_rot) {
  ContextSpec spec;
  ContextVar var;
  var.name = "rotation";
  var.discrete = true;
  var.cardinality = n_rot;
  var.mapping = Mapping::kInteger;
  var.encoder = EncoderKind::kEmbedDet;
  spec.vars.push_back(var);
  return spec;
}

}  // namespace

Dataset rotate_context(const NdArray& images, std::size_t n_rot, Rng& rng) {
  if (n_rot == 0) throw DataError("rotate_context needs n_rot >= 1");
  const ImageView v = image_view(images);
  if (v.h != v.w) throw DataError("rotate_context needs square images");
  Dataset out;
  out.data = NdArray(v.full);
  out.contexts = NdArray({v.n, 1});
  out.context_spec = rotation_spec(n_rot);
  const std::size_t hw = v.h * v.w;
  for (std::size_t i = 0; i < v.n; ++i) {
    const std::size_t c = rng.uniform_int(n_rot);
    out.contexts.data()[i] = double(c);
    NdArray img({v.h, v.w});
    std::memcpy(img.data(), images.data() + i * hw, hw * sizeof(double));
    NdArray rot = rotate_image(img, v.h, v.w, 360.0 * double(c) / double(n_rot));
    std::memcpy(out.data.data() + i * hw, rot.data(), hw * sizeof(double));
  }
  return out;
}

// ---- corruption ---------------------------------------------------------------------

namespace {

NdArray box_blur3(const NdArray& img, std::size_t h, std::size_t w) {
  NdArray out({h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      int cnt = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = long(y) + dy, xx = long(x) + dx;
          if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) continue;
          acc += img.data()[std::size_t(yy) * w + std::size_t(xx)];
          ++cnt;
        }
      }
      out.data()[y * w + x] = acc / double(cnt);
    }
  }
  return out;
}

}  // namespace

NdArray apply_corruption(const NdArray& images, std::size_t type, std::size_t severity,
                         Rng& rng) {
  if (type < 1 || type > 15) {
    throw DataError("corruption type " + std::to_string(type) + " outside the valid range 1..15");
  }
  if (severity < 1 || severity > 5) {
    throw DataError("corruption severity " + std::to_string(severity) +
                    " outside the valid range 1..5");
  }
  const ImageView v = image_view(images);
  const std::size_t hw = v.h * v.w;
  NdArray out(v.full);
  // three stand-in families cycled over the type index; the per-type factor
  // keeps types distinguishable, severity scales the magnitude
  const std::size_t family = (type - 1) % 3;
  const double type_scale = 1.0 + 0.25 * double((type - 1) / 3);
  for (std::size_t i = 0; i < v.n; ++i) {
    NdArray img({v.h, v.w});
    std::memcpy(img.data(), images.data() + i * hw, hw * sizeof(double));
    NdArray res({v.h, v.w});
    if (family == 0) {
      const double sigma = 4.0 * double(severity) * type_scale;
      for (std::size_t j = 0; j < hw; ++j) res.data()[j] = img.data()[j] + sigma * rng.normal();
    } else if (family == 1) {
      NdArray blur = box_blur3(img, v.h, v.w);
      const double wmix = std::min(0.16 * double(severity) * type_scale, 0.95);
      for (std::size_t j = 0; j < hw; ++j) {
        res.data()[j] = (1.0 - wmix) * img.data()[j] + wmix * blur.data()[j];
      }
    } else {
      double mean = 0.0;
      for (std::size_t j = 0; j < hw; ++j) mean += img.data()[j];
      mean /= double(hw);
      const double f = std::max(1.0 - 0.13 * double(severity) * type_scale, 0.05);
      for (std::size_t j = 0; j < hw; ++j) res.data()[j] = mean + (img.data()[j] - mean) * f;
    }
    for (std::size_t j = 0; j < hw; ++j) {
      out.data()[i * hw + j] = std::min(std::max(std::round(res.data()[j]), 0.0), 255.0);
    }
  }
  return out;
}

Dataset corrupt_context(const NdArray& images, std::size_t types, std::size_t severities,
                        Rng& rng) {
  if (types < 1 || types > 15 || severities < 1 || severities > 5) {
    throw DataError("corrupt_context supports 1..15 types and 1..5 severities");
  }
  const ImageView v = image_view(images);
  const std::size_t hw = v.h * v.w;
  Dataset out;
  out.data = NdArray(v.full);
  out.contexts = NdArray({v.n, 2});
  ContextVar tvar;
  tvar.name = "type";
  tvar.discrete = true;
  tvar.cardinality = types + 1;  // raw values 1..types
  tvar.mapping = Mapping::kInteger;
  tvar.encoder = EncoderKind::kEmbedDet;
  ContextVar svar = tvar;
  svar.name = "severity";
  svar.cardinality = severities + 1;  // raw values 1..severities
  out.context_spec.vars = {tvar, svar};
  NdArray one({1, v.h, v.w});
  for (std::size_t i = 0; i < v.n; ++i) {
    const std::size_t type = 1 + rng.uniform_int(types);
    const std::size_t severity = 1 + rng.uniform_int(severities);
    out.contexts.data()[i * 2] = double(type);
    out.contexts.data()[i * 2 + 1] = double(severity);
    std::memcpy(one.data(), images.data() + i * hw, hw * sizeof(double));
    NdArray res = apply_corruption(one, type, severity, rng);
    std::memcpy(out.data.data() + i * hw, res.data(), hw * sizeof(double));
  }
  return out;
}

// ---- sliding windows ------------------------------------------------------------------

NdArray sliding_windows(const NdArray& series, std::size_t w) {
  if (series.rank() != 2) throw DataError("sliding_windows expects (T, D) series");
  if (w == 0) throw DataError("window size must be >= 1");
  const std::size_t t_len = series.extent(0), d = series.extent(1);
  if (t_len == 0) throw DataError("empty series");
  NdArray out({t_len, w, d});
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < w; ++j) {
      // window t covers [t-w+1 .. t], left-padded by replicating point 0
      const long src = std::max(long(t) - long(w) + 1 + long(j), 0L);
      std::memcpy(out.data() + (t * w + j) * d, series.data() + std::size_t(src) * d,
                  d * sizeof(double));
    }
  }
  return out;
}

// ---- two moons ------------------------------------------------------------------------

Dataset two_moons_context(std::size_t n, std::size_t n_contexts, Rng& rng) {
  if (n_contexts == 0) throw DataError("two_moons_context needs n_contexts >= 1");
  Dataset out;
  out.data = NdArray({n, 2});
  out.contexts = NdArray({n, 1});
  out.labels.resize(n);
  out.has_labels = true;
  out.context_spec = rotation_spec(n_contexts);
  out.context_spec.vars[0].name = "rotation";
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t moon = rng.uniform_int(2);
    const double t = rng.uniform() * kPi;
    // centered moons so context rotation mixes rather than translates
    double x = moon == 0 ? std::cos(t) - 0.5 : 0.5 - std::cos(t);
    double y = moon == 0 ? std::sin(t) - 0.25 : 0.25 - std::sin(t);
    x += 0.08 * rng.normal();
    y += 0.08 * rng.normal();
    const std::size_t c = rng.uniform_int(n_contexts);
    const double a = 2.0 * kPi * double(c) / double(n_contexts);
    const double ca = std::cos(a), sa = std::sin(a);
    out.data.data()[i * 2] = ca * x - sa * y;
    out.data.data()[i * 2 + 1] = sa * x + ca * y;
    out.contexts.data()[i] = double(c);
    out.labels[i] = moon;
  }
  return out;
}

// ---- synthetic glyphs --------------------------------------------------------------------

namespace {

struct GlyphBlob {
  double px, py, sigma, amp;
};

// fixed per-class smooth template, independent of the caller's stream
std::vector<GlyphBlob> glyph_template(std::size_t cls, double radius) {
  Rng rng = Rng(0xD161F).split(cls * 2654435761ULL + 17);
  std::vector<GlyphBlob> blobs(6);
  for (auto& b : blobs) {
    const double ang = rng.uniform() * 2.0 * kPi;
    const double r = radius * std::sqrt(rng.uniform());
    b.px = r * std::cos(ang);
    b.py = r * std::sin(ang);
    b.sigma = radius * (0.22 + 0.18 * rng.uniform());
    b.amp = 140.0 + 115.0 * rng.uniform();
  }
  return blobs;
}

}  // namespace

Dataset synthetic_digits(std::size_t n, std::size_t n_rot, std::size_t img, Rng& rng) {
  if (n_rot == 0 || img < 4) throw DataError("synthetic_digits needs n_rot >= 1 and img >= 4");
  constexpr std::size_t kClasses = 10;
  const double radius = 0.42 * double(img);
  std::vector<std::vector<GlyphBlob>> templates(kClasses);
  for (std::size_t k = 0; k < kClasses; ++k) templates[k] = glyph_template(k, radius);

  Dataset out;
  out.data = NdArray({n, 1, img, img});
  out.contexts = NdArray({n, 1});
  out.labels.resize(n);
  out.has_labels = true;
  out.context_spec = rotation_spec(n_rot);
  const double center = (double(img) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = rng.uniform_int(kClasses);
    const std::size_t c = rng.uniform_int(n_rot);
    const double ang = 2.0 * kPi * double(c) / double(n_rot);
    const double ca = std::cos(ang), sa = std::sin(ang);
    const double jx = 0.35 * rng.normal(), jy = 0.35 * rng.normal();
    for (std::size_t y = 0; y < img; ++y) {
      for (std::size_t x = 0; x < img; ++x) {
        // rotate the field itself: sample the template at the unrotated spot
        const double dx = double(x) - center - jx, dy = double(y) - center - jy;
        const double ux = ca * dx + sa * dy, uy = -sa * dx + ca * dy;
        double v = 0.0;
        for (const GlyphBlob& b : templates[cls]) {
          const double qx = ux - b.px, qy = uy - b.py;
          v += b.amp * std::exp(-(qx * qx + qy * qy) / (2.0 * b.sigma * b.sigma));
        }
        v += 7.0 * rng.normal();
        out.data.data()[(i * img + y) * img + x] = std::min(std::max(std::round(v), 0.0), 255.0);
      }
    }
    out.contexts.data()[i] = double(c);
    out.labels[i] = cls;
  }
  return out;
}

}  // namespace contextflow
