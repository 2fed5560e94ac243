#include "contextflow/cli/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

#include "contextflow/core/error.hpp"

namespace contextflow {

using nlohmann::json;

namespace {

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + join_path(path, key) + "'");
    }
  }
}

const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

double get_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError("key '" + path + "' must be a number");
  return j.get<double>();
}

std::size_t get_size(const json& j, const std::string& path) {
  const double v = get_number(j, path);
  if (v < 0 || v != std::floor(v)) {
    throw ConfigError("key '" + path + "' must be a non-negative integer");
  }
  return std::size_t(v);
}

std::uint64_t get_u64(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  return std::uint64_t(get_size(j, path));
}

bool get_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError("key '" + path + "' must be a boolean");
  return j.get<bool>();
}

std::string get_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError("key '" + path + "' must be a string");
  return j.get<std::string>();
}

std::vector<std::string> get_string_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("key '" + path + "' must be an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    out.push_back(get_string(j[i], path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

ContextSpec parse_context(const json& j, const std::string& path) {
  ContextSpec spec;
  if (!j.is_array()) throw ConfigError("key '" + path + "' must be an array of variable objects");
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string vpath = path + "[" + std::to_string(i) + "]";
    const json& vj = j[i];
    if (!vj.is_object()) throw ConfigError("key '" + vpath + "' must be an object");
    check_keys(vj, vpath, {"name", "discrete", "cardinality", "mapping", "encoder", "standardize"});
    ContextVar var;
    if (const json* f = find(vj, "name")) var.name = get_string(*f, vpath + ".name");
    if (var.name.empty()) throw ConfigError("key '" + vpath + ".name' is required");
    if (const json* f = find(vj, "discrete")) var.discrete = get_bool(*f, vpath + ".discrete");
    if (const json* f = find(vj, "cardinality")) {
      var.cardinality = get_size(*f, vpath + ".cardinality");
    }
    if (const json* f = find(vj, "mapping")) {
      var.mapping = mapping_from_name(get_string(*f, vpath + ".mapping"));
    }
    if (const json* f = find(vj, "encoder")) {
      var.encoder = encoder_from_name(get_string(*f, vpath + ".encoder"));
    }
    if (const json* f = find(vj, "standardize")) {
      var.standardize = get_bool(*f, vpath + ".standardize");
    }
    spec.vars.push_back(std::move(var));
  }
  return spec;
}

FlowConfig parse_model(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("key '" + path + "' must be an object");
  check_keys(j, path,
             {"input_shape", "blocks", "sub_blocks", "width_factor", "coupling_hidden",
              "cn_hidden", "mask", "splits", "mode", "conv_context", "permute_axes",
              "actnorm_data_init", "data_dequant", "data_cardinality", "head", "context"});
  FlowConfig cfg;
  const json* shape = find(j, "input_shape");
  if (!shape || !shape->is_array() || shape->empty()) {
    throw ConfigError("key '" + path + ".input_shape' must be a non-empty array");
  }
  for (std::size_t i = 0; i < shape->size(); ++i) {
    cfg.input_shape.push_back(
        get_size((*shape)[i], path + ".input_shape[" + std::to_string(i) + "]"));
  }
  if (const json* f = find(j, "blocks")) cfg.blocks = get_size(*f, path + ".blocks");
  if (const json* f = find(j, "sub_blocks")) cfg.sub_blocks = get_size(*f, path + ".sub_blocks");
  if (const json* f = find(j, "width_factor")) {
    cfg.width_factor = get_size(*f, path + ".width_factor");
  }
  if (const json* f = find(j, "coupling_hidden")) {
    cfg.coupling_hidden = get_size(*f, path + ".coupling_hidden");
  }
  if (const json* f = find(j, "cn_hidden")) cfg.cn_hidden = get_size(*f, path + ".cn_hidden");
  if (const json* f = find(j, "mask")) cfg.mask = mask_from_name(get_string(*f, path + ".mask"));
  if (const json* f = find(j, "splits")) {
    if (!f->is_array()) throw ConfigError("key '" + path + ".splits' must be an array of booleans");
    for (std::size_t i = 0; i < f->size(); ++i) {
      cfg.splits.push_back(get_bool((*f)[i], path + ".splits[" + std::to_string(i) + "]"));
    }
  }
  if (const json* f = find(j, "mode")) {
    cfg.mode = cond_mode_from_name(get_string(*f, path + ".mode"));
  }
  if (const json* f = find(j, "conv_context")) {
    cfg.conv_context = get_bool(*f, path + ".conv_context");
  }
  if (const json* f = find(j, "permute_axes")) {
    cfg.permute_axes = get_bool(*f, path + ".permute_axes");
  }
  if (const json* f = find(j, "actnorm_data_init")) {
    cfg.actnorm_data_init = get_bool(*f, path + ".actnorm_data_init");
  }
  if (const json* f = find(j, "data_dequant")) {
    cfg.data_dequant = data_dequant_from_name(get_string(*f, path + ".data_dequant"));
  }
  if (const json* f = find(j, "data_cardinality")) {
    cfg.data_cardinality = get_size(*f, path + ".data_cardinality");
  }
  if (const json* f = find(j, "head")) {
    if (!f->is_object()) throw ConfigError("key '" + path + ".head' must be an object");
    check_keys(*f, path + ".head", {"classes", "components"});
    if (const json* g = find(*f, "classes")) {
      cfg.head.classes = get_size(*g, path + ".head.classes");
    }
    if (const json* g = find(*f, "components")) {
      cfg.head.components = get_size(*g, path + ".head.components");
    }
  }
  if (const json* f = find(j, "context")) cfg.context = parse_context(*f, path + ".context");
  return cfg;
}

TrainConfig parse_train(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("key '" + path + "' must be an object");
  check_keys(j, path,
             {"batch_size", "lr_init", "lr_warm_start", "warmup_epochs", "decay_factor",
              "decay_every", "total_epochs", "weight_decay", "alpha", "seed"});
  TrainConfig cfg;
  if (const json* f = find(j, "batch_size")) cfg.batch_size = get_size(*f, path + ".batch_size");
  if (const json* f = find(j, "lr_init")) cfg.lr_init = get_number(*f, path + ".lr_init");
  if (const json* f = find(j, "lr_warm_start")) {
    cfg.lr_warm_start = get_number(*f, path + ".lr_warm_start");
  }
  if (const json* f = find(j, "warmup_epochs")) {
    cfg.warmup_epochs = get_size(*f, path + ".warmup_epochs");
  }
  if (const json* f = find(j, "decay_factor")) {
    cfg.decay_factor = get_number(*f, path + ".decay_factor");
  }
  if (const json* f = find(j, "decay_every")) {
    cfg.decay_every = get_size(*f, path + ".decay_every");
  }
  if (const json* f = find(j, "total_epochs")) {
    cfg.total_epochs = get_size(*f, path + ".total_epochs");
  }
  if (const json* f = find(j, "weight_decay")) {
    cfg.weight_decay = get_number(*f, path + ".weight_decay");
  }
  if (const json* f = find(j, "alpha")) cfg.alpha = get_number(*f, path + ".alpha");
  if (const json* f = find(j, "seed")) cfg.seed = get_u64(*f, path + ".seed");
  return cfg;
}

DataConfig parse_data(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("key '" + path + "' must be an object");
  check_keys(j, path,
             {"source", "seed", "split_seed", "task", "n", "n_rot", "img", "n_contexts",
              "images", "labels", "idx_context", "types", "severities", "path", "data_columns",
              "context_columns", "label_column", "window", "kfold"});
  DataConfig cfg;
  if (const json* f = find(j, "source")) cfg.source = get_string(*f, path + ".source");
  if (cfg.source.empty()) throw ConfigError("key '" + path + ".source' is required");
  const std::set<std::string> sources{"synthetic_digits", "two_moons", "idx", "csv"};
  if (!sources.count(cfg.source)) {
    throw ConfigError("key '" + path + ".source' must be one of synthetic_digits | two_moons | "
                      "idx | csv, got '" + cfg.source + "'");
  }
  if (const json* f = find(j, "seed")) cfg.seed = get_u64(*f, path + ".seed");
  if (const json* f = find(j, "split_seed")) cfg.split_seed = get_u64(*f, path + ".split_seed");
  if (const json* f = find(j, "task")) cfg.task = get_string(*f, path + ".task");
  if (cfg.task != "classify" && cfg.task != "detect" && cfg.task != "density") {
    throw ConfigError("key '" + path + ".task' must be classify | detect | density");
  }
  if (const json* f = find(j, "n")) cfg.n = get_size(*f, path + ".n");
  if (const json* f = find(j, "n_rot")) cfg.n_rot = get_size(*f, path + ".n_rot");
  if (const json* f = find(j, "img")) cfg.img = get_size(*f, path + ".img");
  if (const json* f = find(j, "n_contexts")) cfg.n_contexts = get_size(*f, path + ".n_contexts");
  if (const json* f = find(j, "images")) cfg.images = get_string(*f, path + ".images");
  if (const json* f = find(j, "labels")) cfg.labels = get_string(*f, path + ".labels");
  if (const json* f = find(j, "idx_context")) {
    cfg.idx_context = get_string(*f, path + ".idx_context");
    if (cfg.idx_context != "rotate" && cfg.idx_context != "corrupt" && cfg.idx_context != "none") {
      throw ConfigError("key '" + path + ".idx_context' must be rotate | corrupt | none");
    }
  }
  if (const json* f = find(j, "types")) cfg.types = get_size(*f, path + ".types");
  if (const json* f = find(j, "severities")) cfg.severities = get_size(*f, path + ".severities");
  if (const json* f = find(j, "path")) cfg.path = get_string(*f, path + ".path");
  if (const json* f = find(j, "data_columns")) {
    cfg.data_columns = get_string_list(*f, path + ".data_columns");
  }
  if (const json* f = find(j, "context_columns")) {
    cfg.context_columns = get_string_list(*f, path + ".context_columns");
  }
  if (const json* f = find(j, "label_column")) {
    cfg.label_column = get_string(*f, path + ".label_column");
  }
  if (const json* f = find(j, "window")) cfg.window = get_size(*f, path + ".window");
  if (const json* f = find(j, "kfold")) {
    if (!f->is_object()) throw ConfigError("key '" + path + ".kfold' must be an object");
    check_keys(*f, path + ".kfold", {"k", "fold"});
    cfg.use_kfold = true;
    if (const json* g = find(*f, "k")) cfg.k = get_size(*g, path + ".kfold.k");
    if (const json* g = find(*f, "fold")) cfg.fold = get_size(*g, path + ".kfold.fold");
    if (cfg.k < 2) throw ConfigError("key '" + path + ".kfold.k' must be >= 2");
    if (cfg.fold >= cfg.k) throw ConfigError("key '" + path + ".kfold.fold' must be below k");
  }
  if (cfg.source == "idx" && cfg.images.empty()) {
    throw ConfigError("key '" + path + ".images' is required for the idx source");
  }
  if (cfg.source == "csv") {
    if (cfg.path.empty()) throw ConfigError("key '" + path + ".path' is required for csv");
    if (cfg.data_columns.empty()) {
      throw ConfigError("key '" + path + ".data_columns' is required for csv");
    }
  }
  return cfg;
}

SampleConfig parse_sample(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("key '" + path + "' must be an object");
  check_keys(j, path, {"n", "class"});
  SampleConfig cfg;
  if (const json* f = find(j, "n")) cfg.n = get_size(*f, path + ".n");
  if (const json* f = find(j, "class")) {
    const double v = get_number(*f, path + ".class");
    if (v != std::floor(v) || v < -1.0) {
      throw ConfigError("key '" + path + ".class' must be -1 or a class index");
    }
    cfg.class_idx = int(v);
  }
  return cfg;
}

void apply_override(json& root, const std::string& text) {
  const std::size_t eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + text + "' must look like path.to.key=value");
  }
  const std::string dotted = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;  // unquoted strings pass through verbatim
  }
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override '" + text + "' has an empty path segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object()) {
      throw ConfigError("override '" + text + "' descends into non-object key '" + key + "'");
    }
    start = dot + 1;
  }
}

}  // namespace

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          std::string* effective_json) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  json root;
  try {
    root = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!root.is_object()) throw ConfigError("config '" + path + "' must be a JSON object");
  for (const std::string& o : overrides) apply_override(root, o);
  check_keys(root, "", {"model", "train", "data", "sample", "out"});

  RunConfig cfg;
  const json* model = find(root, "model");
  if (!model) throw ConfigError("config '" + path + "' needs a 'model' object");
  cfg.model = parse_model(*model, "model");
  if (const json* t = find(root, "train")) cfg.train = parse_train(*t, "train");
  const json* data = find(root, "data");
  if (!data) throw ConfigError("config '" + path + "' needs a 'data' object");
  cfg.data = parse_data(*data, "data");
  if (const json* s = find(root, "sample")) cfg.sample = parse_sample(*s, "sample");
  if (const json* o = find(root, "out")) cfg.out = get_string(*o, "out");

  cfg.model.validate();
  cfg.train.validate();
  if (effective_json) *effective_json = root.dump(2) + "\n";
  return cfg;
}

namespace {

NdArray parse_csv_numbers(const Csv& csv, const std::vector<std::string>& columns,
                          const std::string& what) {
  const std::size_t n = csv.rows.size();
  NdArray out({n, columns.size()});
  std::vector<std::size_t> idx;
  for (const std::string& c : columns) idx.push_back(csv.col(c));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const std::string& cell = csv.rows[r][idx[j]];
      try {
        std::size_t pos = 0;
        out.data()[r * idx.size() + j] = std::stod(cell, &pos);
        if (pos != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DataError(what + " column '" + columns[j] + "' row " + std::to_string(r) +
                        ": '" + cell + "' is not a number");
      }
    }
  }
  return out;
}

Dataset dataset_from_csv(const DataConfig& cfg) {
  Csv csv = load_csv(cfg.path);
  Dataset ds;
  NdArray rows = parse_csv_numbers(csv, cfg.data_columns, "data");
  const std::size_t n = csv.rows.size();
  const std::size_t d = cfg.data_columns.size();
  if (cfg.window > 0) {
    // windows (T, w, D) transposed to channels-first samples (D, w)
    NdArray win = sliding_windows(rows, cfg.window);
    ds.data = NdArray({n, d, cfg.window});
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t j = 0; j < cfg.window; ++j) {
        for (std::size_t c = 0; c < d; ++c) {
          ds.data.data()[(t * d + c) * cfg.window + j] = win.data()[(t * cfg.window + j) * d + c];
        }
      }
    }
  } else {
    ds.data = std::move(rows);
  }
  if (!cfg.context_columns.empty()) {
    ds.contexts = parse_csv_numbers(csv, cfg.context_columns, "context");
    for (const std::string& c : cfg.context_columns) {
      ContextVar var;
      var.name = c;
      var.discrete = false;  // the model's context spec governs the encoding
      ds.context_spec.vars.push_back(var);
    }
  } else {
    ds.contexts = NdArray({n, 0});
  }
  if (!cfg.label_column.empty()) {
    NdArray labels = parse_csv_numbers(csv, {cfg.label_column}, "label");
    ds.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      const double v = labels.data()[r];
      if (v < 0 || v != std::floor(v)) {
        throw DataError("label column '" + cfg.label_column + "' row " + std::to_string(r) +
                        ": '" + std::to_string(v) + "' is not a class index");
      }
      ds.labels[r] = std::size_t(v);
    }
    ds.has_labels = true;
  }
  return ds;
}

Dataset dataset_from_idx(const DataConfig& cfg, Rng& rng) {
  NdArray images = load_idx(cfg.images);
  Dataset ds;
  if (cfg.idx_context == "rotate") {
    ds = rotate_context(images, cfg.n_rot, rng);
  } else if (cfg.idx_context == "corrupt") {
    ds = corrupt_context(images, cfg.types, cfg.severities, rng);
  } else {
    ds.data = std::move(images);
    ds.contexts = NdArray({ds.data.extent(0), 0});
  }
  if (!cfg.labels.empty()) {
    NdArray labels = load_idx(cfg.labels);
    if (labels.rank() != 1 || labels.extent(0) != ds.size()) {
      throw DataError("label file '" + cfg.labels + "' does not align with the images");
    }
    ds.labels.resize(labels.numel());
    for (std::size_t i = 0; i < labels.numel(); ++i) ds.labels[i] = std::size_t(labels.data()[i]);
    ds.has_labels = true;
  }
  return ds;
}

}  // namespace

DatasetSplits build_dataset(const DataConfig& cfg) {
  Rng rng = Rng(cfg.seed).split("data");
  Dataset ds;
  if (cfg.source == "synthetic_digits") {
    ds = synthetic_digits(cfg.n, cfg.n_rot, cfg.img, rng);
  } else if (cfg.source == "two_moons") {
    ds = two_moons_context(cfg.n, cfg.n_contexts, rng);
  } else if (cfg.source == "idx") {
    ds = dataset_from_idx(cfg, rng);
  } else {
    ds = dataset_from_csv(cfg);
  }
  ds.validate();
  if (!cfg.use_kfold) return split_dataset(ds, cfg.split_seed);
  FoldPair fold = kfold_split(ds, cfg.k, cfg.fold, cfg.split_seed);
  // carve a validation slice (10%) off the fold's training part
  const std::size_t n = fold.train.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng vrng = Rng(cfg.split_seed).split("val_carve");
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[vrng.uniform_int(i)]);
  const std::size_t n_val = std::max<std::size_t>(n / 10, 1);
  DatasetSplits out;
  out.val = select_rows(fold.train, {idx.begin(), idx.begin() + n_val});
  out.val.split = Split::kVal;
  out.train = select_rows(fold.train, {idx.begin() + n_val, idx.end()});
  out.test = std::move(fold.test);
  return out;
}

}  // namespace contextflow
