#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contextflow/data/datasets.hpp"
#include "contextflow/flow/model.hpp"
#include "contextflow/train/schedule.hpp"

namespace contextflow {

// Dataset source description from the config file. One `source` kind with
// its own parameter group; everything validated strictly (unknown keys are
// rejected with their dotted path).
struct DataConfig {
  std::string source;  // synthetic_digits | two_moons | idx | csv
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::string task = "classify";  // classify | detect | density

  // synthetic_digits / two_moons
  std::size_t n = 2000;
  std::size_t n_rot = 8;
  std::size_t img = 16;
  std::size_t n_contexts = 8;

  // idx
  std::string images;
  std::string labels;
  std::string idx_context = "rotate";  // rotate | corrupt | none
  std::size_t types = 15;
  std::size_t severities = 5;

  // csv
  std::string path;
  std::vector<std::string> data_columns;
  std::vector<std::string> context_columns;
  std::string label_column;
  std::size_t window = 0;  // 0 = rows as-is; else sliding windows (D, window)

  bool use_kfold = false;
  std::size_t k = 5;
  std::size_t fold = 0;
};

struct SampleConfig {
  std::size_t n = 16;
  int class_idx = -1;  // -1 = uniform over classes
};

struct RunConfig {
  FlowConfig model;
  TrainConfig train;
  DataConfig data;
  SampleConfig sample;
  std::string out = "runs/out";
};

// Parses the JSON config, applies dotted-path overrides ("train.lr_init=5e-4")
// and returns the validated RunConfig. effective_json receives the merged
// document for the effective-config dump.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides,
                          std::string* effective_json);

// Builds the dataset the config describes and splits it. kfold folds the
// train/test pair and carves the validation slice out of the training part.
DatasetSplits build_dataset(const DataConfig& cfg);

}  // namespace contextflow
