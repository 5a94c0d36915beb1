#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tightbox/dataset.hpp"
#include "tightbox/image.hpp"
#include "tightbox/model.hpp"

namespace tightbox {

enum class OptimizerKind { adam, sgd };
std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  SampleConfig sample;
  LossConfig loss;
  double data_fraction = 1.0;
  /// Multiplies the error model's sigmas at train time.
  double error_scale = 1.0;
  /// Share of instances held out for the validation curve (0 disables it).
  double val_fraction = 0.1;
  bool flip = false;
  /// Architecture for train(); finetune() keeps the given model's.
  ModelSpec model;

  bool valid() const noexcept;
};

struct TrainHistory {
  std::vector<double> loss;
  /// NaN for epochs without a validation set.
  std::vector<double> val_mae_le;
  std::vector<double> seconds;
};

nlohmann::json to_json(const TrainHistory& h);
TrainHistory train_history_from_json(const nlohmann::json& j);
void save_history(const std::filesystem::path& path, const TrainHistory& h);

/// Seeded split of instance indices: validation first, then training indices
/// in a fixed order such that smaller data fractions take prefixes.
struct DataSplit {
  std::vector<std::size_t> validation;
  std::vector<std::size_t> training;
};
DataSplit split_instances(std::size_t n, std::uint64_t seed, double val_fraction, double data_fraction);

struct TrainHooks {
  /// Called for every generated training window.
  std::function<void(int epoch, std::size_t instance, const BBox& window)> on_window;
  /// Called after each epoch.
  std::function<void(int epoch, const TrainHistory&)> on_epoch;
};

struct TrainResult {
  RefinementModel model;
  TrainHistory history;
  /// Indices (into the input list) used for training and validation.
  DataSplit split;
  std::size_t skipped_samples = 0;
};

/// Throws EmptyDataset, or Error when cfg is invalid or an instance lacks a true box.
TrainResult train(const std::vector<LabeledInstance>& instances, const ImageSource& images, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// As train() but starting from `model`. Throws SizeMismatch when the model's
/// input size differs from cfg.sample.patch_size.
TrainResult finetune(const RefinementModel& model, const std::vector<LabeledInstance>& instances,
                     const ImageSource& images, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace tightbox
