#include "tightbox/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>

#include "tightbox/errors.hpp"
#include "tightbox/evaluation.hpp"
#include "tightbox/random.hpp"

namespace tightbox {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw Error("unknown optimizer '" + s + "'");
}

bool TrainConfig::valid() const noexcept {
  return epochs >= 1 && batch_size >= 1 && learning_rate > 0.0 && data_fraction > 0.0 && data_fraction <= 1.0 &&
         error_scale > 0.0 && val_fraction >= 0.0 && val_fraction < 1.0 && sample.valid();
}

nlohmann::json to_json(const TrainHistory& h) {
  auto nan_to_null = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return a;
  };
  return {{"loss", nan_to_null(h.loss)}, {"val_mae_le", nan_to_null(h.val_mae_le)}, {"seconds", h.seconds}};
}

TrainHistory train_history_from_json(const nlohmann::json& j) {
  auto read = [](const nlohmann::json& a) {
    std::vector<double> v;
    for (const auto& x : a) v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
    return v;
  };
  return {read(j.at("loss")), read(j.at("val_mae_le")), read(j.at("seconds"))};
}

void save_history(const std::filesystem::path& path, const TrainHistory& h) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(h).dump(2) << '\n';
}

DataSplit split_instances(std::size_t n, std::uint64_t seed, double val_fraction, double data_fraction) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, {0x73706c6974});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * n));
  if (n_val >= n) n_val = 0;
  DataSplit split;
  split.validation.assign(order.begin(), order.begin() + n_val);
  const std::size_t pool = n - n_val;
  const std::size_t n_train = static_cast<std::size_t>(std::llround(data_fraction * pool));
  split.training.assign(order.begin() + n_val, order.begin() + n_val + std::min(pool, n_train));
  return split;
}

namespace {

std::unique_ptr<nn::Optimizer> make_optimizer(const TrainConfig& cfg) {
  if (cfg.optimizer == OptimizerKind::adam) return std::make_unique<nn::Adam>(cfg.learning_rate);
  return std::make_unique<nn::Sgd>(cfg.learning_rate);
}

double validation_mae_le(const RefinementModel& model, const std::vector<LabeledInstance>& val,
                         const ImageSource& images, const SampleConfig& sample, std::uint64_t seed) {
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  EvalConfig ec;
  ec.scenario = Scenario::perturbed_gt;
  ec.error_model = sample.error_model;
  ec.seed = seed;
  return evaluate(model, val, images, sample, ec).mae_le_after;
}

TrainResult run(RefinementModel model, const std::vector<LabeledInstance>& instances, const ImageSource& images,
                const TrainConfig& cfg, const TrainHooks& hooks) {
  if (!cfg.valid()) throw Error("invalid training config");
  if (instances.empty()) throw EmptyDataset("no training instances");
  for (const auto& inst : instances) {
    if (!inst.true_box) throw Error("training instance without true box in " + inst.image_id);
  }

  TrainResult result{std::move(model), {}, split_instances(instances.size(), cfg.seed, cfg.val_fraction, cfg.data_fraction), 0};
  if (result.split.training.empty()) throw EmptyDataset("data fraction selects no training instances");

  std::vector<LabeledInstance> val;
  for (std::size_t i : result.split.validation) val.push_back(instances[i]);

  SampleConfig train_sample = cfg.sample;
  train_sample.error_model = cfg.sample.error_model.scaled(cfg.error_scale);
  train_sample.patch_size = result.model.input_size();

  auto optimizer = make_optimizer(cfg);
  const auto params = result.model.parameters();
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order = result.split.training;
  std::vector<ImagePatch> patches;
  std::vector<PatchCoords> targets;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = make_stream(cfg.seed, {0x65706f6368, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;

    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      patches.clear();
      targets.clear();
      for (std::size_t k = b; k < end; ++k) {
        const std::size_t idx = order[k];
        const LabeledInstance& inst = instances[idx];
        Rng rng = make_stream(cfg.seed, {static_cast<std::uint64_t>(epoch), idx});
        bool mirrored = false;
        if (cfg.flip) mirrored = std::bernoulli_distribution(0.5)(rng);
        bool ok = false;
        for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
          try {
            const Image& img = images.get(inst.image_id);
            TrainingSample s;
            if (mirrored) {
              Image flipped = mirror_horizontal(img);
              LabeledInstance m = inst;
              m.true_box = mirror_horizontal(*inst.true_box, img.width);
              s = sample_training_patch(flipped, m, train_sample, rng);
            } else {
              s = sample_training_patch(img, inst, train_sample, rng);
            }
            if (hooks.on_window) hooks.on_window(epoch, idx, s.patch.transform.window);
            patches.push_back(std::move(s.patch));
            targets.push_back(s.target);
            ok = true;
          } catch (const DegenerateBox&) {
          }
        }
        if (!ok) ++result.skipped_samples;
      }
      if (patches.empty()) continue;

      nn::zero_grad(params);
      nn::Saved saved;
      const nn::Tensor batch = stack_patches(patches, result.model.input_size());
      const nn::Tensor out = result.model.forward(batch, &saved);
      std::vector<PatchCoords> pred(out.n);
      for (int i = 0; i < out.n; ++i) {
        for (int c = 0; c < 4; ++c) pred[i][c] = out.data[static_cast<std::size_t>(i) * 4 + c];
      }
      const LossGradient lg = huber_loss_gradient(pred, targets, cfg.loss);
      nn::Tensor grad(out.n, 4, 1, 1);
      for (int i = 0; i < out.n; ++i) {
        for (int c = 0; c < 4; ++c) grad.data[static_cast<std::size_t>(i) * 4 + c] = static_cast<float>(lg.grad[i][c]);
      }
      result.model.backward(grad, saved);
      optimizer->step(params);
      loss_sum += lg.loss * out.n;
      loss_count += out.n;
    }

    result.history.loss.push_back(loss_count ? loss_sum / loss_count : std::numeric_limits<double>::quiet_NaN());
    result.history.val_mae_le.push_back(validation_mae_le(result.model, val, images, cfg.sample, cfg.seed));
    result.history.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (hooks.on_epoch) hooks.on_epoch(epoch, result.history);
  }
  return result;
}

}  // namespace

TrainResult train(const std::vector<LabeledInstance>& instances, const ImageSource& images, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  ModelSpec spec = cfg.model;
  spec.input_size = cfg.sample.patch_size;
  if (!cfg.valid()) throw Error("invalid training config");
  if (instances.empty()) throw EmptyDataset("no training instances");
  return run(RefinementModel::build(spec, cfg.seed), instances, images, cfg, hooks);
}

TrainResult finetune(const RefinementModel& model, const std::vector<LabeledInstance>& instances,
                     const ImageSource& images, const TrainConfig& cfg, const TrainHooks& hooks) {
  if (model.input_size() != cfg.sample.patch_size) {
    throw SizeMismatch("model input size " + std::to_string(model.input_size()) + " differs from patch size " +
                       std::to_string(cfg.sample.patch_size));
  }
  return run(model, instances, images, cfg, hooks);
}

}  // namespace tightbox
