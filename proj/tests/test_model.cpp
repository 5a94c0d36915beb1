#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <unistd.h>

#include "tightbox/dataset.hpp"
#include "tightbox/errors.hpp"
#include "tightbox/model.hpp"

using namespace tightbox;
namespace fs = std::filesystem;

namespace {

ImagePatch random_patch(int size, std::mt19937_64& g) {
  ImagePatch p;
  p.size = size;
  p.pixels.resize(static_cast<std::size_t>(3) * size * size);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : p.pixels) v = u(g);
  p.transform = make_patch_transform({0, 0, double(size), double(size)}, size);
  return p;
}

int count_prefix(const std::vector<std::string>& names, const std::string& prefix) {
  return static_cast<int>(std::count_if(names.begin(), names.end(), [&](const std::string& n) {
    return n.rfind(prefix, 0) == 0;
  }));
}

}  // namespace

TEST(Build, DeterministicGivenSeed) {
  const auto a = RefinementModel::build(BackboneKind::tiny, 256, 42);
  const auto b = RefinementModel::build(BackboneKind::tiny, 256, 42);
  const auto c = RefinementModel::build(BackboneKind::tiny, 256, 43);
  EXPECT_EQ(a.flat_parameters(), b.flat_parameters());
  EXPECT_NE(a.flat_parameters(), c.flat_parameters());
}

TEST(Build, ShapesAndIdenticalRows) {
  std::mt19937_64 g(1);
  for (int size : {64, 128}) {
    const auto m = RefinementModel::build(BackboneKind::tiny, size, 3);
    std::vector<ImagePatch> batch{random_patch(size, g), random_patch(size, g)};
    batch.push_back(batch[0]);
    const auto out = m.predict(batch);
    ASSERT_EQ(out.size(), 3u);
    for (const auto& row : out)
      for (double v : row) EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(out[0], out[2]);
    const auto single = m.predict(std::span<const ImagePatch>(batch.data(), 1));
    ASSERT_EQ(single.size(), 1u);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(single[0][k], out[0][k], 1e-5);
  }
}

TEST(Build, RejectsWrongSizesAndBackbones) {
  std::mt19937_64 g(2);
  const auto m = RefinementModel::build(BackboneKind::tiny, 64, 3);
  std::vector<ImagePatch> bad{random_patch(32, g)};
  EXPECT_THROW(m.predict(bad), ShapeMismatch);
  EXPECT_THROW(parse_backbone("alexnet"), UnsupportedBackbone);
  ModelSpec spec;
  spec.head = {16, 8, 3};
  EXPECT_THROW(RefinementModel::build(spec, 1), ShapeMismatch);
}

TEST(Build, BackboneDepths) {
  const auto tiny = RefinementModel::build(BackboneKind::tiny, 64, 1).leaf_layer_names();
  EXPECT_EQ(count_prefix(tiny, "conv"), 5);
  EXPECT_EQ(count_prefix(tiny, "linear"), 3);
  EXPECT_EQ(tiny.back(), "linear(64->4)");

  const auto vgg = RefinementModel::build(BackboneKind::vgg16, 64, 1).leaf_layer_names();
  EXPECT_EQ(count_prefix(vgg, "conv"), 13);
  EXPECT_EQ(count_prefix(vgg, "linear"), 3);

  const auto res = RefinementModel::build(BackboneKind::resnet50, 64, 1).leaf_layer_names();
  EXPECT_EQ(count_prefix(res, "conv"), 49);
  EXPECT_EQ(count_prefix(res, "shortcut:conv"), 4);
  EXPECT_EQ(count_prefix(res, "linear"), 3);

  const auto mob = RefinementModel::build(BackboneKind::mobilenet, 64, 1).leaf_layer_names();
  EXPECT_EQ(count_prefix(mob, "conv"), 18);
  EXPECT_EQ(mob.back(), "linear(128->4)");
}

TEST(Build, DeepBackbonesForwardFinite) {
  std::mt19937_64 g(4);
  for (auto kind : {BackboneKind::vgg16, BackboneKind::resnet50, BackboneKind::mobilenet}) {
    const auto m = RefinementModel::build(kind, 64, 5);
    std::vector<ImagePatch> batch{random_patch(64, g)};
    const auto out = m.predict(batch);
    for (double v : out[0]) EXPECT_TRUE(std::isfinite(v)) << to_string(kind);
  }
}

TEST(Forward, LocallySmoothAtInit) {
  std::mt19937_64 g(6);
  const auto m = RefinementModel::build(BackboneKind::tiny, 64, 7);
  std::vector<ImagePatch> batch{random_patch(64, g)};
  const auto before = m.predict(batch);
  batch[0].pixels[3 * 64 * 32 / 3 + 17] += 1e-7f;
  const auto after = m.predict(batch);
  for (int k = 0; k < 4; ++k) EXPECT_LT(std::fabs(after[0][k] - before[0][k]), 1e-3);
}

TEST(Huber, Examples) {
  EXPECT_EQ(huber(0.5, 1.0), 0.125);
  EXPECT_EQ(huber(2.0, 1.0), 1.5);
  EXPECT_EQ(huber(-2.0, 1.0), 1.5);
  const std::vector<PatchCoords> p{{0.1, 0.2, 0.3, 0.4}};
  EXPECT_EQ(huber_loss(p, p, {}), 0.0);
  const std::vector<PatchCoords> t{{0.1, 0.2, 0.3, 0.9}};
  EXPECT_DOUBLE_EQ(huber_loss(p, t, {}), 0.125 / 4);
  const std::vector<PatchCoords> two{{0, 0, 0, 0}, {0, 0, 0, 0}};
  EXPECT_THROW(huber_loss(p, two, {}), ShapeMismatch);
}

TEST(Huber, PointwiseBounds) {
  for (double delta : {0.1, 0.5, 1.0, 2.0})
    for (double r = -5.0; r <= 5.0; r += 0.01) {
      EXPECT_LE(huber(r, delta), 0.5 * r * r + 1e-15);
      EXPECT_LE(huber(r, delta), delta * std::fabs(r) + 1e-15);
    }
}

TEST(Huber, GradientMatchesFiniteDifferences) {
  std::mt19937_64 g(8);
  std::uniform_real_distribution<double> u(-3.0, 3.0), sign(0.0, 1.0), near(-0.01, 0.01);
  LossConfig cfg;
  cfg.huber_delta = 1.0;
  const double h = 1e-4;
  for (int i = 0; i < 100; ++i) {
    PatchCoords pred, target{0.0, 0.0, 0.0, 0.0};
    for (int k = 0; k < 4; ++k) {
      // Every fourth point sits within 0.01 of the kink.
      const double s = sign(g) < 0.5 ? -1.0 : 1.0;
      pred[k] = (i % 4 == 0) ? s * (cfg.huber_delta + near(g)) : u(g);
    }
    const std::vector<PatchCoords> P{pred}, T{target};
    const auto lg = huber_loss_gradient(P, T, cfg);
    EXPECT_DOUBLE_EQ(lg.loss, huber_loss(P, T, cfg));
    for (int k = 0; k < 4; ++k) {
      std::vector<PatchCoords> pp = P, pm = P;
      pp[0][k] += h;
      pm[0][k] -= h;
      const double numeric = (huber_loss(pp, T, cfg) - huber_loss(pm, T, cfg)) / (2 * h);
      EXPECT_LT(std::fabs(lg.grad[0][k] - numeric), 1e-4 * std::max(std::fabs(numeric), 1e-12)) << i << "," << k;
    }
  }
}

TEST(Training, OneStepDecreasesBatchLoss) {
  std::mt19937_64 g(9);
  auto m = RefinementModel::build(BackboneKind::tiny, 64, 10);
  std::vector<ImagePatch> batch;
  std::vector<PatchCoords> target;
  std::uniform_real_distribution<double> u(0.1, 0.9);
  for (int i = 0; i < 4; ++i) {
    batch.push_back(random_patch(64, g));
    target.push_back({u(g) * 0.5, u(g) * 0.5, 0.5 + u(g) * 0.5, 0.5 + u(g) * 0.5});
  }
  const nn::Tensor x = stack_patches(batch, 64);
  auto loss_of = [&] {
    const nn::Tensor y = m.forward(x);
    std::vector<PatchCoords> pred(4);
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 4; ++k) pred[i][k] = y.data[i * 4 + k];
    return huber_loss(pred, target, {});
  };
  const double before = loss_of();
  nn::Saved saved;
  const nn::Tensor y = m.forward(x, &saved);
  std::vector<PatchCoords> pred(4);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 4; ++k) pred[i][k] = y.data[i * 4 + k];
  const auto lg = huber_loss_gradient(pred, target, {});
  nn::Tensor dy(4, 4, 1, 1);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 4; ++k) dy.data[i * 4 + k] = static_cast<float>(lg.grad[i][k]);
  auto params = m.parameters();
  nn::zero_grad(params);
  m.backward(dy, saved);
  nn::Sgd(1e-3).step(params);
  EXPECT_LT(loss_of(), before);
}

TEST(Refine, OracleModelReturnsTruth) {
  const auto items = synth_generate(20, 11, 128, Background::noise);
  std::vector<LabeledInstance> labels;
  for (const auto& it : items) labels.push_back(it.instance);
  const auto oracle = OracleRegressor::from_labels(labels, 64);
  SampleConfig cfg;
  cfg.patch_size = 64;
  Rng rng = make_stream(12);
  for (const auto& it : items) {
    const BBox truth = *it.instance.true_box;
    const BBox rough = perturb(truth, EdgeErrorModel::detector_default(), rng);
    const BBox out = refine(oracle, it.image, rough, cfg, it.instance.image_id);
    EXPECT_NEAR(out.x_min, truth.x_min, 1e-6);
    EXPECT_NEAR(out.y_min, truth.y_min, 1e-6);
    EXPECT_NEAR(out.x_max, truth.x_max, 1e-6);
    EXPECT_NEAR(out.y_max, truth.y_max, 1e-6);
    EXPECT_EQ(refine(oracle, it.image, rough, cfg, it.instance.image_id), out);
  }
}

TEST(Refine, OutputValidAndInsideImage) {
  std::mt19937_64 g(13);
  Image img(100, 80, 90);
  SampleConfig cfg;
  cfg.patch_size = 64;
  const auto model = RefinementModel::build(BackboneKind::tiny, 64, 14);
  const WindowRegressor window(64);
  std::uniform_real_distribution<double> pos(-30, 110), len(2, 80);
  int degenerate = 0;
  for (int i = 0; i < 60; ++i) {
    const double x = pos(g), y = pos(g);
    const BBox rough{x, y, x + len(g), y + len(g)};
    for (const BoxRegressor* r : {static_cast<const BoxRegressor*>(&model), static_cast<const BoxRegressor*>(&window)}) {
      try {
        const BBox out = refine(*r, img, rough, cfg);
        EXPECT_TRUE(out.valid());
        EXPECT_GE(out.x_min, 0.0);
        EXPECT_GE(out.y_min, 0.0);
        EXPECT_LE(out.x_max, 100.0);
        EXPECT_LE(out.y_max, 80.0);
      } catch (const DegenerateBox&) {
        ++degenerate;
      }
    }
  }
  EXPECT_LT(degenerate, 120);
}

TEST(Refine, InvertedOutputIsSwapped) {
  EXPECT_EQ(order_coordinates({0.8, 0.1, 0.2, 0.9}), (PatchCoords{0.2, 0.1, 0.8, 0.9}));
  const auto t = make_patch_transform({0, 0, 100, 100}, 100);
  EXPECT_EQ(finalize_prediction(t, {0.5, 0.6, 0.1, 0.2}, 100, 100), (BBox{10, 20, 50, 60}));
  EXPECT_THROW(finalize_prediction(t, {0.5, 0.5, 0.505, 0.9}, 100, 100), DegenerateBox);
  EXPECT_THROW(finalize_prediction(t, {1.5, 0.1, 1.9, 0.9}, 100, 100), DegenerateBox);
}

TEST(Checkpoint, RoundTrip) {
  const fs::path dir = fs::temp_directory_path() / ("tightbox_ckpt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  ModelSpec spec;
  spec.input_size = 64;
  const auto m = RefinementModel::build(spec, 15);
  SampleConfig sc;
  sc.patch_size = 64;
  sc.expand_ratio = 0.2;
  sc.error_model = EdgeErrorModel::detector_default().scaled(1.3);
  save_checkpoint(dir, m, sc);
  SampleConfig back;
  const auto loaded = load_refinement_model(dir, &back);
  EXPECT_EQ(loaded.flat_parameters(), m.flat_parameters());
  EXPECT_EQ(back.expand_ratio, 0.2);
  EXPECT_EQ(back.patch_size, 64);
  EXPECT_EQ(back.error_model, sc.error_model);
  const auto ck = load_checkpoint(dir);
  EXPECT_EQ(ck.sidecar.at("backbone"), "tiny");
  EXPECT_EQ(ck.sidecar.at("input_size"), 64);
  EXPECT_EQ(ck.sidecar.at("head"), nlohmann::json::array({256, 64, 4}));
  EXPECT_EQ(ck.sidecar.at("format_version"), kCheckpointFormatVersion);
  EXPECT_EQ(ck.sidecar.at("init"), "random");
  EXPECT_TRUE(ck.sidecar.contains("error_model"));

  std::mt19937_64 g(16);
  std::vector<ImagePatch> batch{random_patch(64, g)};
  EXPECT_EQ(ck.model->predict(batch), m.predict(batch));

  // Corrupted weights are rejected.
  fs::resize_file(dir / "model.bin", fs::file_size(dir / "model.bin") - 4);
  EXPECT_THROW(load_checkpoint(dir), Error);
  fs::remove_all(dir);
}
