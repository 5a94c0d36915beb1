#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "tightbox/dataset.hpp"
#include "tightbox/errors.hpp"
#include "tightbox/evaluation.hpp"
#include "tightbox/model.hpp"

using namespace tightbox;

namespace {

std::vector<PredTruth> random_pairs(int n, std::mt19937_64& g, double spread = 10.0) {
  std::uniform_real_distribution<double> pos(0, 500), len(5, 200), err(-spread, spread);
  std::vector<PredTruth> out;
  for (int i = 0; i < n; ++i) {
    const double x = pos(g), y = pos(g);
    const BBox t{x, y, x + len(g), y + len(g)};
    out.push_back({{t.x_min + err(g), t.y_min + err(g), t.x_max + err(g), t.y_max + err(g)}, t});
  }
  return out;
}

std::vector<std::pair<oracle::Box, oracle::Box>> to_oracle(const std::vector<PredTruth>& pairs) {
  std::vector<std::pair<oracle::Box, oracle::Box>> out;
  for (const auto& p : pairs)
    out.push_back({{p.pred.x_min, p.pred.y_min, p.pred.x_max, p.pred.y_max},
                   {p.truth.x_min, p.truth.y_min, p.truth.x_max, p.truth.y_max}});
  return out;
}

struct Fixture {
  std::vector<LabeledInstance> instances;
  InMemoryImages images;
};

Fixture synthetic(int n, std::uint64_t seed, int size = 128) {
  Fixture f;
  for (auto& it : synth_generate(n, seed, size, Background::noise)) {
    f.instances.push_back(it.instance);
    f.images.add(it.instance.image_id, std::move(it.image));
  }
  return f;
}

}  // namespace

TEST(MaeLe, Examples) {
  const std::vector<PredTruth> one{{{2, -1, 103, 200}, {0, 0, 100, 200}}};
  EXPECT_DOUBLE_EQ(mae_le(one), 0.75);
  const auto table = tolerance_table(one, {1});
  EXPECT_DOUBLE_EQ(table.at(1), 0.75);
  const std::vector<PredTruth> same{{{0, 0, 10, 10}, {0, 0, 10, 10}}};
  EXPECT_EQ(mae_le(same), 0.0);
  for (auto [t, frac] : tolerance_table(same, {1, 2, 3, 4, 5})) EXPECT_EQ(frac, 1.0);
  EXPECT_THROW(mae_le({}), EmptyInput);
  EXPECT_THROW(tolerance_table({}, {1}), EmptyInput);
  EXPECT_THROW(tolerance_table(one, {2, 1}), Error);
  EXPECT_THROW(tolerance_table(one, {0, 1}), Error);
}

TEST(MaeLe, MatchesBruteForce) {
  std::mt19937_64 g(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pairs = random_pairs(100, g);
    const auto ref = to_oracle(pairs);
    EXPECT_NEAR(mae_le(pairs), oracle::mae_le(ref), 1e-9);
    const auto table = tolerance_table(pairs, {0.5, 1, 2, 3, 4, 5, 10});
    for (auto [t, frac] : table) EXPECT_NEAR(frac, oracle::within(ref, t), 1e-9);
  }
}

TEST(MaeLe, PerEdgeAverageEqualsOverall) {
  std::mt19937_64 g(2);
  const auto pairs = random_pairs(64, g);
  double sum = 0.0;
  for (int e = 0; e < 4; ++e) sum += mae_le_edge(pairs, e);
  EXPECT_NEAR(sum / 4, mae_le(pairs), 1e-9);
  // Left edge alone against a hand computation.
  double left = 0.0;
  for (const auto& p : pairs) left += 100.0 * std::fabs(p.pred.x_min - p.truth.x_min) / p.truth.longest_edge();
  EXPECT_NEAR(mae_le_edge(pairs, 0), left / pairs.size(), 1e-9);
}

TEST(MaeLe, PooledNormalization) {
  const std::vector<PredTruth> pairs{{{1, 0, 10, 10}, {0, 0, 10, 10}}, {{0, 0, 100, 50}, {0, 0, 100, 40}}};
  // Errors sum 1 + 10 over 8 edges; longest edges 10 and 100 (each counted per edge).
  EXPECT_NEAR(mae_le(pairs, Normalization::pooled), 100.0 * 11.0 / (4 * 10 + 4 * 100), 1e-12);
  EXPECT_NEAR(mae_le(pairs), 100.0 * (1.0 / 10 + 10.0 / 100) / 8, 1e-12);
}

TEST(ToleranceTable, MonotoneAndSaturates) {
  std::mt19937_64 g(3);
  const auto pairs = random_pairs(1000, g, 40.0);
  std::vector<double> ts;
  for (double t = 0.25; t <= 30; t += 0.25) ts.push_back(t);
  ts.push_back(1e6);
  const auto table = tolerance_table(pairs, ts);
  double prev = 0.0;
  for (auto [t, frac] : table) {
    EXPECT_GE(frac, prev);
    EXPECT_GE(frac, 0.0);
    EXPECT_LE(frac, 1.0);
    prev = frac;
  }
  EXPECT_EQ(table.at(1e6), 1.0);
}

TEST(ToleranceTable, ScaleInvariant) {
  std::mt19937_64 g(4);
  auto pairs = random_pairs(200, g);
  auto scaled = pairs;
  for (auto& p : scaled) {
    for (BBox* b : {&p.pred, &p.truth}) *b = {b->x_min * 4, b->y_min * 4, b->x_max * 4, b->y_max * 4};
  }
  EXPECT_NEAR(mae_le(pairs), mae_le(scaled), 1e-9);
  const auto a = tolerance_table(pairs, {1, 2, 3, 4, 5});
  const auto b = tolerance_table(scaled, {1, 2, 3, 4, 5});
  for (auto [t, frac] : a) EXPECT_NEAR(frac, b.at(t), 1e-12);
}

TEST(Evaluate, OracleModelIsPerfect) {
  auto f = synthetic(40, 5);
  const auto oracle = OracleRegressor::from_labels(f.instances, 64);
  SampleConfig sc;
  sc.patch_size = 64;
  EvalConfig ec;
  ec.seed = 9;
  const auto r = evaluate(oracle, f.instances, f.images, sc, ec);
  EXPECT_EQ(r.n_boxes, 40u);
  EXPECT_EQ(r.n_edges, 160u);
  EXPECT_NEAR(r.mae_le_after, 0.0, 1e-9);
  EXPECT_GT(r.mae_le_before, 1.0);
  for (auto [t, frac] : r.tolerance_after) EXPECT_EQ(frac, 1.0);
  EXPECT_EQ(r.refine_failures, 0u);
}

TEST(Evaluate, NoOpRefinerKeepsBeforeMetrics) {
  auto f = synthetic(40, 6);
  const WindowRegressor id(64);
  SampleConfig sc;
  sc.patch_size = 64;
  sc.expand_ratio = 0.0;
  EvalConfig ec;
  ec.seed = 2;
  // Keep rough boxes inside the image so clipping is a no-op.
  ec.error_model = EdgeErrorModel::detector_default().scaled(0.3);
  const auto r = evaluate(id, f.instances, f.images, sc, ec);
  const auto rough = rough_boxes(f.instances, ec);
  bool inside = true;
  for (const auto& b : rough) inside = inside && b.x_min >= 0 && b.y_min >= 0 && b.x_max <= 128 && b.y_max <= 128;
  ASSERT_TRUE(inside);
  EXPECT_NEAR(r.mae_le_after, r.mae_le_before, 1e-6);
  for (auto [t, frac] : r.tolerance_before) EXPECT_NEAR(r.tolerance_after.at(t), frac, 1e-6);
  for (int e = 0; e < 4; ++e) EXPECT_NEAR(r.edges[e].after, r.edges[e].before, 1e-6);
}

TEST(Evaluate, BeforeMatchesBruteForceOnPrelabels) {
  auto f = synthetic(30, 7);
  std::mt19937_64 g(8);
  std::uniform_real_distribution<double> d(-3, 3);
  std::vector<std::pair<oracle::Box, oracle::Box>> ref;
  for (auto& inst : f.instances) {
    const BBox& t = *inst.true_box;
    inst.prelabel_box = BBox{t.x_min + d(g), t.y_min + d(g), t.x_max + d(g), t.y_max + d(g)};
    ref.push_back({{inst.prelabel_box->x_min, inst.prelabel_box->y_min, inst.prelabel_box->x_max,
                    inst.prelabel_box->y_max},
                   {t.x_min, t.y_min, t.x_max, t.y_max}});
  }
  SampleConfig sc;
  sc.patch_size = 64;
  EvalConfig ec;
  ec.scenario = Scenario::prelabel;
  const auto r = evaluate(OracleRegressor::from_labels(f.instances, 64), f.instances, f.images, sc, ec);
  EXPECT_NEAR(r.mae_le_before, oracle::mae_le(ref), 1e-9);
  for (auto [t, frac] : r.tolerance_before) EXPECT_NEAR(frac, oracle::within(ref, t), 1e-9);
}

TEST(Evaluate, DeterministicAndErrors) {
  auto f = synthetic(20, 8);
  const auto model = RefinementModel::build(BackboneKind::tiny, 64, 1);
  SampleConfig sc;
  sc.patch_size = 64;
  EvalConfig ec;
  ec.seed = 5;
  const auto a = evaluate(model, f.instances, f.images, sc, ec);
  const auto b = evaluate(model, f.instances, f.images, sc, ec);
  EXPECT_EQ(a, b);
  ec.seed = 6;
  EXPECT_NE(evaluate(model, f.instances, f.images, sc, ec).mae_le_before, a.mae_le_before);

  ec.scenario = Scenario::prelabel;
  EXPECT_THROW(evaluate(model, f.instances, f.images, sc, ec), MissingPrelabels);
  EXPECT_THROW(evaluate(model, {}, f.images, sc, ec), EmptyDataset);
  std::vector<LabeledInstance> no_truth(1);
  no_truth[0].image_id = f.instances[0].image_id;
  no_truth[0].prelabel_box = BBox{0, 0, 10, 10};
  EXPECT_THROW(evaluate(model, no_truth, f.images, sc, ec), EmptyDataset);
}

TEST(Evaluate, ScaleInvariance) {
  // Doubling images and boxes leaves the perturbed_gt metrics unchanged for a
  // no-op refiner (same seed, ratio-based perturbation).
  auto f = synthetic(20, 9, 64);
  Fixture big;
  for (const auto& inst : f.instances) {
    LabeledInstance s = inst;
    const BBox& t = *inst.true_box;
    s.true_box = BBox{t.x_min * 2, t.y_min * 2, t.x_max * 2, t.y_max * 2};
    big.instances.push_back(s);
    big.images.add(s.image_id, Image(128, 128, 0));
  }
  const WindowRegressor id(32);
  SampleConfig sc;
  sc.patch_size = 32;
  EvalConfig ec;
  ec.seed = 4;
  const auto a = evaluate(id, f.instances, f.images, sc, ec);
  const auto b = evaluate(id, big.instances, big.images, sc, ec);
  EXPECT_NEAR(a.mae_le_before, b.mae_le_before, 1e-9);
  EXPECT_NEAR(a.mae_le_after, b.mae_le_after, 1e-9);
  for (auto [t, frac] : a.tolerance_before) EXPECT_NEAR(frac, b.tolerance_before.at(t), 1e-12);
  for (auto [t, frac] : a.tolerance_after) EXPECT_NEAR(frac, b.tolerance_after.at(t), 1e-12);
}

TEST(Report, RenderAndRoundTrip) {
  auto f = synthetic(12, 10);
  SampleConfig sc;
  sc.patch_size = 64;
  EvalConfig ec;
  ec.seed = 3;
  ec.tolerances = {0.5, 1, 2.5, 5};
  const auto r = evaluate(RefinementModel::build(BackboneKind::tiny, 64, 2), f.instances, f.images, sc, ec);
  const auto a = report_render(r);
  const auto b = report_render(r);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.json, b.json);
  EXPECT_EQ(report_from_json(nlohmann::json::parse(a.json)), r);

  const auto j = nlohmann::json::parse(a.json);
  EXPECT_EQ(j.at("n_boxes"), 12);
  EXPECT_TRUE(j.at("mae_le").contains("before"));
  EXPECT_TRUE(j.at("tolerance").contains("2.5"));
  EXPECT_EQ(j.at("scenario"), "perturbed_gt");
  EXPECT_EQ(j.at("seed"), 3);
  // Ascending tolerance rows in the text table.
  const auto p05 = a.text.find("\n0.5% of LE"), p1 = a.text.find("\n1% of LE"), p25 = a.text.find("\n2.5% of LE"),
             p5 = a.text.find("\n5% of LE");
  ASSERT_NE(p05, std::string::npos);
  ASSERT_NE(p1, std::string::npos);
  ASSERT_NE(p25, std::string::npos);
  ASSERT_NE(p5, std::string::npos);
  EXPECT_LT(p05, p1);
  EXPECT_LT(p1, p25);
  EXPECT_LT(p25, p5);
  EXPECT_EQ(tolerance_key(1.0), "1");
  EXPECT_EQ(tolerance_key(2.5), "2.5");
}
