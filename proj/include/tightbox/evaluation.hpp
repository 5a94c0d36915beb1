#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tightbox/dataset.hpp"
#include "tightbox/geometry.hpp"
#include "tightbox/model.hpp"

namespace tightbox {

enum class Scenario {
  prelabel,      // rough boxes are the instances' pre-labels
  perturbed_gt,  // rough boxes are seeded perturbations of the truth
};
std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);

/// Normalization of edge errors. `per_box` divides each edge error by its own
/// box's longest edge; `pooled` divides the summed error by the summed
/// longest edges (sensitivity check).
enum class Normalization { per_box, pooled };
std::string to_string(Normalization n);
Normalization parse_normalization(const std::string& s);

struct EvalConfig {
  std::vector<double> tolerances{1, 2, 3, 4, 5};
  Scenario scenario = Scenario::perturbed_gt;
  EdgeErrorModel error_model = EdgeErrorModel::detector_default();
  std::uint64_t seed = 0;
  Normalization normalization = Normalization::per_box;

  bool valid() const noexcept;
};

struct PredTruth {
  BBox pred;
  BBox truth;
};

struct BeforeAfter {
  double before = 0.0;
  double after = 0.0;
  friend bool operator==(const BeforeAfter&, const BeforeAfter&) = default;
};

inline constexpr std::array<const char*, 4> kEdgeNames = {"left", "right", "top", "bottom"};

struct EvalReport {
  std::size_t n_boxes = 0;
  std::size_t n_edges = 0;
  double mae_le_before = 0.0;
  double mae_le_after = 0.0;
  std::map<double, double> tolerance_before;
  std::map<double, double> tolerance_after;
  /// MAE/LE per edge type, in kEdgeNames order.
  std::array<BeforeAfter, 4> edges{};
  Scenario scenario = Scenario::perturbed_gt;
  std::uint64_t seed = 0;
  Normalization normalization = Normalization::per_box;
  /// Instances whose refinement collapsed; their rough box stands in.
  std::size_t refine_failures = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Mean absolute edge error as a percentage of the true box's longest edge.
/// Throws EmptyInput.
double mae_le(std::span<const PredTruth> pairs, Normalization norm = Normalization::per_box);

/// MAE/LE restricted to one edge (0..3 = left, right, top, bottom).
double mae_le_edge(std::span<const PredTruth> pairs, int edge, Normalization norm = Normalization::per_box);

/// Fraction of edges with error <= t% of the true longest edge, per t.
/// Throws EmptyInput, or Error for non-increasing/non-positive tolerances.
std::map<double, double> tolerance_table(std::span<const PredTruth> pairs, const std::vector<double>& tolerances);

/// Before/after metrics on identical instance sets.
/// Throws EmptyDataset, MissingPrelabels.
EvalReport evaluate(const BoxRegressor& model, const std::vector<LabeledInstance>& instances,
                    const ImageSource& images, const SampleConfig& sample_cfg, const EvalConfig& eval_cfg);

/// Rough boxes for the configured scenario, in instance order.
std::vector<BBox> rough_boxes(const std::vector<LabeledInstance>& instances, const EvalConfig& eval_cfg);

/// Refines many rough boxes with batched inference. Failed refinements fall
/// back to the rough box clipped to the image (or unclipped if that fails);
/// their indices are reported through `failures`.
std::vector<BBox> refine_batch(const BoxRegressor& model, const std::vector<LabeledInstance>& instances,
                               const std::vector<BBox>& rough, const ImageSource& images,
                               const SampleConfig& sample_cfg, std::vector<std::size_t>* failures = nullptr);

struct RenderedReport {
  std::string text;
  std::string json;
};

RenderedReport report_render(const EvalReport& report);
nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Shortest decimal form of a tolerance ("1", "2.5").
std::string tolerance_key(double t);

}  // namespace tightbox
