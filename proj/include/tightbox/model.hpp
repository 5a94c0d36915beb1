#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tightbox/dataset.hpp"
#include "tightbox/geometry.hpp"
#include "tightbox/nn.hpp"

namespace tightbox {

enum class BackboneKind { tiny, vgg16, resnet50, mobilenet };

std::string to_string(BackboneKind k);
/// Throws UnsupportedBackbone for unknown names.
BackboneKind parse_backbone(const std::string& s);

/// How the backbone's feature map is reduced before the coordinate head.
enum class Pooling { flatten, global_average };
std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& s);

struct ModelSpec {
  BackboneKind backbone = BackboneKind::tiny;
  int input_size = 256;
  /// Widths of the three fully connected layers; the last must be 4. Empty
  /// selects the default for the backbone.
  std::vector<int> head;
  /// Defaults to flatten for tiny and global_average for the deep backbones
  /// when unset.
  std::optional<Pooling> pooling;
  std::string init = "random";
};

struct LossConfig {
  double huber_delta = 1.0;
};

/// Anything that maps patches to normalized box coordinates.
class BoxRegressor {
 public:
  virtual ~BoxRegressor() = default;
  virtual std::vector<PatchCoords> predict(std::span<const ImagePatch> patches) const = 0;
  virtual int input_size() const = 0;
  /// Checkpoint sidecar describing this regressor.
  virtual nlohmann::json metadata() const = 0;
};

/// Feature extractor followed by three fully connected layers emitting
/// (x_min, y_min, x_max, y_max). The output layer is linear.
class RefinementModel final : public BoxRegressor {
 public:
  /// Deterministic given `seed`. Throws UnsupportedBackbone / ShapeMismatch.
  static RefinementModel build(const ModelSpec& spec, std::uint64_t seed);
  static RefinementModel build(BackboneKind kind, int input_size, std::uint64_t seed);

  /// Batch (N, 3, S, S) -> (N, 4, 1, 1). Throws ShapeMismatch.
  nn::Tensor forward(const nn::Tensor& batch, nn::Saved* saved = nullptr) const;
  /// Propagates d(loss)/d(output) and accumulates parameter gradients.
  void backward(const nn::Tensor& grad_output, const nn::Saved& saved);

  std::vector<PatchCoords> predict(std::span<const ImagePatch> patches) const override;
  int input_size() const override { return spec_.input_size; }
  nlohmann::json metadata() const override;

  const ModelSpec& spec() const { return spec_; }
  std::vector<nn::Param*> parameters();
  std::vector<float> flat_parameters() const;
  void set_flat_parameters(std::span<const float> values);
  std::size_t parameter_count() const;
  std::vector<std::string> layer_names() const;
  /// Leaf layers including those nested in residual blocks.
  std::vector<std::string> leaf_layer_names() const;

 private:
  RefinementModel() = default;
  ModelSpec spec_;
  nn::Sequential net_;
};

/// Stacks patches into an (N, 3, S, S) tensor. Throws ShapeMismatch when the
/// patch size differs from `size`.
nn::Tensor stack_patches(std::span<const ImagePatch> patches, int size);

double huber(double r, double delta) noexcept;
double huber_derivative(double r, double delta) noexcept;

/// Mean of huber(pred - target) over all coordinates. Throws ShapeMismatch.
double huber_loss(std::span<const PatchCoords> pred, std::span<const PatchCoords> target, const LossConfig& cfg);

struct LossGradient {
  double loss = 0.0;
  std::vector<PatchCoords> grad;  // d(loss)/d(pred)
};
LossGradient huber_loss_gradient(std::span<const PatchCoords> pred, std::span<const PatchCoords> target,
                                 const LossConfig& cfg);

/// Orders raw head output so that x_min <= x_max and y_min <= y_max.
PatchCoords order_coordinates(PatchCoords c) noexcept;

/// Maps raw predicted coordinates back to an image box: ordering, unmapping,
/// minimum-size check (1 px) and clipping. Throws DegenerateBox.
BBox finalize_prediction(const PatchTransform& t, const PatchCoords& raw, int image_w, int image_h);

/// Crop around the expanded rough box, regress, unmap and clip to the image.
/// `image_id` is attached to the patch for regressors that key on it.
BBox refine(const BoxRegressor& model, const Image& image, const BBox& rough_box, const SampleConfig& cfg,
            int image_w, int image_h, const std::string& image_id = {});
BBox refine(const BoxRegressor& model, const Image& image, const BBox& rough_box, const SampleConfig& cfg,
            const std::string& image_id = {});

// ---- reference regressors ----------------------------------------------------

/// Test double that knows the true boxes and returns their exact patch
/// coordinates. For a patch it picks the truth of the same image with the
/// largest overlap with the crop window.
class OracleRegressor final : public BoxRegressor {
 public:
  OracleRegressor(std::map<std::string, std::vector<BBox>> truths, int input_size)
      : truths_(std::move(truths)), input_size_(input_size) {}
  static OracleRegressor from_labels(const std::vector<LabeledInstance>& labels, int input_size);

  std::vector<PatchCoords> predict(std::span<const ImagePatch> patches) const override;
  int input_size() const override { return input_size_; }
  nlohmann::json metadata() const override;

 private:
  std::map<std::string, std::vector<BBox>> truths_;
  int input_size_;
};

/// Returns its input window unchanged (a no-op refiner).
class WindowRegressor final : public BoxRegressor {
 public:
  explicit WindowRegressor(int input_size) : input_size_(input_size) {}
  std::vector<PatchCoords> predict(std::span<const ImagePatch> patches) const override;
  int input_size() const override { return input_size_; }
  nlohmann::json metadata() const override;

 private:
  int input_size_;
};

// ---- checkpoints -------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  std::shared_ptr<const BoxRegressor> model;
  SampleConfig sample;
  nlohmann::json sidecar;
};

/// Writes `model.bin` (weights) and `model.json` (sidecar) into `dir`.
void save_checkpoint(const std::filesystem::path& dir, const RefinementModel& model, const SampleConfig& sample);

/// Writes a sidecar-only checkpoint for the oracle test double pointing at a
/// ground-truth label file.
void save_oracle_checkpoint(const std::filesystem::path& dir, const std::filesystem::path& labels,
                            const SampleConfig& sample);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Loads only a trainable model (rejects test doubles).
RefinementModel load_refinement_model(const std::filesystem::path& dir, SampleConfig* sample = nullptr);

nlohmann::json to_json(const EdgeErrorModel& m);
EdgeErrorModel edge_error_model_from_json(const nlohmann::json& j);

}  // namespace tightbox
