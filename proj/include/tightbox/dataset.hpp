#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tightbox/geometry.hpp"
#include "tightbox/image.hpp"
#include "tightbox/random.hpp"

namespace tightbox {

enum class LabelSource { ground_truth, detector, tracker, human, model };

std::string to_string(LabelSource s);
/// Throws Error for unknown names.
LabelSource parse_label_source(const std::string& s);

struct LabeledInstance {
  std::string id;  // optional, used by the label store
  std::string image_id;
  std::optional<BBox> true_box;
  std::optional<BBox> prelabel_box;
  std::string class_tag = "pedestrian";
  LabelSource source = LabelSource::ground_truth;
  bool visible = true;

  friend bool operator==(const LabeledInstance&, const LabeledInstance&) = default;
};

struct SampleConfig {
  double expand_ratio = 0.15;
  EdgeErrorModel error_model = EdgeErrorModel::detector_default();
  int patch_size = 256;
  /// Normalized value for letterbox and out-of-image pixels (raw 0 -> -1).
  float pad_value = -1.0f;

  bool valid() const noexcept;
};

/// Letterboxed, normalized network input. Pixels are planar (C, H, W) with
/// values in [-1, 1].
struct ImagePatch {
  int size = 0;
  std::vector<float> pixels;
  PatchTransform transform;
  std::string image_id;

  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * size + y) * size + x];
  }
};

struct TrainingSample {
  ImagePatch patch;
  PatchCoords target{};
};

struct MaskInstance {
  std::uint32_t id = 0;
  BBox box;
  std::size_t pixel_count = 0;
};

inline constexpr int kDefaultMinPixels = 50;

/// One tight box per instance id. 4-connected components smaller than
/// `min_pixels` are dropped; the remaining components of an id are merged.
/// Sorted by id.
std::vector<MaskInstance> mask_to_instances(const InstanceMask& mask, int min_pixels = kDefaultMinPixels);

/// Greedy one-to-one matching in descending IoU order; pairs below the
/// threshold are excluded. Returns (gt index, pre index) pairs.
std::vector<std::pair<std::size_t, std::size_t>> match_prelabels(const std::vector<BBox>& gt,
                                                                 const std::vector<BBox>& pre,
                                                                 double iou_threshold = 0.5);

struct BoxPair {
  BBox truth;
  BBox prelabel;
};

/// Fits mean and (population) standard deviation of signed edge ratios,
/// pooling left+right as vertical and top+bottom as horizontal. Ratios are
/// normalized by the true box width/height. Throws InsufficientData for
/// fewer than 2 pairs.
EdgeErrorModel fit_error_model(const std::vector<BoxPair>& pairs);

/// Area-weighted resampling of `window` into a letterboxed square. Source
/// regions outside the image contribute the raw pad value (0).
ImagePatch crop_letterboxed(const Image& image, const BBox& window, const SampleConfig& cfg);

/// Perturbed, expanded crop around instance.true_box plus its regression
/// target. Throws Error if the instance has no true box.
TrainingSample sample_training_patch(const Image& image, const LabeledInstance& instance,
                                     const SampleConfig& cfg, Rng& rng);

/// Deterministic crop around expand(rough_box, cfg.expand_ratio).
ImagePatch make_inference_patch(const Image& image, const BBox& rough_box, const SampleConfig& cfg);

/// Left-right mirror of an image, and of a box inside an image of width `image_w`.
Image mirror_horizontal(const Image& image);
BBox mirror_horizontal(const BBox& box, double image_w) noexcept;

// ---- synthetic data -------------------------------------------------------

enum class Background { flat, noise, texture, mixed };
std::string to_string(Background b);
Background parse_background(const std::string& s);

enum class ShapeKind { ellipse, capsule, polygon };

/// A filled silhouette. Interpretation of the fields depends on `kind`:
/// ellipse uses center/semi-axes/angle; capsule is the segment
/// (p0, p1) with `radius`; polygon uses `vertices`.
struct Silhouette {
  ShapeKind kind = ShapeKind::ellipse;
  double cx = 0.0, cy = 0.0;
  double semi_x = 1.0, semi_y = 1.0;
  double angle = 0.0;
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double radius = 1.0;
  std::vector<std::pair<double, double>> vertices;

  /// Point-in-shape test in continuous coordinates.
  bool contains(double x, double y) const;
  Silhouette translated(double dx, double dy) const;
  Silhouette scaled_about_center(double sx, double sy) const;
};

/// Binary raster (pixel inside iff its center is inside the shape), with the
/// given id. The tight box of the raster is returned through `box` when the
/// raster is non-empty.
InstanceMask rasterize(const Silhouette& shape, int width, int height, std::uint32_t id,
                       std::optional<BBox>* box = nullptr);

/// Appearance of a synthetic scene.
struct SceneStyle {
  Background background = Background::flat;
  std::uint8_t bg[3] = {0, 0, 0};
  std::uint8_t fg[3] = {255, 255, 255};
  double noise_sigma = 0.0;
  double stripe_freq = 0.0, stripe_angle = 0.0, stripe_amp = 0.0, stripe_phase = 0.0;
};

SceneStyle random_style(Background background, Rng& rng);
Silhouette random_silhouette(int image_size, Rng& rng);

/// Renders the silhouette over the styled background. `noise_key` seeds the
/// per-pixel noise so that identical inputs yield identical images.
Image render_scene(const InstanceMask& mask, const SceneStyle& style, std::uint64_t noise_key);

struct SynthItem {
  Image image;
  InstanceMask mask;
  LabeledInstance instance;
};

/// n images with one high-contrast silhouette each; instance.true_box is the
/// tight box of the rendered pixel set. Image ids are "synth_%05d.png".
std::vector<SynthItem> synth_generate(int n, std::uint64_t seed, int image_size, Background background);

/// One silhouette moving from rest with constant acceleration while growing,
/// rendered over a fixed style. Frame f has image id "<prefix>_%04d.png"; its
/// true box is the tight box of that frame's raster. `travel` is the total
/// displacement of the center as a fraction of image_size.
std::vector<SynthItem> synth_sequence(int n_frames, std::uint64_t seed, int image_size, Background background,
                                      double travel = 0.5, const std::string& prefix = "frame");

// ---- label files ----------------------------------------------------------

/// JSON lines: {"image", "class", "box", "source", "visible"} plus optional
/// "id" and, for non-ground-truth lines, optional "truth". Throws ParseError
/// naming the offending line.
std::vector<LabeledInstance> load_labels(const std::filesystem::path& path);
std::vector<LabeledInstance> parse_labels(const std::string& text);
void save_labels(const std::filesystem::path& path, const std::vector<LabeledInstance>& labels);
std::string format_label_line(const LabeledInstance& label);
LabeledInstance parse_label_line(const std::string& line, std::size_t line_number);

/// Pairs ground-truth and pre-label records of the same image with
/// match_prelabels; returns instances carrying both boxes.
std::vector<LabeledInstance> pair_by_image(const std::vector<LabeledInstance>& ground_truth,
                                           const std::vector<LabeledInstance>& prelabels,
                                           double iou_threshold = 0.5);

}  // namespace tightbox
