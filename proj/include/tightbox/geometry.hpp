#pragma once

#include <array>
#include <iosfwd>

#include "tightbox/random.hpp"

namespace tightbox {

/// Axis-aligned box in continuous pixel coordinates. Pixel (r, c) covers
/// [c, c+1) x [r, r+1), so the tight box of a pixel set touches the outer
/// boundaries of its extreme pixels.
struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return width() * height(); }
  double longest_edge() const noexcept { return width() > height() ? width() : height(); }

  /// Finite coordinates and strictly positive width and height.
  bool valid() const noexcept;

  /// Builds a box and throws DegenerateBox when it violates the invariants.
  static BBox checked(double x_min, double y_min, double x_max, double y_max);

  friend bool operator==(const BBox&, const BBox&) = default;
};

std::ostream& operator<<(std::ostream& os, const BBox& b);

/// Per-edge Gaussian model of edge displacement ratios. Vertical edges
/// (left/right) are normalized by box width, horizontal edges (top/bottom)
/// by box height.
struct EdgeErrorModel {
  double mean_vertical = 0.0;
  double sigma_vertical = 0.0;
  double mean_horizontal = 0.0;
  double sigma_horizontal = 0.0;
  double scale = 1.0;

  bool valid() const noexcept;

  /// Zero-mean model with sigma 0.08 (vertical) and 0.14 (horizontal),
  /// i.e. variances 0.0064 and 0.0196.
  static EdgeErrorModel detector_default();

  /// Copy with `scale` multiplied by `factor`.
  EdgeErrorModel scaled(double factor) const;

  friend bool operator==(const EdgeErrorModel&, const EdgeErrorModel&) = default;
};

/// Signed edge displacement ratios (left, right, top, bottom). Positive moves
/// an edge towards +x / +y.
struct EdgeShifts {
  double left = 0.0;
  double right = 0.0;
  double top = 0.0;
  double bottom = 0.0;
};

/// Mapping between an image-space crop window and a square letterboxed
/// network input. Content is anchored top-left; padding goes right/bottom.
struct PatchTransform {
  BBox window;
  int output_size = 0;
  double scale = 0.0;
  double pad_right = 0.0;
  double pad_bottom = 0.0;

  /// Width/height of the scaled window inside the output square.
  double content_width() const noexcept { return window.width() * scale; }
  double content_height() const noexcept { return window.height() * scale; }
};

/// Normalized patch coordinates (x_min, y_min, x_max, y_max).
using PatchCoords = std::array<double, 4>;

/// Absolute per-edge pixel errors (left, right, top, bottom).
using EdgeErrors = std::array<double, 4>;

double iou(const BBox& a, const BBox& b) noexcept;

/// Moves left/right edges outward by ratio*width and top/bottom by
/// ratio*height. The result may leave the image.
BBox expand(const BBox& box, double ratio);

/// Applies ratio shifts without validating the result.
BBox apply_edge_shifts(const BBox& box, const EdgeShifts& shifts) noexcept;

/// Draw from N(mean, sigma) truncated to mean +- 3 sigma.
double truncated_normal(Rng& rng, double mean, double sigma);

/// Shifts each edge independently by a truncated Gaussian draw times
/// model.scale times the box width/height. Draw sets producing an inverted box
/// or a side shorter than kMinPerturbedSide are redrawn up to
/// kMaxPerturbAttempts times, after which the box is returned unshifted.
BBox perturb(const BBox& box, const EdgeErrorModel& model, Rng& rng);

inline constexpr double kMinPerturbedSide = 4.0;
inline constexpr int kMaxPerturbAttempts = 16;

/// Intersection with [0, image_w] x [0, image_h]; throws DegenerateBox when
/// the intersection is empty.
BBox clip(const BBox& box, double image_w, double image_h);

PatchTransform make_patch_transform(const BBox& window, int output_size);

PatchCoords to_patch_coords(const PatchTransform& t, const BBox& box) noexcept;

/// Inverse of to_patch_coords. Throws DegenerateBox if the result is not a
/// valid box.
BBox from_patch_coords(const PatchTransform& t, const PatchCoords& coords);

EdgeErrors edge_errors(const BBox& pred, const BBox& truth) noexcept;

}  // namespace tightbox
