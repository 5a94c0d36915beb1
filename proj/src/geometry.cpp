#include "tightbox/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "tightbox/errors.hpp"

namespace tightbox {

bool BBox::valid() const noexcept {
  return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
         std::isfinite(y_max) && x_min < x_max && y_min < y_max;
}

BBox BBox::checked(double x_min, double y_min, double x_max, double y_max) {
  BBox b{x_min, y_min, x_max, y_max};
  if (!b.valid()) {
    std::ostringstream os;
    os << "degenerate box " << b;
    throw DegenerateBox(os.str());
  }
  return b;
}

std::ostream& operator<<(std::ostream& os, const BBox& b) {
  return os << '(' << b.x_min << ", " << b.y_min << ", " << b.x_max << ", " << b.y_max << ')';
}

bool EdgeErrorModel::valid() const noexcept {
  return sigma_vertical >= 0.0 && sigma_horizontal >= 0.0 && scale > 0.0 &&
         std::isfinite(mean_vertical) && std::isfinite(mean_horizontal) &&
         std::isfinite(sigma_vertical) && std::isfinite(sigma_horizontal) && std::isfinite(scale);
}

EdgeErrorModel EdgeErrorModel::detector_default() {
  return EdgeErrorModel{0.0, 0.08, 0.0, 0.14, 1.0};
}

EdgeErrorModel EdgeErrorModel::scaled(double factor) const {
  EdgeErrorModel m = *this;
  m.scale *= factor;
  return m;
}

double iou(const BBox& a, const BBox& b) noexcept {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

BBox expand(const BBox& box, double ratio) {
  const double dx = ratio * box.width();
  const double dy = ratio * box.height();
  return {box.x_min - dx, box.y_min - dy, box.x_max + dx, box.y_max + dy};
}

BBox apply_edge_shifts(const BBox& box, const EdgeShifts& s) noexcept {
  const double w = box.width();
  const double h = box.height();
  return {box.x_min + s.left * w, box.y_min + s.top * h, box.x_max + s.right * w,
          box.y_max + s.bottom * h};
}

double truncated_normal(Rng& rng, double mean, double sigma) {
  if (sigma <= 0.0) return mean;
  std::normal_distribution<double> normal(0.0, 1.0);
  double z = normal(rng);
  while (std::abs(z) > 3.0) z = normal(rng);
  return mean + sigma * z;
}

BBox perturb(const BBox& box, const EdgeErrorModel& model, Rng& rng) {
  for (int attempt = 0; attempt < kMaxPerturbAttempts; ++attempt) {
    EdgeShifts s;
    s.left = model.scale * truncated_normal(rng, model.mean_vertical, model.sigma_vertical);
    s.right = model.scale * truncated_normal(rng, model.mean_vertical, model.sigma_vertical);
    s.top = model.scale * truncated_normal(rng, model.mean_horizontal, model.sigma_horizontal);
    s.bottom = model.scale * truncated_normal(rng, model.mean_horizontal, model.sigma_horizontal);
    const BBox out = apply_edge_shifts(box, s);
    if (out.valid() && out.width() >= kMinPerturbedSide && out.height() >= kMinPerturbedSide) {
      return out;
    }
  }
  return box;
}

BBox clip(const BBox& box, double image_w, double image_h) {
  return BBox::checked(std::max(box.x_min, 0.0), std::max(box.y_min, 0.0),
                       std::min(box.x_max, image_w), std::min(box.y_max, image_h));
}

PatchTransform make_patch_transform(const BBox& window, int output_size) {
  PatchTransform t;
  t.window = window;
  t.output_size = output_size;
  const double w = window.width();
  const double h = window.height();
  t.scale = output_size / std::max(w, h);
  // The dominant side fills the square exactly; no rounding residue.
  t.pad_right = w >= h ? 0.0 : output_size - w * t.scale;
  t.pad_bottom = h >= w ? 0.0 : output_size - h * t.scale;
  return t;
}

PatchCoords to_patch_coords(const PatchTransform& t, const BBox& box) noexcept {
  const double k = t.scale / t.output_size;
  return {(box.x_min - t.window.x_min) * k, (box.y_min - t.window.y_min) * k,
          (box.x_max - t.window.x_min) * k, (box.y_max - t.window.y_min) * k};
}

BBox from_patch_coords(const PatchTransform& t, const PatchCoords& c) {
  const double k = t.output_size / t.scale;
  return BBox::checked(c[0] * k + t.window.x_min, c[1] * k + t.window.y_min,
                       c[2] * k + t.window.x_min, c[3] * k + t.window.y_min);
}

EdgeErrors edge_errors(const BBox& pred, const BBox& truth) noexcept {
  return {std::abs(pred.x_min - truth.x_min), std::abs(pred.x_max - truth.x_max),
          std::abs(pred.y_min - truth.y_min), std::abs(pred.y_max - truth.y_max)};
}

}  // namespace tightbox
