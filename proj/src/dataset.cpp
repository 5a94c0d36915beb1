#include "tightbox/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tightbox/errors.hpp"

namespace tightbox {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

std::string to_string(LabelSource s) {
  switch (s) {
    case LabelSource::ground_truth: return "ground_truth";
    case LabelSource::detector: return "detector";
    case LabelSource::tracker: return "tracker";
    case LabelSource::human: return "human";
    case LabelSource::model: return "model";
  }
  return "ground_truth";
}

LabelSource parse_label_source(const std::string& s) {
  if (s == "ground_truth") return LabelSource::ground_truth;
  if (s == "detector") return LabelSource::detector;
  if (s == "tracker") return LabelSource::tracker;
  if (s == "human") return LabelSource::human;
  if (s == "model") return LabelSource::model;
  throw Error("unknown label source '" + s + "'");
}

bool SampleConfig::valid() const noexcept {
  return expand_ratio >= 0.0 && patch_size >= 8 && error_model.valid() && pad_value >= -1.0f &&
         pad_value <= 1.0f;
}

// ---- masks ------------------------------------------------------------------

std::vector<MaskInstance> mask_to_instances(const InstanceMask& mask, int min_pixels) {
  const int w = mask.width;
  const int h = mask.height;
  std::vector<std::uint8_t> seen(mask.ids.size(), 0);
  std::map<std::uint32_t, MaskInstance> found;
  std::vector<int> stack;
  for (int y0 = 0; y0 < h; ++y0) {
    for (int x0 = 0; x0 < w; ++x0) {
      const std::size_t start = static_cast<std::size_t>(y0) * w + x0;
      const std::uint32_t id = mask.ids[start];
      if (id == 0 || seen[start]) continue;
      // Flood fill one 4-connected component.
      int xmin = x0, xmax = x0, ymin = y0, ymax = y0;
      std::size_t count = 0;
      stack.assign(1, static_cast<int>(start));
      seen[start] = 1;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int x = p % w;
        const int y = p / w;
        ++count;
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        const int nx[4] = {x - 1, x + 1, x, x};
        const int ny[4] = {y, y, y - 1, y + 1};
        for (int k = 0; k < 4; ++k) {
          if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
          const std::size_t q = static_cast<std::size_t>(ny[k]) * w + nx[k];
          if (!seen[q] && mask.ids[q] == id) {
            seen[q] = 1;
            stack.push_back(static_cast<int>(q));
          }
        }
      }
      if (count < static_cast<std::size_t>(std::max(min_pixels, 0))) continue;
      const BBox comp{double(xmin), double(ymin), double(xmax + 1), double(ymax + 1)};
      auto [it, inserted] = found.try_emplace(id, MaskInstance{id, comp, count});
      if (!inserted) {
        auto& b = it->second.box;
        b = {std::min(b.x_min, comp.x_min), std::min(b.y_min, comp.y_min),
             std::max(b.x_max, comp.x_max), std::max(b.y_max, comp.y_max)};
        it->second.pixel_count += count;
      }
    }
  }
  std::vector<MaskInstance> out;
  out.reserve(found.size());
  for (auto& [id, inst] : found) out.push_back(inst);
  return out;
}

// ---- matching / statistics --------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> match_prelabels(const std::vector<BBox>& gt,
                                                                 const std::vector<BBox>& pre,
                                                                 double iou_threshold) {
  struct Candidate {
    double iou;
    std::size_t g, p;
  };
  std::vector<Candidate> cands;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    for (std::size_t p = 0; p < pre.size(); ++p) {
      const double v = iou(gt[g], pre[p]);
      if (v >= iou_threshold) cands.push_back({v, g, p});
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& b) { return a.iou > b.iou; });
  std::vector<bool> gt_used(gt.size(), false), pre_used(pre.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& c : cands) {
    if (gt_used[c.g] || pre_used[c.p]) continue;
    gt_used[c.g] = pre_used[c.p] = true;
    out.emplace_back(c.g, c.p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

EdgeErrorModel fit_error_model(const std::vector<BoxPair>& pairs) {
  if (pairs.size() < 2) throw InsufficientData("fit_error_model needs at least 2 pairs");
  std::vector<double> vertical, horizontal;
  vertical.reserve(2 * pairs.size());
  horizontal.reserve(2 * pairs.size());
  for (const auto& [t, p] : pairs) {
    const double w = t.width();
    const double h = t.height();
    vertical.push_back((p.x_min - t.x_min) / w);
    vertical.push_back((p.x_max - t.x_max) / w);
    horizontal.push_back((p.y_min - t.y_min) / h);
    horizontal.push_back((p.y_max - t.y_max) / h);
  }
  auto stats = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(ss / v.size())};
  };
  const auto [mv, sv] = stats(vertical);
  const auto [mh, sh] = stats(horizontal);
  return EdgeErrorModel{mv, sv, mh, sh, 1.0};
}

// ---- patches ------------------------------------------------------------------

namespace {

struct Span {
  int first = 0;
  std::vector<double> weights;  // overlap of [first + k, first + k + 1) with the source interval
};

Span source_span(double a, double b) {
  Span s;
  s.first = static_cast<int>(std::floor(a));
  const int last = static_cast<int>(std::ceil(b)) - 1;
  for (int i = s.first; i <= last; ++i) {
    const double lo = std::max(a, double(i));
    const double hi = std::min(b, double(i + 1));
    s.weights.push_back(std::max(0.0, hi - lo));
  }
  return s;
}

}  // namespace

ImagePatch crop_letterboxed(const Image& image, const BBox& window, const SampleConfig& cfg) {
  const int size = cfg.patch_size;
  ImagePatch patch;
  patch.size = size;
  patch.transform = make_patch_transform(window, size);
  patch.pixels.assign(static_cast<std::size_t>(3) * size * size, cfg.pad_value);
  const double raw_pad = (static_cast<double>(cfg.pad_value) + 1.0) * 127.5;
  const double inv = 1.0 / patch.transform.scale;
  const double cw = patch.transform.content_width();
  const double ch = patch.transform.content_height();
  const int cols = std::min(size, static_cast<int>(std::ceil(cw - 0.5)));
  const int rows = std::min(size, static_cast<int>(std::ceil(ch - 0.5)));

  std::vector<Span> xs(cols);
  for (int u = 0; u < cols; ++u) xs[u] = source_span(window.x_min + u * inv, window.x_min + (u + 1) * inv);

  const double area = inv * inv;
  std::vector<double> row_acc(static_cast<std::size_t>(image.width) * 3);
  for (int v = 0; v < rows; ++v) {
    const Span ys = source_span(window.y_min + v * inv, window.y_min + (v + 1) * inv);
    for (int u = 0; u < cols; ++u) {
      const Span& sx = xs[u];
      double acc[3] = {0.0, 0.0, 0.0};
      for (std::size_t j = 0; j < ys.weights.size(); ++j) {
        const int y = ys.first + static_cast<int>(j);
        const bool y_in = y >= 0 && y < image.height;
        for (std::size_t i = 0; i < sx.weights.size(); ++i) {
          const int x = sx.first + static_cast<int>(i);
          const double wgt = ys.weights[j] * sx.weights[i];
          if (y_in && x >= 0 && x < image.width) {
            const std::uint8_t* px = &image.rgb[(static_cast<std::size_t>(y) * image.width + x) * 3];
            acc[0] += wgt * px[0];
            acc[1] += wgt * px[1];
            acc[2] += wgt * px[2];
          } else {
            acc[0] += wgt * raw_pad;
            acc[1] += wgt * raw_pad;
            acc[2] += wgt * raw_pad;
          }
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double value = std::clamp(acc[c] / area / 127.5 - 1.0, -1.0, 1.0);
        patch.pixels[(static_cast<std::size_t>(c) * size + v) * size + u] = static_cast<float>(value);
      }
    }
  }
  return patch;
}

TrainingSample sample_training_patch(const Image& image, const LabeledInstance& instance,
                                     const SampleConfig& cfg, Rng& rng) {
  if (!instance.true_box) throw Error("instance without true box in " + instance.image_id);
  const BBox& truth = *instance.true_box;
  const BBox window = perturb(expand(truth, cfg.expand_ratio), cfg.error_model, rng);
  TrainingSample s;
  s.patch = crop_letterboxed(image, window, cfg);
  s.patch.image_id = instance.image_id;
  s.target = to_patch_coords(s.patch.transform, truth);
  return s;
}

ImagePatch make_inference_patch(const Image& image, const BBox& rough_box, const SampleConfig& cfg) {
  ImagePatch p = crop_letterboxed(image, expand(rough_box, cfg.expand_ratio), cfg);
  return p;
}

Image mirror_horizontal(const Image& image) {
  Image out(image.width, image.height);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(image.width - 1 - x, y, c) = image.at(x, y, c);
    }
  }
  return out;
}

BBox mirror_horizontal(const BBox& box, double image_w) noexcept {
  return {image_w - box.x_max, box.y_min, image_w - box.x_min, box.y_max};
}

// ---- synthetic data ---------------------------------------------------------

std::string to_string(Background b) {
  switch (b) {
    case Background::flat: return "flat";
    case Background::noise: return "noise";
    case Background::texture: return "texture";
    case Background::mixed: return "mixed";
  }
  return "flat";
}

Background parse_background(const std::string& s) {
  if (s == "flat") return Background::flat;
  if (s == "noise") return Background::noise;
  if (s == "texture") return Background::texture;
  if (s == "mixed") return Background::mixed;
  throw Error("unknown background '" + s + "'");
}

bool Silhouette::contains(double x, double y) const {
  switch (kind) {
    case ShapeKind::ellipse: {
      const double c = std::cos(angle), s = std::sin(angle);
      const double dx = x - cx, dy = y - cy;
      const double u = (c * dx + s * dy) / semi_x;
      const double v = (-s * dx + c * dy) / semi_y;
      return u * u + v * v <= 1.0;
    }
    case ShapeKind::capsule: {
      const double vx = x1 - x0, vy = y1 - y0;
      const double len2 = vx * vx + vy * vy;
      double t = len2 > 0.0 ? ((x - x0) * vx + (y - y0) * vy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double px = x0 + t * vx - x, py = y0 + t * vy - y;
      return px * px + py * py <= radius * radius;
    }
    case ShapeKind::polygon: {
      bool inside = false;
      const std::size_t n = vertices.size();
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const auto [xi, yi] = vertices[i];
        const auto [xj, yj] = vertices[j];
        if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
      }
      return inside;
    }
  }
  return false;
}

Silhouette Silhouette::translated(double dx, double dy) const {
  Silhouette s = *this;
  s.cx += dx;
  s.cy += dy;
  s.x0 += dx;
  s.x1 += dx;
  s.y0 += dy;
  s.y1 += dy;
  for (auto& [x, y] : s.vertices) {
    x += dx;
    y += dy;
  }
  return s;
}

Silhouette Silhouette::scaled_about_center(double sx, double sy) const {
  Silhouette s = *this;
  s.semi_x *= sx;
  s.semi_y *= sy;
  s.x0 = cx + (x0 - cx) * sx;
  s.x1 = cx + (x1 - cx) * sx;
  s.y0 = cy + (y0 - cy) * sy;
  s.y1 = cy + (y1 - cy) * sy;
  s.radius *= std::min(sx, sy);
  for (auto& [x, y] : s.vertices) {
    x = cx + (x - cx) * sx;
    y = cy + (y - cy) * sy;
  }
  return s;
}

InstanceMask rasterize(const Silhouette& shape, int width, int height, std::uint32_t id,
                       std::optional<BBox>* box) {
  InstanceMask mask(width, height);
  int xmin = width, ymin = height, xmax = -1, ymax = -1;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!shape.contains(x + 0.5, y + 0.5)) continue;
      mask.at(x, y) = id;
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (box) {
    if (xmax >= 0) {
      *box = BBox{double(xmin), double(ymin), double(xmax + 1), double(ymax + 1)};
    } else {
      box->reset();
    }
  }
  return mask;
}

SceneStyle random_style(Background background, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneStyle st;
  st.background = background;
  const double bg_lum = 20.0 + 215.0 * unit(rng);
  double fg_lum;
  const bool can_go_up = bg_lum + 90.0 <= 250.0;
  const bool can_go_down = bg_lum - 90.0 >= 5.0;
  if (can_go_up && (!can_go_down || unit(rng) < 0.5)) {
    fg_lum = bg_lum + 90.0 + (250.0 - bg_lum - 90.0) * unit(rng);
  } else {
    fg_lum = bg_lum - 90.0 - (bg_lum - 90.0 - 5.0) * unit(rng);
  }
  for (int c = 0; c < 3; ++c) {
    st.bg[c] = static_cast<std::uint8_t>(std::clamp(bg_lum + 40.0 * (unit(rng) - 0.5), 0.0, 255.0));
    st.fg[c] = static_cast<std::uint8_t>(std::clamp(fg_lum + 40.0 * (unit(rng) - 0.5), 0.0, 255.0));
  }
  if (background == Background::noise) st.noise_sigma = 6.0 + 8.0 * unit(rng);
  if (background == Background::texture) {
    st.stripe_amp = 15.0 + 15.0 * unit(rng);
    st.stripe_freq = 0.05 + 0.15 * unit(rng);
    st.stripe_angle = kPi * unit(rng);
    st.stripe_phase = 2.0 * kPi * unit(rng);
    st.noise_sigma = 3.0;
  }
  return st;
}

Silhouette random_silhouette(int image_size, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double h = image_size * (0.3 + 0.4 * unit(rng));
  const double w = h * (0.3 + 0.4 * unit(rng));
  const double margin = 2.0;
  const double cx = w / 2 + margin + (image_size - w - 2 * margin) * unit(rng);
  const double cy = h / 2 + margin + (image_size - h - 2 * margin) * unit(rng);
  Silhouette s;
  s.cx = cx;
  s.cy = cy;
  s.semi_x = w / 2;
  s.semi_y = h / 2;
  const int kind = static_cast<int>(unit(rng) * 3.0);
  switch (kind) {
    case 0:
      s.kind = ShapeKind::ellipse;
      s.angle = 0.5 * (unit(rng) - 0.5);
      break;
    case 1: {
      s.kind = ShapeKind::capsule;
      s.radius = w / 2;
      const double lean = 0.3 * (unit(rng) - 0.5) * w;
      const double half = std::max(0.0, h / 2 - s.radius);
      s.x0 = cx + lean;
      s.y0 = cy - half;
      s.x1 = cx - lean;
      s.y1 = cy + half;
      break;
    }
    default: {
      s.kind = ShapeKind::polygon;
      const int n = 8 + static_cast<int>(unit(rng) * 5.0);
      for (int k = 0; k < n; ++k) {
        const double a = 2.0 * kPi * (k + 0.6 * (unit(rng) - 0.5)) / n;
        const double r = 0.7 + 0.3 * unit(rng);
        s.vertices.emplace_back(cx + r * s.semi_x * std::cos(a), cy + r * s.semi_y * std::sin(a));
      }
      break;
    }
  }
  return s;
}

Image render_scene(const InstanceMask& mask, const SceneStyle& st, std::uint64_t noise_key) {
  Image img(mask.width, mask.height);
  Rng rng = make_stream(noise_key, {0x6e6f697365});
  std::normal_distribution<double> normal(0.0, 1.0);
  const double kx = std::cos(st.stripe_angle) * st.stripe_freq * 2.0 * kPi;
  const double ky = std::sin(st.stripe_angle) * st.stripe_freq * 2.0 * kPi;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const bool fg = mask.at(x, y) != 0;
      double offset = 0.0;
      if (!fg && st.stripe_amp > 0.0) offset = st.stripe_amp * std::sin(kx * x + ky * y + st.stripe_phase);
      const double n = st.noise_sigma > 0.0 ? st.noise_sigma * normal(rng) : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double base = fg ? st.fg[c] : st.bg[c];
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(base + offset + n), 0L, 255L));
      }
    }
  }
  return img;
}

std::vector<SynthItem> synth_generate(int n, std::uint64_t seed, int image_size, Background background) {
  if (n < 1) throw Error("synth_generate needs n >= 1");
  if (image_size < 16) throw Error("synth_generate needs image_size >= 16");
  std::vector<SynthItem> items;
  items.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rng rng = make_stream(seed, {0x73796e7468, static_cast<std::uint64_t>(i)});
    Background bg = background;
    if (bg == Background::mixed) bg = static_cast<Background>(i % 3);
    SynthItem item;
    std::optional<BBox> box;
    // Resample in the (practically unreachable) case of an empty raster.
    do {
      const Silhouette shape = random_silhouette(image_size, rng);
      item.mask = rasterize(shape, image_size, image_size, 1, &box);
    } while (!box);
    const SceneStyle style = random_style(bg, rng);
    item.image = render_scene(item.mask, style, rng());
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05d.png", i);
    item.instance.image_id = name;
    item.instance.true_box = *box;
    item.instance.class_tag = "pedestrian";
    item.instance.source = LabelSource::ground_truth;
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<SynthItem> synth_sequence(int n_frames, std::uint64_t seed, int image_size, Background background,
                                      double travel, const std::string& prefix) {
  if (n_frames < 2) throw Error("synth_sequence needs at least 2 frames");
  if (image_size < 16) throw Error("synth_sequence needs image_size >= 16");
  Rng rng = make_stream(seed, {0x736571});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (background == Background::mixed) background = static_cast<Background>(rng() % 3);
  const SceneStyle style = random_style(background, rng);

  // A base shape of moderate size, scaled to 0.8 at the first frame and 1.2 at the last.
  Silhouette base = random_silhouette(image_size, rng);
  const double h = image_size * (0.3 + 0.1 * unit(rng));
  base = base.scaled_about_center(h / (2 * base.semi_y), h / (2 * base.semi_y));
  const double angle = 2.0 * kPi * unit(rng);
  const double dist = travel * image_size;
  const double start_x = image_size / 2.0 - 0.5 * dist * std::cos(angle);
  const double start_y = image_size / 2.0 - 0.5 * dist * std::sin(angle);
  base = base.translated(start_x - base.cx, start_y - base.cy);

  std::vector<SynthItem> frames;
  frames.reserve(n_frames);
  for (int f = 0; f < n_frames; ++f) {
    const double u = static_cast<double>(f) / (n_frames - 1);
    const double progress = u * u;
    const double grow = 0.8 + 0.4 * progress;
    Silhouette shape = base.scaled_about_center(grow, grow)
                           .translated(progress * dist * std::cos(angle), progress * dist * std::sin(angle));
    SynthItem item;
    std::optional<BBox> box;
    item.mask = rasterize(shape, image_size, image_size, 1, &box);
    if (!box) throw Error("synthetic sequence left the image");
    item.image = render_scene(item.mask, style, make_stream(seed, {0x736571, static_cast<std::uint64_t>(f)})());
    char name[64];
    std::snprintf(name, sizeof name, "%s_%04d.png", prefix.c_str(), f);
    item.instance.image_id = name;
    item.instance.true_box = *box;
    item.instance.source = LabelSource::ground_truth;
    frames.push_back(std::move(item));
  }
  return frames;
}

// ---- label files --------------------------------------------------------------

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json box_json(const BBox& b) { return ordered_json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

BBox parse_box(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw ParseError(std::string("missing \"") + key + "\"", line);
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 4) throw ParseError(std::string("\"") + key + "\" must be 4 numbers", line);
  double v[4];
  for (int i = 0; i < 4; ++i) {
    if (!a[i].is_number()) throw ParseError(std::string("\"") + key + "\" must be 4 numbers", line);
    v[i] = a[i].get<double>();
  }
  const BBox b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) throw ParseError(std::string("invalid box in \"") + key + "\"", line);
  return b;
}

}  // namespace

std::string format_label_line(const LabeledInstance& l) {
  ordered_json j;
  if (!l.id.empty()) j["id"] = l.id;
  j["image"] = l.image_id;
  j["class"] = l.class_tag;
  const bool gt = l.source == LabelSource::ground_truth;
  const auto& box = gt ? l.true_box : l.prelabel_box;
  if (!box) throw Error("label for " + l.image_id + " has no box for its source");
  j["box"] = box_json(*box);
  j["source"] = to_string(l.source);
  j["visible"] = l.visible;
  if (!gt && l.true_box) j["truth"] = box_json(*l.true_box);
  return j.dump();
}

LabeledInstance parse_label_line(const std::string& line, std::size_t line_number) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_number);
  }
  if (!j.is_object()) throw ParseError("expected a JSON object", line_number);
  LabeledInstance l;
  try {
    if (!j.contains("image") || !j["image"].is_string()) throw ParseError("missing \"image\"", line_number);
    l.image_id = j["image"].get<std::string>();
    const BBox box = parse_box(j, "box", line_number);
    if (j.contains("id")) l.id = j["id"].get<std::string>();
    if (j.contains("class")) l.class_tag = j["class"].get<std::string>();
    if (j.contains("source")) l.source = parse_label_source(j["source"].get<std::string>());
    if (j.contains("visible")) l.visible = j["visible"].get<bool>();
    if (l.source == LabelSource::ground_truth) {
      l.true_box = box;
    } else {
      l.prelabel_box = box;
      if (j.contains("truth")) l.true_box = parse_box(j, "truth", line_number);
    }
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(e.what(), line_number);
  }
  return l;
}

std::vector<LabeledInstance> parse_labels(const std::string& text) {
  std::vector<LabeledInstance> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_label_line(line, n));
  }
  return out;
}

std::vector<LabeledInstance> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_labels(ss.str());
}

void save_labels(const std::filesystem::path& path, const std::vector<LabeledInstance>& labels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : labels) out << format_label_line(l) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<LabeledInstance> pair_by_image(const std::vector<LabeledInstance>& ground_truth,
                                           const std::vector<LabeledInstance>& prelabels,
                                           double iou_threshold) {
  std::map<std::string, std::vector<const LabeledInstance*>> gt_by, pre_by;
  for (const auto& g : ground_truth) {
    if (g.true_box) gt_by[g.image_id].push_back(&g);
  }
  for (const auto& p : prelabels) {
    if (p.prelabel_box) pre_by[p.image_id].push_back(&p);
  }
  std::vector<LabeledInstance> out;
  for (const auto& [image, gts] : gt_by) {
    auto it = pre_by.find(image);
    if (it == pre_by.end()) continue;
    std::vector<BBox> g, p;
    for (auto* x : gts) g.push_back(*x->true_box);
    for (auto* x : it->second) p.push_back(*x->prelabel_box);
    for (auto [gi, pi] : match_prelabels(g, p, iou_threshold)) {
      LabeledInstance l = *it->second[pi];
      l.true_box = g[gi];
      l.class_tag = gts[gi]->class_tag;
      l.visible = gts[gi]->visible;
      out.push_back(std::move(l));
    }
  }
  return out;
}

}  // namespace tightbox
