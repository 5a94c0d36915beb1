#include "tightbox/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "tightbox/errors.hpp"
#include "tightbox/hash.hpp"

namespace tightbox {

std::string to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::tiny: return "tiny";
    case BackboneKind::vgg16: return "vgg16";
    case BackboneKind::resnet50: return "resnet50";
    case BackboneKind::mobilenet: return "mobilenet";
  }
  return "tiny";
}

BackboneKind parse_backbone(const std::string& s) {
  if (s == "tiny") return BackboneKind::tiny;
  if (s == "vgg16" || s == "vgg16-style") return BackboneKind::vgg16;
  if (s == "resnet50" || s == "resnet50-style") return BackboneKind::resnet50;
  if (s == "mobilenet" || s == "mobilenet-style") return BackboneKind::mobilenet;
  throw UnsupportedBackbone("unsupported backbone '" + s + "'");
}

std::string to_string(Pooling p) { return p == Pooling::flatten ? "flatten" : "global_average"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "flatten") return Pooling::flatten;
  if (s == "global_average" || s == "gap") return Pooling::global_average;
  throw Error("unknown pooling '" + s + "'");
}

namespace {

using nn::ChannelAffine;
using nn::Conv2d;
using nn::MaxPool2d;
using nn::ReLU;
using nn::Sequential;

struct Backbone {
  Sequential layers;
  int channels = 0;
  int spatial = 0;  // side of the final feature map
};

// 5 x (3x3 conv, ReLU, 2x max pool) with widths 16-32-64-128-128.
Backbone tiny_backbone(int input) {
  Backbone b;
  int in = 3, side = input;
  for (int width : {16, 32, 64, 128, 128}) {
    b.layers.add<Conv2d>(in, width, 3, 1, 1);
    b.layers.add<ReLU>();
    b.layers.add<MaxPool2d>(2, 2);
    in = width;
    side /= 2;
  }
  b.channels = in;
  b.spatial = side;
  return b;
}

// The 13 convolution layers of VGG16 with their pooling stages.
Backbone vgg16_backbone(int input) {
  Backbone b;
  const int cfg[] = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0};
  int in = 3, side = input;
  for (int v : cfg) {
    if (v == 0) {
      b.layers.add<MaxPool2d>(2, 2);
      side /= 2;
    } else {
      b.layers.add<Conv2d>(in, v, 3, 1, 1);
      b.layers.add<ReLU>();
      in = v;
    }
  }
  b.channels = in;
  b.spatial = side;
  return b;
}

// Stem plus 16 bottleneck blocks (1 + 48 = 49 weighted layers, projections
// excluded). ChannelAffine replaces batch norm; the last affine of each
// residual branch starts at zero so blocks begin as identities.
Backbone resnet50_backbone(int input) {
  Backbone b;
  b.layers.add<Conv2d>(3, 64, 7, 2, 3, 1, false);
  b.layers.add<ChannelAffine>(64);
  b.layers.add<ReLU>();
  b.layers.add<MaxPool2d>(3, 2, 1);
  int side = (input + 6 - 7) / 2 + 1;
  side = (side + 2 - 3) / 2 + 1;
  int in = 64;
  const int blocks[] = {3, 4, 6, 3};
  const int mids[] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    for (int i = 0; i < blocks[stage]; ++i) {
      const int mid = mids[stage];
      const int out = mid * 4;
      const int stride = (stage > 0 && i == 0) ? 2 : 1;
      Sequential main;
      main.add<Conv2d>(in, mid, 1, 1, 0, 1, false);
      main.add<ChannelAffine>(mid);
      main.add<ReLU>();
      main.add<Conv2d>(mid, mid, 3, stride, 1, 1, false);
      main.add<ChannelAffine>(mid);
      main.add<ReLU>();
      main.add<Conv2d>(mid, out, 1, 1, 0, 1, false);
      main.add<ChannelAffine>(out, 0.0f);
      Sequential shortcut;
      if (in != out || stride != 1) {
        shortcut.add<Conv2d>(in, out, 1, stride, 0, 1, false);
        shortcut.add<ChannelAffine>(out);
      }
      b.layers.add<nn::Residual>(std::move(main), std::move(shortcut));
      b.layers.add<ReLU>();
      if (stride == 2) side = (side + 2 - 3) / 2 + 1;
      in = out;
    }
  }
  b.channels = in;
  b.spatial = side;
  return b;
}

// Stem, 8 depthwise-separable blocks and the depthwise half of the ninth:
// 18 convolution layers.
Backbone mobilenet_backbone(int input) {
  Backbone b;
  auto conv_unit = [&](int in, int out, int k, int stride, int groups) {
    b.layers.add<Conv2d>(in, out, k, stride, k / 2, groups, false);
    b.layers.add<ChannelAffine>(out);
    b.layers.add<ReLU>();
  };
  conv_unit(3, 32, 3, 2, 1);
  int side = (input + 2 - 3) / 2 + 1;
  const std::pair<int, int> blocks[] = {{64, 1}, {128, 2}, {128, 1}, {256, 2}, {256, 1}, {512, 2}, {512, 1}, {512, 1}};
  int in = 32;
  for (auto [out, stride] : blocks) {
    conv_unit(in, in, 3, stride, in);
    conv_unit(in, out, 1, 1, 1);
    if (stride == 2) side = (side + 2 - 3) / 2 + 1;
    in = out;
  }
  conv_unit(in, in, 3, 1, in);
  b.channels = in;
  b.spatial = side;
  return b;
}

}  // namespace

RefinementModel RefinementModel::build(BackboneKind kind, int input_size, std::uint64_t seed) {
  ModelSpec spec;
  spec.backbone = kind;
  spec.input_size = input_size;
  return build(spec, seed);
}

RefinementModel RefinementModel::build(const ModelSpec& spec_in, std::uint64_t seed) {
  ModelSpec spec = spec_in;
  if (spec.input_size < 32) throw ShapeMismatch("input_size must be at least 32");
  if (spec.head.empty()) {
    spec.head = spec.backbone == BackboneKind::tiny ? std::vector<int>{256, 64, 4} : std::vector<int>{512, 128, 4};
  }
  if (spec.head.size() != 3 || spec.head.back() != 4) {
    throw ShapeMismatch("head must have three layers ending in 4 outputs");
  }
  if (!spec.pooling) spec.pooling = spec.backbone == BackboneKind::tiny ? Pooling::flatten : Pooling::global_average;

  Backbone bb;
  switch (spec.backbone) {
    case BackboneKind::tiny: bb = tiny_backbone(spec.input_size); break;
    case BackboneKind::vgg16: bb = vgg16_backbone(spec.input_size); break;
    case BackboneKind::resnet50: bb = resnet50_backbone(spec.input_size); break;
    case BackboneKind::mobilenet: bb = mobilenet_backbone(spec.input_size); break;
  }
  if (bb.spatial < 1) throw ShapeMismatch("input_size too small for backbone " + to_string(spec.backbone));

  RefinementModel m;
  m.spec_ = spec;
  m.net_ = std::move(bb.layers);
  int features = bb.channels;
  if (*spec.pooling == Pooling::flatten) {
    m.net_.add<nn::Flatten>();
    features = bb.channels * bb.spatial * bb.spatial;
  } else {
    m.net_.add<nn::GlobalAvgPool>();
  }
  m.net_.add<nn::Linear>(features, spec.head[0]);
  m.net_.add<ReLU>();
  m.net_.add<nn::Linear>(spec.head[0], spec.head[1]);
  m.net_.add<ReLU>();
  m.net_.add<nn::Linear>(spec.head[1], 4).set_init_gain(1.0);

  Rng rng = make_stream(seed, {0x696e6974});
  m.net_.initialize(rng);
  return m;
}

nn::Tensor RefinementModel::forward(const nn::Tensor& batch, nn::Saved* saved) const {
  if (batch.c != 3 || batch.h != spec_.input_size || batch.w != spec_.input_size) {
    throw ShapeMismatch("expected (N, 3, " + std::to_string(spec_.input_size) + ", " +
                        std::to_string(spec_.input_size) + ") input");
  }
  if (batch.n < 1) throw ShapeMismatch("empty batch");
  return net_.forward(batch, saved);
}

void RefinementModel::backward(const nn::Tensor& grad_output, const nn::Saved& saved) {
  net_.backward(grad_output, saved);
}

nn::Tensor stack_patches(std::span<const ImagePatch> patches, int size) {
  nn::Tensor t(static_cast<int>(patches.size()), 3, size, size);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].size != size || patches[i].pixels.size() != t.sample_size()) {
      throw ShapeMismatch("patch size " + std::to_string(patches[i].size) + " does not match model input " +
                          std::to_string(size));
    }
    std::copy(patches[i].pixels.begin(), patches[i].pixels.end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

std::vector<PatchCoords> RefinementModel::predict(std::span<const ImagePatch> patches) const {
  std::vector<PatchCoords> out;
  out.reserve(patches.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < patches.size(); i += kChunk) {
    const auto part = patches.subspan(i, std::min(kChunk, patches.size() - i));
    const nn::Tensor y = forward(stack_patches(part, spec_.input_size));
    for (int n = 0; n < y.n; ++n) {
      const float* r = y.sample(n);
      out.push_back({r[0], r[1], r[2], r[3]});
    }
  }
  return out;
}

std::vector<nn::Param*> RefinementModel::parameters() {
  std::vector<nn::Param*> p;
  net_.parameters(p);
  return p;
}

std::vector<float> RefinementModel::flat_parameters() const {
  std::vector<float> out;
  for (auto* p : const_cast<nn::Sequential&>(net_).parameters_list()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

void RefinementModel::set_flat_parameters(std::span<const float> values) {
  if (values.size() != parameter_count()) throw SizeMismatch("parameter count mismatch");
  std::size_t off = 0;
  for (auto* p : parameters()) {
    std::copy(values.begin() + off, values.begin() + off + p->value.size(), p->value.begin());
    off += p->value.size();
  }
}

std::size_t RefinementModel::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : const_cast<nn::Sequential&>(net_).parameters_list()) n += p->value.size();
  return n;
}

std::vector<std::string> RefinementModel::layer_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < net_.size(); ++i) names.push_back(net_.layer(i).name());
  return names;
}

std::vector<std::string> RefinementModel::leaf_layer_names() const {
  std::vector<std::string> names;
  net_.leaf_names(names);
  return names;
}

nlohmann::json to_json(const EdgeErrorModel& m) {
  return {{"mean_vertical", m.mean_vertical},
          {"sigma_vertical", m.sigma_vertical},
          {"mean_horizontal", m.mean_horizontal},
          {"sigma_horizontal", m.sigma_horizontal},
          {"scale", m.scale}};
}

EdgeErrorModel edge_error_model_from_json(const nlohmann::json& j) {
  EdgeErrorModel m;
  m.mean_vertical = j.value("mean_vertical", 0.0);
  m.sigma_vertical = j.value("sigma_vertical", 0.0);
  m.mean_horizontal = j.value("mean_horizontal", 0.0);
  m.sigma_horizontal = j.value("sigma_horizontal", 0.0);
  m.scale = j.value("scale", 1.0);
  if (!m.valid()) throw Error("invalid error model");
  return m;
}

nlohmann::json RefinementModel::metadata() const {
  return {{"format_version", kCheckpointFormatVersion},
          {"backbone", to_string(spec_.backbone)},
          {"input_size", spec_.input_size},
          {"head", spec_.head},
          {"pooling", to_string(*spec_.pooling)},
          {"init", spec_.init},
          {"parameter_count", parameter_count()}};
}

// ---- loss ----------------------------------------------------------------------

double huber(double r, double delta) noexcept {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

double huber_derivative(double r, double delta) noexcept {
  if (std::abs(r) <= delta) return r;
  return r > 0.0 ? delta : -delta;
}

double huber_loss(std::span<const PatchCoords> pred, std::span<const PatchCoords> target, const LossConfig& cfg) {
  return huber_loss_gradient(pred, target, cfg).loss;
}

LossGradient huber_loss_gradient(std::span<const PatchCoords> pred, std::span<const PatchCoords> target,
                                 const LossConfig& cfg) {
  if (pred.size() != target.size()) throw ShapeMismatch("prediction and target batch sizes differ");
  if (pred.empty()) throw ShapeMismatch("empty batch");
  if (!(cfg.huber_delta > 0.0)) throw Error("huber_delta must be positive");
  LossGradient out;
  out.grad.resize(pred.size());
  const double norm = 1.0 / (4.0 * pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int k = 0; k < 4; ++k) {
      const double r = pred[i][k] - target[i][k];
      out.loss += huber(r, cfg.huber_delta);
      out.grad[i][k] = huber_derivative(r, cfg.huber_delta) * norm;
    }
  }
  out.loss *= norm;
  return out;
}

// ---- refine --------------------------------------------------------------------

PatchCoords order_coordinates(PatchCoords c) noexcept {
  if (c[0] > c[2]) std::swap(c[0], c[2]);
  if (c[1] > c[3]) std::swap(c[1], c[3]);
  return c;
}

BBox finalize_prediction(const PatchTransform& t, const PatchCoords& raw, int image_w, int image_h) {
  const BBox box = from_patch_coords(t, order_coordinates(raw));
  if (box.width() < 1.0 || box.height() < 1.0) throw DegenerateBox("refined box collapsed below 1 px");
  return clip(box, image_w, image_h);
}

BBox refine(const BoxRegressor& model, const Image& image, const BBox& rough_box, const SampleConfig& cfg,
            int image_w, int image_h, const std::string& image_id) {
  SampleConfig c = cfg;
  c.patch_size = model.input_size();
  ImagePatch patch = make_inference_patch(image, rough_box, c);
  patch.image_id = image_id;
  const auto raw = model.predict(std::span<const ImagePatch>(&patch, 1));
  return finalize_prediction(patch.transform, raw.at(0), image_w, image_h);
}

BBox refine(const BoxRegressor& model, const Image& image, const BBox& rough_box, const SampleConfig& cfg,
            const std::string& image_id) {
  return refine(model, image, rough_box, cfg, image.width, image.height, image_id);
}

// ---- reference regressors ------------------------------------------------------

OracleRegressor OracleRegressor::from_labels(const std::vector<LabeledInstance>& labels, int input_size) {
  std::map<std::string, std::vector<BBox>> truths;
  for (const auto& l : labels) {
    if (l.true_box) truths[l.image_id].push_back(*l.true_box);
  }
  return OracleRegressor(std::move(truths), input_size);
}

std::vector<PatchCoords> OracleRegressor::predict(std::span<const ImagePatch> patches) const {
  std::vector<PatchCoords> out;
  for (const auto& p : patches) {
    const BBox* best = nullptr;
    double best_iou = 0.0;
    if (auto it = truths_.find(p.image_id); it != truths_.end()) {
      for (const auto& t : it->second) {
        const double v = iou(t, p.transform.window);
        if (!best || v > best_iou) {
          best = &t;
          best_iou = v;
        }
      }
    }
    out.push_back(to_patch_coords(p.transform, best ? *best : p.transform.window));
  }
  return out;
}

nlohmann::json OracleRegressor::metadata() const {
  return {{"format_version", kCheckpointFormatVersion}, {"backbone", "oracle"}, {"input_size", input_size_},
          {"head", {4}}, {"init", "external"}};
}

std::vector<PatchCoords> WindowRegressor::predict(std::span<const ImagePatch> patches) const {
  std::vector<PatchCoords> out;
  for (const auto& p : patches) out.push_back(to_patch_coords(p.transform, p.transform.window));
  return out;
}

nlohmann::json WindowRegressor::metadata() const {
  return {{"format_version", kCheckpointFormatVersion}, {"backbone", "window"}, {"input_size", input_size_},
          {"head", {4}}, {"init", "external"}};
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'B', 'X', 'W'};

void add_sample_fields(nlohmann::json& j, const SampleConfig& s) {
  j["expand_ratio"] = s.expand_ratio;
  j["pad_value"] = s.pad_value;
  j["error_model"] = to_json(s.error_model);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const RefinementModel& model, const SampleConfig& sample) {
  std::filesystem::create_directories(dir);
  const auto params = model.flat_parameters();
  const std::uint32_t version = kCheckpointFormatVersion;
  const std::uint64_t count = params.size();
  std::string blob(kMagic, 4);
  blob.append(reinterpret_cast<const char*>(&version), sizeof version);
  blob.append(reinterpret_cast<const char*>(&count), sizeof count);
  blob.append(reinterpret_cast<const char*>(params.data()), params.size() * sizeof(float));
  {
    std::ofstream out(dir / "model.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "model.bin").string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  nlohmann::json j = model.metadata();
  add_sample_fields(j, sample);
  j["weights"] = "model.bin";
  j["weights_sha256"] = sha256_hex(blob);
  write_json(dir / "model.json", j);
}

void save_oracle_checkpoint(const std::filesystem::path& dir, const std::filesystem::path& labels,
                            const SampleConfig& sample) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = OracleRegressor({}, sample.patch_size).metadata();
  add_sample_fields(j, sample);
  j["labels"] = std::filesystem::absolute(labels).string();
  write_json(dir / "model.json", j);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw IoError("no checkpoint sidecar in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint sidecar: ") + e.what(), 0);
  }
  if (j.value("format_version", 0) != kCheckpointFormatVersion) throw Error("unsupported checkpoint format version");
  Checkpoint ck;
  ck.sidecar = j;
  ck.sample.expand_ratio = j.value("expand_ratio", 0.15);
  ck.sample.pad_value = j.value("pad_value", -1.0f);
  if (j.contains("error_model")) ck.sample.error_model = edge_error_model_from_json(j["error_model"]);
  ck.sample.patch_size = j.at("input_size").get<int>();
  const std::string backbone = j.at("backbone").get<std::string>();
  if (backbone == "oracle") {
    std::filesystem::path labels = j.at("labels").get<std::string>();
    if (labels.is_relative()) labels = dir / labels;
    ck.model = std::make_shared<OracleRegressor>(OracleRegressor::from_labels(load_labels(labels), ck.sample.patch_size));
  } else if (backbone == "window") {
    ck.model = std::make_shared<WindowRegressor>(ck.sample.patch_size);
  } else {
    ck.model = std::make_shared<RefinementModel>(load_refinement_model(dir));
  }
  return ck;
}

RefinementModel load_refinement_model(const std::filesystem::path& dir, SampleConfig* sample) {
  std::ifstream in(dir / "model.json");
  if (!in) throw IoError("no checkpoint sidecar in " + dir.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  ModelSpec spec;
  spec.backbone = parse_backbone(j.at("backbone").get<std::string>());
  spec.input_size = j.at("input_size").get<int>();
  spec.head = j.at("head").get<std::vector<int>>();
  spec.pooling = parse_pooling(j.value("pooling", std::string("flatten")));
  spec.init = j.value("init", std::string("random"));
  RefinementModel model = RefinementModel::build(spec, 0);

  std::ifstream blob_in(dir / j.value("weights", std::string("model.bin")), std::ios::binary);
  if (!blob_in) throw IoError("missing weights in " + dir.string());
  std::string blob((std::istreambuf_iterator<char>(blob_in)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (blob.size() < header || std::memcmp(blob.data(), kMagic, 4) != 0) throw Error("bad weight blob");
  std::uint64_t count = 0;
  std::memcpy(&count, blob.data() + 4 + sizeof(std::uint32_t), sizeof count);
  if (count != model.parameter_count() || blob.size() != header + count * sizeof(float)) {
    throw SizeMismatch("weight blob does not match the sidecar architecture");
  }
  std::vector<float> values(count);
  std::memcpy(values.data(), blob.data() + header, count * sizeof(float));
  model.set_flat_parameters(values);
  if (sample) {
    sample->expand_ratio = j.value("expand_ratio", 0.15);
    sample->pad_value = j.value("pad_value", -1.0f);
    if (j.contains("error_model")) sample->error_model = edge_error_model_from_json(j["error_model"]);
    sample->patch_size = spec.input_size;
  }
  return model;
}

}  // namespace tightbox
