#include <pthread.h>
#include <signal.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tightbox/config.hpp"
#include "tightbox/dataset.hpp"
#include "tightbox/errors.hpp"
#include "tightbox/evaluation.hpp"
#include "tightbox/image.hpp"
#include "tightbox/interp.hpp"
#include "tightbox/manifest.hpp"
#include "tightbox/model.hpp"
#include "tightbox/service.hpp"
#include "tightbox/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tightbox;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Where error.json goes if the command fails.
fs::path g_error_dir;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// A config file is either the struct's JSON or {"train": {...}, "eval": {...}}.
json config_section(const std::string& path, const char* section) {
  if (path.empty()) return json::object();
  json j = read_json_file(path);
  if (!j.is_object()) throw ConfigError(path + " must hold a JSON object");
  if (j.contains("train") || j.contains("eval")) return j.value(section, json::object());
  return j;
}

// Accepts either a bare error model or the `stats` output that wraps one.
EdgeErrorModel read_error_model(const std::string& path) {
  json j = read_json_file(path);
  if (j.contains("error_model")) j = j["error_model"];
  EdgeErrorModel m;
  merge(m, j);
  return m;
}

std::vector<LabeledInstance> with_truth(const std::vector<LabeledInstance>& labels) {
  std::vector<LabeledInstance> out;
  for (const auto& l : labels) {
    if (l.true_box) out.push_back(l);
  }
  return out;
}

std::string format_frame(const std::string& pattern, int frame) {
  static const std::regex spec(R"(%(0?)(\d*)d)");
  std::smatch m;
  if (!std::regex_search(pattern, m, spec)) throw ConfigError("frame pattern needs a %d or %0Nd field");
  std::string number = std::to_string(frame);
  const std::size_t width = m[2].length() ? std::stoul(m[2]) : 0;
  if (number.size() < width) number.insert(0, width - number.size(), m[1].length() ? '0' : ' ');
  return m.prefix().str() + number + m.suffix().str();
}

// ---- shared flag groups ------------------------------------------------------

struct TrainFlags {
  TrainConfig d;
  std::string config, error_model, backbone = to_string(BackboneKind::tiny), optimizer = to_string(OptimizerKind::adam),
                                     pooling;
  std::vector<CLI::Option*> opts;
  CLI::Option *epochs, *batch, *lr, *opt, *seed, *patch, *expand, *fraction, *scale, *val, *flip, *bb, *pool, *delta;

  void add(CLI::App* app, bool with_backbone) {
    app->add_option("--config", config, "JSON config (TrainConfig field names)")->check(CLI::ExistingFile);
    epochs = app->add_option("--epochs", d.epochs, "Training epochs");
    batch = app->add_option("--batch-size", d.batch_size, "Mini-batch size");
    lr = app->add_option("--lr", d.learning_rate, "Learning rate");
    opt = app->add_option("--optimizer", optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
    seed = app->add_option("--seed", d.seed, "Random seed");
    patch = app->add_option("--patch-size", d.sample.patch_size, "Network input size");
    expand = app->add_option("--expand-ratio", d.sample.expand_ratio, "Window expansion per edge");
    fraction = app->add_option("--fraction", d.data_fraction, "Share of the training set used, in (0, 1]");
    scale = app->add_option("--error-scale", d.error_scale, "Multiplier on the error model's sigmas");
    val = app->add_option("--val-fraction", d.val_fraction, "Share held out for validation");
    flip = app->add_flag("--flip", d.flip, "Random horizontal flips");
    delta = app->add_option("--huber-delta", d.loss.huber_delta, "Huber loss threshold");
    app->add_option("--error-model", error_model, "Error model JSON (e.g. from `stats`)")->check(CLI::ExistingFile);
    bb = pool = nullptr;
    if (with_backbone) {
      bb = app->add_option("--backbone", backbone, "tiny, vgg16, resnet50 or mobilenet");
      pool = app->add_option("--pooling", pooling, "flatten or global_average (default per backbone)");
    }
  }

  // Built-in default < config file < flags.
  TrainConfig resolve(TrainConfig base) const {
    merge(base, config_section(config, "train"));
    if (!error_model.empty()) base.sample.error_model = read_error_model(error_model);
    auto given = [](const CLI::Option* o) { return o && o->count() > 0; };
    if (given(epochs)) base.epochs = d.epochs;
    if (given(batch)) base.batch_size = d.batch_size;
    if (given(lr)) base.learning_rate = d.learning_rate;
    if (given(opt)) base.optimizer = parse_optimizer(optimizer);
    if (given(seed)) base.seed = d.seed;
    if (given(patch)) base.sample.patch_size = d.sample.patch_size;
    if (given(expand)) base.sample.expand_ratio = d.sample.expand_ratio;
    if (given(fraction)) base.data_fraction = d.data_fraction;
    if (given(scale)) base.error_scale = d.error_scale;
    if (given(val)) base.val_fraction = d.val_fraction;
    if (given(flip)) base.flip = d.flip;
    if (given(delta)) base.loss.huber_delta = d.loss.huber_delta;
    if (given(bb)) base.model.backbone = parse_backbone(backbone);
    if (given(pool)) base.model.pooling = parse_pooling(pooling);
    base.model.input_size = base.sample.patch_size;
    if (!base.valid()) throw ConfigError("invalid training configuration");
    return base;
  }
};

struct EvalFlags {
  EvalConfig d;
  std::string config, scenario = to_string(Scenario::perturbed_gt), normalization = to_string(Normalization::per_box),
                      error_model;
  CLI::Option *tol, *scen, *seed, *norm;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON config (EvalConfig field names)")->check(CLI::ExistingFile);
    tol = app->add_option("--tolerances", d.tolerances, "Tolerances in % of the longest edge");
    scen = app->add_option("--scenario", scenario, "prelabel or perturbed_gt")
               ->check(CLI::IsMember({"prelabel", "perturbed_gt"}));
    seed = app->add_option("--seed", d.seed, "Seed for perturbed_gt");
    norm = app->add_option("--normalization", normalization, "per_box or pooled")
               ->check(CLI::IsMember({"per_box", "pooled"}));
    app->add_option("--error-model", error_model, "Error model JSON for perturbed_gt (default: checkpoint's)")
        ->check(CLI::ExistingFile);
  }

  EvalConfig resolve(EvalConfig base) const {
    merge(base, config_section(config, "eval"));
    if (!error_model.empty()) base.error_model = read_error_model(error_model);
    if (tol->count()) base.tolerances = d.tolerances;
    if (scen->count()) base.scenario = parse_scenario(scenario);
    if (seed->count()) base.seed = d.seed;
    if (norm->count()) base.normalization = parse_normalization(normalization);
    if (!base.valid()) throw ConfigError("invalid evaluation configuration");
    return base;
  }
};

void print_history_line(int epoch, const TrainHistory& h) {
  std::fprintf(stderr, "epoch %d  loss %.6f  val_mae_le %.3f  %.1fs\n", epoch + 1, h.loss.back(), h.val_mae_le.back(),
               h.seconds.back());
}

// ---- commands ------------------------------------------------------------------

struct SynthArgs {
  int n = 100;
  std::uint64_t seed = 0;
  int size = 128;
  std::string background = "mixed";
  std::string out;
  bool prelabels = false;
  double sigma_v = EdgeErrorModel::detector_default().sigma_vertical;
  double sigma_h = EdgeErrorModel::detector_default().sigma_horizontal;
  int sequence_frames = 0;
  int key_interval = 5;
};

int run_synth(const SynthArgs& a) {
  RunManifest man;
  man.command = "synth";
  man.seed = a.seed;
  man.config = {{"n", a.n},
                {"seed", a.seed},
                {"size", a.size},
                {"background", a.background},
                {"prelabels", a.prelabels},
                {"sigma_vertical", a.sigma_v},
                {"sigma_horizontal", a.sigma_h},
                {"sequence_frames", a.sequence_frames},
                {"key_interval", a.key_interval}};
  const fs::path out = a.out;
  fs::create_directories(out / "images");
  const Background bg = parse_background(a.background);

  std::vector<SynthItem> items;
  if (a.sequence_frames > 0) {
    if (a.key_interval < 1 || a.sequence_frames < a.key_interval + 1) {
      throw ConfigError("sequence needs at least key_interval + 1 frames");
    }
    items = synth_sequence(a.sequence_frames, a.seed, a.size, bg);
  } else {
    fs::create_directories(out / "masks");
    items = synth_generate(a.n, a.seed, a.size, bg);
  }

  std::vector<LabeledInstance> labels, pre;
  EdgeErrorModel em = EdgeErrorModel::detector_default();
  em.sigma_vertical = a.sigma_v;
  em.sigma_horizontal = a.sigma_h;
  if (!em.valid()) throw ConfigError("sigmas must be >= 0");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    io::write_png(out / "images" / it.instance.image_id, it.image);
    if (a.sequence_frames == 0) io::write_mask(out / "masks" / it.instance.image_id, it.mask);
    labels.push_back(it.instance);
    if (a.prelabels) {
      Rng rng = make_stream(a.seed, {0x707265, i});
      LabeledInstance p = it.instance;
      p.source = LabelSource::detector;
      p.prelabel_box = perturb(*it.instance.true_box, em, rng);
      p.true_box.reset();
      pre.push_back(p);
    }
  }
  save_labels(out / "labels.jsonl", labels);
  man.outputs["labels"] = "labels.jsonl";
  if (a.prelabels) {
    save_labels(out / "prelabels.jsonl", pre);
    man.outputs["prelabels"] = "prelabels.jsonl";
  }
  if (a.sequence_frames > 0) {
    TrackSequence seq;
    seq.track_id = "synth";
    seq.key_interval = a.key_interval;
    for (int f = 0; f < a.sequence_frames; f += a.key_interval) seq.keyframes.push_back({f, *items[f].instance.true_box});
    save_track(out / "track.json", seq);
    man.outputs["track"] = "track.json";
  }
  man.notes["images"] = items.size();
  write_manifest(out, man);
  std::printf("wrote %zu images to %s\n", items.size(), (out / "images").string().c_str());
  return 0;
}

struct ExtractArgs {
  std::string masks, images, out, mask_suffix, image_suffix, class_tag = "pedestrian";
  int class_id = -1;
  int min_pixels = kDefaultMinPixels;
};

int run_extract(const ExtractArgs& a) {
  RunManifest man;
  man.command = "extract";
  man.inputs = {{"masks", a.masks}};
  if (!a.images.empty()) man.inputs["images"] = a.images;
  man.config = {{"mask_suffix", a.mask_suffix}, {"image_suffix", a.image_suffix}, {"class_id", a.class_id},
                {"min_pixels", a.min_pixels},   {"class", a.class_tag}};
  std::vector<LabeledInstance> labels;
  std::size_t n_masks = 0;
  for (const auto& rel : io::list_images(a.masks)) {
    std::string image_id = rel;
    if (!a.mask_suffix.empty()) {
      if (rel.size() < a.mask_suffix.size() || rel.compare(rel.size() - a.mask_suffix.size(), a.mask_suffix.size(), a.mask_suffix) != 0) {
        continue;
      }
      image_id = rel.substr(0, rel.size() - a.mask_suffix.size()) + a.image_suffix;
    }
    if (!a.images.empty() && !fs::is_regular_file(fs::path(a.images) / image_id)) {
      throw MissingFrame("no image " + image_id + " for mask " + rel);
    }
    ++n_masks;
    const InstanceMask mask = io::read_mask(fs::path(a.masks) / rel);
    for (const auto& inst : mask_to_instances(mask, a.min_pixels)) {
      if (a.class_id >= 0 && static_cast<int>(inst.id / 1000) != a.class_id) continue;
      if (a.class_id >= 0 && inst.id < 1000) continue;
      LabeledInstance l;
      l.image_id = image_id;
      l.true_box = inst.box;
      l.class_tag = a.class_tag;
      l.source = LabelSource::ground_truth;
      labels.push_back(l);
    }
  }
  fs::create_directories(a.out);
  save_labels(fs::path(a.out) / "labels.jsonl", labels);
  man.outputs["labels"] = "labels.jsonl";
  man.notes = {{"masks", n_masks}, {"instances", labels.size()}};
  write_manifest(a.out, man);
  std::printf("extracted %zu instances from %zu masks\n", labels.size(), n_masks);
  return 0;
}

struct StatsArgs {
  std::string gt, pre, out;
  double iou = 0.5;
};

int run_stats(const StatsArgs& a) {
  RunManifest man;
  man.command = "stats";
  man.inputs = {{"gt", a.gt}, {"pre", a.pre}};
  man.config = {{"iou_threshold", a.iou}};
  const auto gt = load_labels(a.gt);
  const auto pre = load_labels(a.pre);
  const auto paired = pair_by_image(gt, pre, a.iou);
  std::vector<BoxPair> pairs;
  for (const auto& p : paired) pairs.push_back({*p.true_box, *p.prelabel_box});
  const EdgeErrorModel m = fit_error_model(pairs);
  nlohmann::ordered_json j;
  j["error_model"] = to_json(m);
  j["n_pairs"] = pairs.size();
  j["n_gt"] = gt.size();
  j["n_pre"] = pre.size();
  j["iou_threshold"] = a.iou;
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "error_model.json", j.dump(2) + "\n");
  man.outputs["error_model"] = "error_model.json";
  man.notes = {{"n_pairs", pairs.size()}};
  write_manifest(a.out, man);
  std::printf("%zu matched pairs\nvertical edges:   mean %+.4f  sigma %.4f\nhorizontal edges: mean %+.4f  sigma %.4f\n",
              pairs.size(), m.mean_vertical, m.sigma_vertical, m.mean_horizontal, m.sigma_horizontal);
  return 0;
}

struct TrainArgs {
  std::string labels, images, out, checkpoint;
  TrainFlags flags;
};

int run_train(TrainArgs& a, bool fine) {
  RunManifest man;
  man.command = fine ? "finetune" : "train";
  man.inputs = {{"labels", a.labels}, {"images", a.images}};
  TrainConfig base;
  std::optional<RefinementModel> start;
  if (fine) {
    man.inputs["checkpoint"] = a.checkpoint;
    SampleConfig sample;
    start = load_refinement_model(a.checkpoint, &sample);
    base.sample = sample;
    base.model = start->spec();
  }
  const TrainConfig cfg = a.flags.resolve(base);
  man.config = to_json(cfg);
  man.seed = cfg.seed;
  const auto instances = with_truth(load_labels(a.labels));
  DirectoryImages images(a.images);
  TrainHooks hooks;
  hooks.on_epoch = print_history_line;
  TrainResult r = fine ? finetune(*start, instances, images, cfg, hooks) : train(instances, images, cfg, hooks);
  const fs::path out = a.out;
  save_checkpoint(out, r.model, cfg.sample);
  save_history(out / "history.json", r.history);
  man.outputs = {{"weights", "model.bin"}, {"sidecar", "model.json"}, {"history", "history.json"}};
  man.notes = {{"train_instances", r.split.training.size()},
               {"val_instances", r.split.validation.size()},
               {"skipped_samples", r.skipped_samples}};
  write_manifest(out, man);
  std::printf("saved checkpoint to %s\n", out.string().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint, labels, prelabels, images, out;
  double iou = 0.5;
  EvalFlags flags;
};

int run_eval(EvalArgs& a) {
  RunManifest man;
  man.command = "eval";
  man.inputs = {{"checkpoint", a.checkpoint}, {"labels", a.labels}, {"images", a.images}};
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  EvalConfig base;
  base.error_model = ck.sample.error_model;
  const EvalConfig cfg = a.flags.resolve(base);
  man.config = to_json(cfg);
  man.seed = cfg.seed;
  std::vector<LabeledInstance> instances;
  const auto labels = load_labels(a.labels);
  if (!a.prelabels.empty()) {
    man.inputs["prelabels"] = a.prelabels;
    instances = pair_by_image(labels, load_labels(a.prelabels), a.iou);
  } else {
    instances = with_truth(labels);
  }
  DirectoryImages images(a.images);
  const EvalReport report = evaluate(*ck.model, instances, images, ck.sample, cfg);
  const RenderedReport rendered = report_render(report);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "report.json", rendered.json);
  write_text(fs::path(a.out) / "report.txt", rendered.text);
  man.outputs = {{"report_json", "report.json"}, {"report_text", "report.txt"}};
  write_manifest(a.out, man);
  std::fputs(rendered.text.c_str(), stdout);
  return 0;
}

struct RefineArgs {
  std::string checkpoint, labels, images, out;
};

int run_refine(const RefineArgs& a) {
  RunManifest man;
  man.command = "refine";
  man.inputs = {{"checkpoint", a.checkpoint}, {"labels", a.labels}, {"images", a.images}};
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  man.config = to_json(ck.sample);
  const auto labels = load_labels(a.labels);
  std::vector<BBox> rough;
  for (const auto& l : labels) rough.push_back(label_box(l));
  DirectoryImages images(a.images);
  std::vector<std::size_t> failures;
  const auto refined = refine_batch(*ck.model, labels, rough, images, ck.sample, &failures);
  std::vector<LabeledInstance> out_labels;
  std::vector<bool> failed(labels.size(), false);
  for (std::size_t i : failures) failed[i] = true;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    LabeledInstance l = labels[i];
    if (l.source == LabelSource::ground_truth) l.true_box.reset();
    if (!failed[i]) l.source = LabelSource::model;
    if (l.source == LabelSource::ground_truth) {
      l.true_box = refined[i];
    } else {
      l.prelabel_box = refined[i];
    }
    out_labels.push_back(l);
  }
  fs::create_directories(a.out);
  save_labels(fs::path(a.out) / "refined.jsonl", out_labels);
  man.outputs["refined"] = "refined.jsonl";
  man.notes = {{"boxes", labels.size()}, {"refine_failures", failures.size()}};
  write_manifest(a.out, man);
  std::printf("refined %zu boxes (%zu kept their rough box)\n", labels.size() - failures.size(), failures.size());
  return 0;
}

struct TrackArgs {
  std::string track, images, checkpoint, out, pattern = "frame_%04d.png", class_tag = "pedestrian";
};

int run_track(const TrackArgs& a) {
  RunManifest man;
  man.command = "track-interp";
  man.inputs = {{"track", a.track}};
  man.config = {{"frame_pattern", a.pattern}, {"class", a.class_tag}};
  const TrackSequence seq = load_track(a.track);
  std::vector<FrameBox> frames;
  if (a.checkpoint.empty()) {
    frames = interpolate_track(seq);
  } else {
    if (a.images.empty()) throw ConfigError("--images is required with --checkpoint");
    man.inputs["checkpoint"] = a.checkpoint;
    man.inputs["images"] = a.images;
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    DirectoryImages images(a.images);
    std::map<int, std::string> frame_images;
    for (int f = seq.keyframes.front().frame; f <= seq.keyframes.back().frame; ++f) {
      frame_images[f] = format_frame(a.pattern, f);
    }
    frames = refine_track(*ck.model, images, frame_images, seq, ck.sample);
  }
  std::vector<LabeledInstance> labels;
  for (const auto& fb : frames) {
    LabeledInstance l;
    l.image_id = format_frame(a.pattern, fb.frame);
    l.class_tag = a.class_tag;
    l.source = fb.source;
    l.prelabel_box = fb.box;
    labels.push_back(l);
  }
  fs::create_directories(a.out);
  save_labels(fs::path(a.out) / "boxes.jsonl", labels);
  man.outputs["boxes"] = "boxes.jsonl";
  man.notes = {{"frames", frames.size()}, {"refined", !a.checkpoint.empty()}};
  write_manifest(a.out, man);
  std::printf("wrote %zu frame boxes\n", frames.size());
  return 0;
}

struct ServeArgs {
  std::string checkpoint, data, labels, host = "127.0.0.1", cors = "*", out;
  int port = kDefaultPort;
  int queue_depth = 32;
  int workers = 1;
};

int run_serve(const ServeArgs& a) {
  RunManifest man;
  man.command = "serve";
  man.inputs = {{"checkpoint", a.checkpoint}, {"data", a.data}};
  man.config = {{"host", a.host}, {"port", a.port}, {"queue_depth", a.queue_depth}, {"workers", a.workers},
                {"cors_origin", a.cors}};
  ServiceConfig cfg;
  cfg.data_root = a.data;
  if (!a.labels.empty()) cfg.labels_path = a.labels;
  cfg.host = a.host;
  cfg.port = a.port;
  cfg.queue_depth = a.queue_depth;
  cfg.inference_workers = a.workers;
  cfg.cors_origin = a.cors;

  // Route SIGINT/SIGTERM to a waiting thread so shutdown happens outside a signal handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  Service service(cfg);
  const int port = service.start();
  std::fprintf(stderr, "listening on http://%s:%d (loading model)\n", a.host.c_str(), port);
  service.load_model(load_checkpoint(a.checkpoint));
  std::fprintf(stderr, "model loaded; serving %zu images\n", service.image_ids().size());
  man.notes = {{"bound_port", port}, {"images", service.image_ids().size()}};
  man.outputs["labels"] = fs::relative(service.labels().path(), a.out).string();
  write_manifest(a.out, man);

  std::thread waiter([&service, set] {
    int sig = 0;
    sigwait(&set, &sig);
    service.stop();
  });
  waiter.join();
  std::fprintf(stderr, "stopped\n");
  return 0;
}

void write_error_json(const std::string& type, const std::string& message, int code) {
  if (g_error_dir.empty()) return;
  try {
    fs::create_directories(g_error_dir);
    nlohmann::ordered_json j{{"error", type}, {"message", message}, {"exit_code", code}};
    write_text(g_error_dir / "error.json", j.dump(2) + "\n");
  } catch (const std::exception&) {
  }
}

template <typename F>
int guarded(const std::string& out, F&& body) {
  g_error_dir = out;
  try {
    return body();
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    write_error_json("IoError", e.what(), kExitRuntime);
    return kExitRuntime;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    write_error_json("ValidationError", e.what(), kExitValidation);
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    write_error_json("RuntimeError", e.what(), kExitRuntime);
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bounding-box refinement toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset (images, masks, labels)");
  c_synth->add_option("--n", synth.n, "Number of images")->check(CLI::PositiveNumber);
  c_synth->add_option("--seed", synth.seed, "Random seed");
  c_synth->add_option("--size", synth.size, "Image side in pixels")->check(CLI::Range(16, 4096));
  c_synth->add_option("--background", synth.background, "flat, noise, texture or mixed")
      ->check(CLI::IsMember({"flat", "noise", "texture", "mixed"}));
  c_synth->add_flag("--prelabels", synth.prelabels, "Also write detector-like pre-labels");
  c_synth->add_option("--sigma-v", synth.sigma_v, "Pre-label sigma for left/right edges (ratio of width)");
  c_synth->add_option("--sigma-h", synth.sigma_h, "Pre-label sigma for top/bottom edges (ratio of height)");
  c_synth->add_option("--sequence-frames", synth.sequence_frames, "Write one moving-shape sequence instead (0 = off)");
  c_synth->add_option("--key-interval", synth.key_interval, "Keyframe spacing for --sequence-frames");
  c_synth->add_option("--out", synth.out, "Output directory")->required();

  ExtractArgs extract;
  auto* c_extract = app.add_subcommand("extract", "Derive ground-truth boxes from instance-id masks");
  c_extract->add_option("--masks", extract.masks, "Directory of instance-id PNGs")->required()->check(CLI::ExistingDirectory);
  c_extract->add_option("--images", extract.images, "Image directory (checks that each image exists)")
      ->check(CLI::ExistingDirectory);
  c_extract->add_option("--mask-suffix", extract.mask_suffix, "Mask filename suffix replaced by --image-suffix");
  c_extract->add_option("--image-suffix", extract.image_suffix, "Image filename suffix");
  c_extract->add_option("--class-id", extract.class_id, "Keep ids with id / 1000 == class id (-1 keeps all)");
  c_extract->add_option("--min-pixels", extract.min_pixels, "Drop components smaller than this");
  c_extract->add_option("--class", extract.class_tag, "Class tag for the labels");
  c_extract->add_option("--out", extract.out, "Output directory")->required();

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "Fit the edge error model from ground truth and pre-labels");
  c_stats->add_option("--gt", stats.gt, "Ground-truth labels")->required()->check(CLI::ExistingFile);
  c_stats->add_option("--pre", stats.pre, "Pre-labels")->required()->check(CLI::ExistingFile);
  c_stats->add_option("--iou", stats.iou, "Matching IoU threshold");
  c_stats->add_option("--out", stats.out, "Output directory")->required();

  TrainArgs train_args;
  auto* c_train = app.add_subcommand("train", "Train a refinement model");
  c_train->add_option("--labels", train_args.labels, "Labels with ground truth")->required()->check(CLI::ExistingFile);
  c_train->add_option("--images", train_args.images, "Image directory")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--out", train_args.out, "Checkpoint directory")->required();
  train_args.flags.add(c_train, true);

  TrainArgs fine_args;
  auto* c_fine = app.add_subcommand("finetune", "Continue training from a checkpoint");
  c_fine->add_option("--checkpoint", fine_args.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_fine->add_option("--labels", fine_args.labels, "Labels with ground truth")->required()->check(CLI::ExistingFile);
  c_fine->add_option("--images", fine_args.images, "Image directory")->required()->check(CLI::ExistingDirectory);
  c_fine->add_option("--out", fine_args.out, "Checkpoint directory")->required();
  fine_args.flags.add(c_fine, false);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Before/after MAE/LE and tolerance tables");
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--labels", eval.labels, "Ground-truth labels")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--prelabels", eval.prelabels, "Pre-labels to pair with the ground truth")->check(CLI::ExistingFile);
  c_eval->add_option("--iou", eval.iou, "Matching IoU threshold for --prelabels");
  c_eval->add_option("--images", eval.images, "Image directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--out", eval.out, "Output directory")->required();
  eval.flags.add(c_eval);

  RefineArgs refine_args;
  auto* c_refine = app.add_subcommand("refine", "Refine every box of a label file");
  c_refine->add_option("--checkpoint", refine_args.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_refine->add_option("--labels", refine_args.labels, "Rough labels")->required()->check(CLI::ExistingFile);
  c_refine->add_option("--images", refine_args.images, "Image directory")->required()->check(CLI::ExistingDirectory);
  c_refine->add_option("--out", refine_args.out, "Output directory")->required();

  TrackArgs track;
  auto* c_track = app.add_subcommand("track-interp", "Interpolate a keyframed track, optionally refining it");
  c_track->add_option("--track", track.track, "Track JSON")->required()->check(CLI::ExistingFile);
  c_track->add_option("--images", track.images, "Frame image directory")->check(CLI::ExistingDirectory);
  c_track->add_option("--checkpoint", track.checkpoint, "Refine in-between frames with this model")
      ->check(CLI::ExistingDirectory);
  c_track->add_option("--frame-pattern", track.pattern, "Image id of frame N (printf-style %0Nd)");
  c_track->add_option("--class", track.class_tag, "Class tag for the output labels");
  c_track->add_option("--out", track.out, "Output directory")->required();

  ServeArgs serve;
  auto* c_serve = app.add_subcommand("serve", "Run the HTTP refinement and label service");
  c_serve->add_option("--checkpoint", serve.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_serve->add_option("--data", serve.data, "Image directory")->required()->check(CLI::ExistingDirectory);
  c_serve->add_option("--labels", serve.labels, "Label store (default <data>/labels.jsonl)");
  c_serve->add_option("--host", serve.host, "Bind address");
  c_serve->add_option("--port", serve.port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  c_serve->add_option("--queue-depth", serve.queue_depth, "Pending refine requests before 429")->check(CLI::PositiveNumber);
  c_serve->add_option("--workers", serve.workers, "Concurrent inferences")->check(CLI::PositiveNumber);
  c_serve->add_option("--cors-origin", serve.cors, "Access-Control-Allow-Origin value");
  c_serve->add_option("--out", serve.out, "Manifest directory (default <data>/.serve)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  if (c_synth->parsed()) return guarded(synth.out, [&] { return run_synth(synth); });
  if (c_extract->parsed()) return guarded(extract.out, [&] { return run_extract(extract); });
  if (c_stats->parsed()) return guarded(stats.out, [&] { return run_stats(stats); });
  if (c_train->parsed()) return guarded(train_args.out, [&] { return run_train(train_args, false); });
  if (c_fine->parsed()) return guarded(fine_args.out, [&] { return run_train(fine_args, true); });
  if (c_eval->parsed()) return guarded(eval.out, [&] { return run_eval(eval); });
  if (c_refine->parsed()) return guarded(refine_args.out, [&] { return run_refine(refine_args); });
  if (c_track->parsed()) return guarded(track.out, [&] { return run_track(track); });
  if (c_serve->parsed()) {
    if (serve.out.empty()) serve.out = (fs::path(serve.data) / ".serve").string();
    return guarded(serve.out, [&] { return run_serve(serve); });
  }
  return kExitValidation;
}
