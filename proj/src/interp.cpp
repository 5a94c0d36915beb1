#include "tightbox/interp.hpp"

#include <fstream>
#include <sstream>

#include "tightbox/errors.hpp"

namespace tightbox {

void TrackSequence::validate() const {
  if (keyframes.size() < 2) throw Error("track '" + track_id + "' needs at least 2 keyframes");
  if (key_interval < 1) throw Error("key_interval must be >= 1");
  for (std::size_t i = 0; i < keyframes.size(); ++i) {
    if (!keyframes[i].box.valid()) throw DegenerateBox("invalid keyframe box at frame " + std::to_string(keyframes[i].frame));
    if (i > 0 && keyframes[i].frame <= keyframes[i - 1].frame) throw Error("keyframe indices must strictly increase");
  }
}

std::vector<FrameBox> interpolate_track(const TrackSequence& seq) {
  seq.validate();
  std::vector<FrameBox> out;
  for (std::size_t k = 0; k + 1 < seq.keyframes.size(); ++k) {
    const Keyframe& a = seq.keyframes[k];
    const Keyframe& b = seq.keyframes[k + 1];
    out.push_back({a.frame, a.box, LabelSource::human});
    const double span = b.frame - a.frame;
    for (int f = a.frame + 1; f < b.frame; ++f) {
      const double t = (f - a.frame) / span;
      auto lerp = [t](double p, double q) { return p + t * (q - p); };
      out.push_back({f,
                     {lerp(a.box.x_min, b.box.x_min), lerp(a.box.y_min, b.box.y_min), lerp(a.box.x_max, b.box.x_max),
                      lerp(a.box.y_max, b.box.y_max)},
                     LabelSource::tracker});
    }
  }
  out.push_back({seq.keyframes.back().frame, seq.keyframes.back().box, LabelSource::human});
  return out;
}

std::vector<FrameBox> refine_track(const BoxRegressor& model, const ImageSource& images,
                                   const std::map<int, std::string>& frame_images, const TrackSequence& seq,
                                   const SampleConfig& cfg) {
  std::vector<FrameBox> frames = interpolate_track(seq);
  std::vector<LabeledInstance> pending;
  std::vector<BBox> rough;
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].source == LabelSource::human) continue;
    auto it = frame_images.find(frames[i].frame);
    if (it == frame_images.end() || !images.contains(it->second)) {
      throw MissingFrame("no image for frame " + std::to_string(frames[i].frame) + " of track '" + seq.track_id + "'");
    }
    LabeledInstance inst;
    inst.image_id = it->second;
    pending.push_back(std::move(inst));
    rough.push_back(frames[i].box);
    slots.push_back(i);
  }
  if (pending.empty()) return frames;
  const std::vector<BBox> refined = refine_batch(model, pending, rough, images, cfg);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    frames[slots[k]].box = refined[k];
    frames[slots[k]].source = LabelSource::model;
  }
  return frames;
}

nlohmann::ordered_json to_json(const TrackSequence& seq) {
  nlohmann::ordered_json j;
  j["track_id"] = seq.track_id;
  j["key_interval"] = seq.key_interval;
  j["keyframes"] = nlohmann::ordered_json::array();
  for (const auto& k : seq.keyframes) {
    j["keyframes"].push_back({{"frame", k.frame}, {"box", {k.box.x_min, k.box.y_min, k.box.x_max, k.box.y_max}}});
  }
  return j;
}

TrackSequence track_from_json(const nlohmann::json& j) {
  TrackSequence seq;
  try {
    seq.track_id = j.value("track_id", std::string());
    seq.key_interval = j.value("key_interval", 5);
    for (const auto& k : j.at("keyframes")) {
      const auto& b = k.at("box");
      if (!b.is_array() || b.size() != 4) throw Error("keyframe box must be 4 numbers");
      seq.keyframes.push_back({k.at("frame").get<int>(),
                               {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed track: ") + e.what());
  }
  seq.validate();
  return seq;
}

TrackSequence load_track(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return track_from_json(j);
}

void save_track(const std::filesystem::path& path, const TrackSequence& seq) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(seq).dump(2) << '\n';
}

}  // namespace tightbox
