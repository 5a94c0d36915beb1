#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tightbox/dataset.hpp"
#include "tightbox/geometry.hpp"
#include "tightbox/image.hpp"
#include "tightbox/evaluation.hpp"
#include "tightbox/model.hpp"

namespace tightbox {

struct Keyframe {
  int frame = 0;
  BBox box;
  friend bool operator==(const Keyframe&, const Keyframe&) = default;
};

struct TrackSequence {
  std::string track_id;
  std::vector<Keyframe> keyframes;
  int key_interval = 5;

  /// Throws Error unless frames strictly increase, there are >= 2 keys and
  /// every box is valid.
  void validate() const;
  friend bool operator==(const TrackSequence&, const TrackSequence&) = default;
};

struct FrameBox {
  int frame = 0;
  BBox box;
  LabelSource source = LabelSource::tracker;
};

/// One box per frame in [first key, last key]; keyframes reproduce their
/// input boxes exactly, others blend the bracketing keys linearly.
std::vector<FrameBox> interpolate_track(const TrackSequence& seq);

/// Keyframes pass through untouched (source human); in-between frames are
/// refined (source model). `frame_images` maps frame index to image id in
/// `images`. Throws MissingFrame.
std::vector<FrameBox> refine_track(const BoxRegressor& model, const ImageSource& images,
                                   const std::map<int, std::string>& frame_images, const TrackSequence& seq,
                                   const SampleConfig& cfg);

nlohmann::ordered_json to_json(const TrackSequence& seq);
TrackSequence track_from_json(const nlohmann::json& j);
TrackSequence load_track(const std::filesystem::path& path);
void save_track(const std::filesystem::path& path, const TrackSequence& seq);

}  // namespace tightbox
