#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "tightbox/dataset.hpp"
#include "tightbox/evaluation.hpp"
#include "tightbox/model.hpp"
#include "tightbox/training.hpp"

namespace tightbox {

// JSON forms use the struct field names. merge_* applies only the keys that
// are present and throws ConfigError on unknown keys or invalid values.

nlohmann::ordered_json to_json(const SampleConfig& c);
nlohmann::ordered_json to_json(const ModelSpec& s);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const EvalConfig& c);

void merge(EdgeErrorModel& m, const nlohmann::json& j);
void merge(SampleConfig& c, const nlohmann::json& j);
void merge(ModelSpec& s, const nlohmann::json& j);
void merge(TrainConfig& c, const nlohmann::json& j);
void merge(EvalConfig& c, const nlohmann::json& j);

/// Reads a JSON object from disk. Throws IoError or ConfigError.
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace tightbox
