#include "tightbox/config.hpp"

#include <fstream>
#include <set>

#include "tightbox/errors.hpp"

namespace tightbox {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

void require_object(const json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
}

void check_keys(const json& j, const std::set<std::string>& allowed, const char* what) {
  require_object(j, what);
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(std::string("unknown key '") + key + "' in " + what);
  }
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

std::string take_string(const json& j, const char* key) {
  std::string s;
  take(j, key, s);
  return s;
}

}  // namespace

ordered_json to_json(const SampleConfig& c) {
  ordered_json j;
  j["expand_ratio"] = c.expand_ratio;
  j["error_model"] = to_json(c.error_model);
  j["patch_size"] = c.patch_size;
  j["pad_value"] = c.pad_value;
  return j;
}

ordered_json to_json(const ModelSpec& s) {
  ordered_json j;
  j["backbone"] = to_string(s.backbone);
  j["input_size"] = s.input_size;
  j["head"] = s.head;
  if (s.pooling) {
    j["pooling"] = to_string(*s.pooling);
  } else {
    j["pooling"] = nullptr;
  }
  j["init"] = s.init;
  return j;
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["optimizer"] = to_string(c.optimizer);
  j["seed"] = c.seed;
  j["sample"] = to_json(c.sample);
  j["loss"] = {{"huber_delta", c.loss.huber_delta}};
  j["data_fraction"] = c.data_fraction;
  j["error_scale"] = c.error_scale;
  j["val_fraction"] = c.val_fraction;
  j["flip"] = c.flip;
  j["model"] = to_json(c.model);
  return j;
}

ordered_json to_json(const EvalConfig& c) {
  ordered_json j;
  j["tolerances"] = c.tolerances;
  j["scenario"] = to_string(c.scenario);
  j["error_model"] = to_json(c.error_model);
  j["seed"] = c.seed;
  j["normalization"] = to_string(c.normalization);
  return j;
}

void merge(EdgeErrorModel& m, const json& j) {
  check_keys(j, {"mean_vertical", "sigma_vertical", "mean_horizontal", "sigma_horizontal", "scale"}, "error_model");
  take(j, "mean_vertical", m.mean_vertical);
  take(j, "sigma_vertical", m.sigma_vertical);
  take(j, "mean_horizontal", m.mean_horizontal);
  take(j, "sigma_horizontal", m.sigma_horizontal);
  take(j, "scale", m.scale);
  if (!m.valid()) throw ConfigError("invalid error_model (sigmas >= 0, scale > 0)");
}

void merge(SampleConfig& c, const json& j) {
  check_keys(j, {"expand_ratio", "error_model", "patch_size", "pad_value"}, "sample");
  take(j, "expand_ratio", c.expand_ratio);
  take(j, "patch_size", c.patch_size);
  take(j, "pad_value", c.pad_value);
  if (j.contains("error_model")) merge(c.error_model, j["error_model"]);
  if (!c.valid()) throw ConfigError("invalid sample config (expand_ratio >= 0, patch_size >= 8, pad_value in [-1, 1])");
}

void merge(ModelSpec& s, const json& j) {
  check_keys(j, {"backbone", "input_size", "head", "pooling", "init"}, "model");
  try {
    if (j.contains("backbone")) s.backbone = parse_backbone(take_string(j, "backbone"));
    take(j, "input_size", s.input_size);
    take(j, "head", s.head);
    if (j.contains("pooling")) {
      if (j["pooling"].is_null()) {
        s.pooling.reset();
      } else {
        s.pooling = parse_pooling(take_string(j, "pooling"));
      }
    }
    take(j, "init", s.init);
  } catch (const ConfigError&) {
    throw;
  } catch (const UnsupportedBackbone&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

void merge(TrainConfig& c, const json& j) {
  check_keys(j,
             {"epochs", "batch_size", "learning_rate", "optimizer", "seed", "sample", "loss", "data_fraction",
              "error_scale", "val_fraction", "flip", "model"},
             "train config");
  take(j, "epochs", c.epochs);
  take(j, "batch_size", c.batch_size);
  take(j, "learning_rate", c.learning_rate);
  if (j.contains("optimizer")) {
    try {
      c.optimizer = parse_optimizer(take_string(j, "optimizer"));
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  take(j, "seed", c.seed);
  if (j.contains("sample")) merge(c.sample, j["sample"]);
  if (j.contains("loss")) {
    check_keys(j["loss"], {"huber_delta"}, "loss");
    take(j["loss"], "huber_delta", c.loss.huber_delta);
    if (!(c.loss.huber_delta > 0)) throw ConfigError("huber_delta must be > 0");
  }
  take(j, "data_fraction", c.data_fraction);
  take(j, "error_scale", c.error_scale);
  take(j, "val_fraction", c.val_fraction);
  take(j, "flip", c.flip);
  if (j.contains("model")) merge(c.model, j["model"]);
  if (!c.valid()) {
    throw ConfigError(
        "invalid train config (epochs >= 1, batch_size >= 1, learning_rate > 0, 0 < data_fraction <= 1, error_scale > 0, "
        "0 <= val_fraction < 1)");
  }
}

void merge(EvalConfig& c, const json& j) {
  check_keys(j, {"tolerances", "scenario", "error_model", "seed", "normalization"}, "eval config");
  take(j, "tolerances", c.tolerances);
  try {
    if (j.contains("scenario")) c.scenario = parse_scenario(take_string(j, "scenario"));
    if (j.contains("normalization")) c.normalization = parse_normalization(take_string(j, "normalization"));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("error_model")) merge(c.error_model, j["error_model"]);
  take(j, "seed", c.seed);
  if (!c.valid()) throw ConfigError("invalid eval config (tolerances must be positive and strictly increasing)");
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string() + " is not valid JSON");
  return j;
}

}  // namespace tightbox
