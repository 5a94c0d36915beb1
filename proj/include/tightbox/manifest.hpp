#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace tightbox {

/// Record of one command run, written as manifest.json beside its outputs.
struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;
  /// Output files, relative to the output directory.
  std::map<std::string, std::string> outputs;
  /// Anything else worth keeping (counts, summaries).
  nlohmann::ordered_json notes = nlohmann::ordered_json::object();
  std::chrono::system_clock::time_point started = std::chrono::system_clock::now();
};

/// Hashes every listed output and writes <out_dir>/manifest.json.
void write_manifest(const std::filesystem::path& out_dir, const RunManifest& m);

}  // namespace tightbox
