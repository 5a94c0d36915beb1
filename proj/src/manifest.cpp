#include "tightbox/manifest.hpp"

#include <ctime>
#include <fstream>

#include "tightbox/errors.hpp"
#include "tightbox/hash.hpp"

namespace tightbox {

namespace {

std::string iso_time(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void write_manifest(const std::filesystem::path& out_dir, const RunManifest& m) {
  const auto now = std::chrono::system_clock::now();
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  nlohmann::ordered_json hashes = nlohmann::ordered_json::object();
  for (const auto& [name, rel] : m.outputs) {
    const auto path = out_dir / rel;
    if (std::filesystem::is_regular_file(path)) hashes[rel] = sha256_file(path);
  }
  j["artifact_hashes"] = hashes;
  j["notes"] = m.notes;
  j["started_at"] = iso_time(m.started);
  j["wall_seconds"] = std::chrono::duration<double>(now - m.started).count();
  std::filesystem::create_directories(out_dir);
  std::ofstream out(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace tightbox
