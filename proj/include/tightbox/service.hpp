#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "tightbox/dataset.hpp"
#include "tightbox/image.hpp"
#include "tightbox/model.hpp"

namespace httplib {
class Server;
}

namespace tightbox {

/// The box a stored label carries: true_box for ground truth, otherwise the
/// pre-label box.
BBox label_box(const LabeledInstance& label);

/// Durable JSON-lines label store. Every accepted insert is appended and
/// fsync'ed before add() returns; removals rewrite the file atomically.
/// Thread-safe, single writer.
class LabelStore {
 public:
  /// Opens (creating if missing) the store at `path` and loads existing labels.
  explicit LabelStore(std::filesystem::path path);

  /// Assigns an id (16 hex chars of a content hash, collision-checked) when
  /// the label has none or its id is already taken. Returns the id.
  std::string add(LabeledInstance label);
  /// All labels, or only those of one image, in insertion order.
  std::vector<LabeledInstance> list(const std::optional<std::string>& image_id = std::nullopt) const;
  std::optional<LabeledInstance> find(const std::string& id) const;
  bool remove(const std::string& id);
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  void rewrite_locked();

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::vector<LabeledInstance> labels_;
  std::unordered_map<std::string, std::size_t> index_;
  int fd_ = -1;
};

struct ServiceConfig {
  std::filesystem::path data_root;
  /// Defaults to <data_root>/labels.jsonl when empty.
  std::filesystem::path labels_path;
  std::string host = "127.0.0.1";
  int port = 8321;
  /// Pending refine requests beyond this are rejected with 429.
  int queue_depth = 32;
  /// Concurrent inferences; 1 serializes refinement.
  int inference_workers = 1;
  int default_page_size = 50;
  int max_page_size = 1000;
  std::string cors_origin = "*";
  int http_threads = 8;
};

inline constexpr int kDefaultPort = 8321;
inline constexpr double kMinRefineArea = 16.0;

/// HTTP front end for refinement and the label store.
class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Installs the model. /health answers 503 until this is called.
  void load_model(Checkpoint checkpoint);
  bool model_loaded() const;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port; throws IoError when binding fails.
  int start();
  /// Serves on the calling thread until stop().
  void run();
  void stop();
  int port() const { return port_; }

  LabelStore& labels() { return store_; }
  const std::vector<std::string>& image_ids() const { return image_ids_; }

 private:
  void install_routes();
  int bind();

  ServiceConfig cfg_;
  DirectoryImages images_;
  std::vector<std::string> image_ids_;
  LabelStore store_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;

  mutable std::shared_mutex model_mutex_;
  std::optional<Checkpoint> checkpoint_;

  std::mutex inference_mutex_;
  std::condition_variable inference_cv_;
  int active_inferences_ = 0;
  std::atomic<int> pending_refines_{0};
};

}  // namespace tightbox
