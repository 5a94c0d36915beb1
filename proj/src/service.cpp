#include "tightbox/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include <nlohmann/json.hpp>

#include "tightbox/errors.hpp"
#include "tightbox/hash.hpp"

namespace tightbox {

using json = nlohmann::json;

BBox label_box(const LabeledInstance& l) {
  const auto& b = l.source == LabelSource::ground_truth ? l.true_box : l.prelabel_box;
  if (!b) throw Error("label " + l.id + " has no box");
  return *b;
}

// ---- label store ----------------------------------------------------------------

namespace {

void write_all(int fd, const std::string& data) {
  std::size_t done = 0;
  while (done < data.size()) {
    const ssize_t n = ::write(fd, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("label store write failed");
    }
    done += static_cast<std::size_t>(n);
  }
}

std::string content_id(const LabeledInstance& l, std::uint64_t salt) {
  const BBox b = label_box(l);
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  std::ostringstream os;
  os.precision(17);
  os << l.image_id << '\n'
     << b.x_min << ' ' << b.y_min << ' ' << b.x_max << ' ' << b.y_max << '\n'
     << l.class_tag << '\n'
     << std::chrono::duration_cast<std::chrono::nanoseconds>(now).count() << '\n'
     << salt;
  return sha256_hex(os.str()).substr(0, 16);
}

}  // namespace

LabelStore::LabelStore(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  bool needs_rewrite = false;
  if (std::filesystem::exists(path_)) {
    for (auto& l : load_labels(path_)) {
      if (l.id.empty() || index_.count(l.id)) {
        l.id = content_id(l, labels_.size());
        needs_rewrite = true;
      }
      index_[l.id] = labels_.size();
      labels_.push_back(std::move(l));
    }
  }
  if (needs_rewrite) rewrite_locked();
  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open label store " + path_.string());
}

std::string LabelStore::add(LabeledInstance label) {
  label_box(label);
  std::lock_guard lock(mutex_);
  if (label.id.empty() || index_.count(label.id)) {
    std::uint64_t salt = 0;
    do {
      label.id = content_id(label, salt++);
    } while (index_.count(label.id));
  }
  write_all(fd_, format_label_line(label) + "\n");
  if (::fsync(fd_) != 0) throw IoError("label store fsync failed");
  index_[label.id] = labels_.size();
  labels_.push_back(label);
  return label.id;
}

std::vector<LabeledInstance> LabelStore::list(const std::optional<std::string>& image_id) const {
  std::lock_guard lock(mutex_);
  if (!image_id) return labels_;
  std::vector<LabeledInstance> out;
  for (const auto& l : labels_) {
    if (l.image_id == *image_id) out.push_back(l);
  }
  return out;
}

std::optional<LabeledInstance> LabelStore::find(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return labels_[it->second];
}

bool LabelStore::remove(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = index_.find(id);
  if (it == index_.end()) return false;
  labels_.erase(labels_.begin() + static_cast<std::ptrdiff_t>(it->second));
  index_.clear();
  for (std::size_t i = 0; i < labels_.size(); ++i) index_[labels_[i].id] = i;
  rewrite_locked();
  return true;
}

std::size_t LabelStore::size() const {
  std::lock_guard lock(mutex_);
  return labels_.size();
}

void LabelStore::rewrite_locked() {
  const std::filesystem::path tmp = path_.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot write " + tmp.string());
  std::string data;
  for (const auto& l : labels_) data += format_label_line(l) + "\n";
  write_all(fd, data);
  ::fsync(fd);
  ::close(fd);
  std::filesystem::rename(tmp, path_);
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (fd_ < 0) throw IoError("cannot reopen label store " + path_.string());
  }
}

// ---- HTTP service ---------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

json box_to_json(const BBox& b) { return json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

std::optional<BBox> box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) return std::nullopt;
  double v[4];
  for (int i = 0; i < 4; ++i) {
    if (!j[i].is_number()) return std::nullopt;
    v[i] = j[i].get<double>();
  }
  BBox b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) return std::nullopt;
  return b;
}

json label_to_json(const LabeledInstance& l) {
  return {{"id", l.id},
          {"image", l.image_id},
          {"class", l.class_tag},
          {"box", box_to_json(label_box(l))},
          {"source", to_string(l.source)},
          {"visible", l.visible}};
}

std::string content_type_for(const std::string& id) {
  const auto ext = std::filesystem::path(id).extension().string();
  if (ext == ".png") return "image/png";
  return "image/jpeg";
}

int parse_positive(const std::string& s, int fallback) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size() && v >= 1) return v;
  } catch (const std::exception&) {
  }
  return fallback < 0 ? -1 : -1;
}

}  // namespace

Service::Service(ServiceConfig cfg)
    : cfg_(std::move(cfg)),
      images_(cfg_.data_root),
      image_ids_(io::list_images(cfg_.data_root)),
      store_(cfg_.labels_path.empty() ? cfg_.data_root / "labels.jsonl" : cfg_.labels_path),
      server_(std::make_unique<httplib::Server>()) {
  if (cfg_.queue_depth < 1 || cfg_.inference_workers < 1) throw Error("queue depth and workers must be >= 1");
  const int threads = std::max(2, cfg_.http_threads);
  server_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  // The library default adds SO_REUSEPORT, which lets a second instance share
  // the port silently.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  install_routes();
}

Service::~Service() { stop(); }

void Service::load_model(Checkpoint checkpoint) {
  std::unique_lock lock(model_mutex_);
  checkpoint_ = std::move(checkpoint);
}

bool Service::model_loaded() const {
  std::shared_lock lock(model_mutex_);
  return checkpoint_.has_value();
}

int Service::bind() {
  if (cfg_.port == 0) {
    port_ = server_->bind_to_any_port(cfg_.host);
  } else {
    port_ = server_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1;
  }
  if (port_ < 0) throw IoError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  return port_;
}

int Service::start() {
  bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void Service::run() {
  bind();
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void Service::install_routes() {
  auto& srv = *server_;
  srv.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin}});
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
    res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.set_header("Access-Control-Max-Age", "600");
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    } catch (...) {
      send_error(res, 500, "internal error");
    }
  });

  srv.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    std::shared_lock lock(model_mutex_);
    if (!checkpoint_) {
      send_json(res, 503, {{"status", "loading"}});
      return;
    }
    send_json(res, 200,
              {{"status", "ok"},
               {"model", checkpoint_->sidecar},
               {"coordinates", "pixels; x right, y down; box [x_min, y_min, x_max, y_max] with x_max, y_max exclusive"}});
  });

  srv.Get("/images", [this](const httplib::Request& req, httplib::Response& res) {
    int page = 1, size = cfg_.default_page_size;
    if (req.has_param("page")) page = parse_positive(req.get_param_value("page"), -1);
    if (req.has_param("page_size")) size = parse_positive(req.get_param_value("page_size"), -1);
    if (page < 1 || size < 1 || size > cfg_.max_page_size) {
      send_error(res, 400, "page and page_size must be positive integers (page_size <= " +
                               std::to_string(cfg_.max_page_size) + ")");
      return;
    }
    const std::size_t total = image_ids_.size();
    const std::size_t begin = std::min(total, static_cast<std::size_t>(page - 1) * size);
    const std::size_t end = std::min(total, begin + size);
    json items = json::array();
    for (std::size_t i = begin; i < end; ++i) {
      const auto dims = io::read_image_size(cfg_.data_root / image_ids_[i]);
      items.push_back({{"id", image_ids_[i]}, {"width", dims.width}, {"height", dims.height}});
    }
    send_json(res, 200,
              {{"images", items},
               {"page", page},
               {"page_size", size},
               {"total", total},
               {"next_page", end < total ? json(page + 1) : json(nullptr)}});
  });

  srv.Get(R"(/images/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!std::binary_search(image_ids_.begin(), image_ids_.end(), id)) {
      send_error(res, 404, "unknown image " + id);
      return;
    }
    std::ifstream in(cfg_.data_root / id, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    res.status = 200;
    res.set_content(std::move(bytes), content_type_for(id));
  });

  srv.Post("/refine", [this](const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("image") || !body["image"].is_string() ||
        !body.contains("box")) {
      send_error(res, 400, "expected {\"image\": id, \"box\": [x_min, y_min, x_max, y_max]}");
      return;
    }
    const auto box = box_from_json(body["box"]);
    if (!box || box->area() < kMinRefineArea) {
      send_error(res, 400, "box must be 4 finite numbers with x_min < x_max, y_min < y_max and area >= 16");
      return;
    }
    const std::string id = body["image"].get<std::string>();
    if (!std::binary_search(image_ids_.begin(), image_ids_.end(), id)) {
      send_error(res, 404, "unknown image " + id);
      return;
    }
    std::shared_lock model_lock(model_mutex_);
    if (!checkpoint_) {
      send_error(res, 503, "model not loaded");
      return;
    }
    if (pending_refines_.fetch_add(1) >= cfg_.queue_depth) {
      pending_refines_.fetch_sub(1);
      send_error(res, 429, "refine queue is full");
      return;
    }
    struct Release {
      std::atomic<int>& n;
      ~Release() { n.fetch_sub(1); }
    } release{pending_refines_};

    const Image& image = images_.get(id);
    BBox refined;
    {
      std::unique_lock lock(inference_mutex_);
      inference_cv_.wait(lock, [this] { return active_inferences_ < cfg_.inference_workers; });
      ++active_inferences_;
    }
    try {
      refined = refine(*checkpoint_->model, image, *box, checkpoint_->sample, id);
    } catch (const DegenerateBox& e) {
      {
        std::lock_guard lock(inference_mutex_);
        --active_inferences_;
      }
      inference_cv_.notify_one();
      send_error(res, 422, e.what());
      return;
    } catch (...) {
      {
        std::lock_guard lock(inference_mutex_);
        --active_inferences_;
      }
      inference_cv_.notify_one();
      throw;
    }
    {
      std::lock_guard lock(inference_mutex_);
      --active_inferences_;
    }
    inference_cv_.notify_one();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    send_json(res, 200, {{"box", box_to_json(refined)}, {"latency_ms", ms}});
  });

  srv.Post("/labels", [this](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("image") || !body["image"].is_string()) {
      send_error(res, 400, "expected {\"image\": id, \"class\": str, \"box\": [...], \"source\": str}");
      return;
    }
    const auto box = body.contains("box") ? box_from_json(body["box"]) : std::nullopt;
    if (!box) {
      send_error(res, 400, "box must be 4 finite numbers with x_min < x_max and y_min < y_max");
      return;
    }
    LabeledInstance label;
    label.image_id = body["image"].get<std::string>();
    if (!std::binary_search(image_ids_.begin(), image_ids_.end(), label.image_id)) {
      send_error(res, 400, "unknown image " + label.image_id);
      return;
    }
    try {
      if (body.contains("class")) label.class_tag = body.at("class").get<std::string>();
      label.source = parse_label_source(body.value("source", std::string("human")));
      if (body.contains("visible")) label.visible = body.at("visible").get<bool>();
    } catch (const std::exception& e) {
      send_error(res, 400, e.what());
      return;
    }
    if (label.class_tag.empty()) {
      send_error(res, 400, "class must be non-empty");
      return;
    }
    if (label.source == LabelSource::ground_truth) {
      label.true_box = *box;
    } else {
      label.prelabel_box = *box;
    }
    const std::string id = store_.add(std::move(label));
    send_json(res, 201, {{"id", id}});
  });

  srv.Get("/labels", [this](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> image;
    if (req.has_param("image")) image = req.get_param_value("image");
    json items = json::array();
    for (const auto& l : store_.list(image)) items.push_back(label_to_json(l));
    send_json(res, 200, {{"labels", items}});
  });

  srv.Delete(R"(/labels/([0-9A-Za-z]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!store_.remove(id)) {
      send_error(res, 404, "unknown label " + id);
      return;
    }
    send_json(res, 200, {{"deleted", id}});
  });
}

}  // namespace tightbox
