#include <algorithm>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "tightbox/errors.hpp"
#include "tightbox/image.hpp"

namespace tightbox {
namespace io {

namespace fs = std::filesystem;

Image read_image(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw IoError("cannot read image " + path.string());
  Image img(m.cols, m.rows);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      // OpenCV stores BGR.
      img.at(x, y, 0) = row[x][2];
      img.at(x, y, 1) = row[x][1];
      img.at(x, y, 2) = row[x][0];
    }
  }
  return img;
}

ImageSize read_image_size(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read image " + path.string());
  return {m.cols, m.rows};
}

static cv::Mat to_bgr(const Image& image) {
  cv::Mat m(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width; ++x) {
      row[x] = cv::Vec3b(image.at(x, y, 2), image.at(x, y, 1), image.at(x, y, 0));
    }
  }
  return m;
}

void write_png(const fs::path& path, const Image& image) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), to_bgr(image))) throw IoError("cannot write " + path.string());
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_bgr(image), out)) throw IoError("png encoding failed");
  return out;
}

InstanceMask read_mask(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read mask " + path.string());
  if (m.channels() != 1) throw IoError("mask must be single-channel: " + path.string());
  InstanceMask mask(m.cols, m.rows);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      switch (m.depth()) {
        case CV_8U: mask.at(x, y) = m.at<std::uint8_t>(y, x); break;
        case CV_16U: mask.at(x, y) = m.at<std::uint16_t>(y, x); break;
        case CV_32S: {
          const int v = m.at<std::int32_t>(y, x);
          if (v < 0) throw IoError("negative instance id in " + path.string());
          mask.at(x, y) = static_cast<std::uint32_t>(v);
          break;
        }
        default: throw IoError("unsupported mask depth in " + path.string());
      }
    }
  }
  return mask;
}

void write_mask(const fs::path& path, const InstanceMask& mask) {
  cv::Mat m(mask.height, mask.width, CV_16UC1);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const auto v = mask.at(x, y);
      if (v > 65535) throw IoError("instance id exceeds 16 bits");
      m.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(v);
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

std::vector<std::string> list_images(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") {
      out.push_back(fs::relative(entry.path(), root).generic_string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace io

const Image& InMemoryImages::get(const std::string& image_id) const {
  auto it = images_.find(image_id);
  if (it == images_.end()) throw IoError("unknown image " + image_id);
  return it->second;
}

std::filesystem::path DirectoryImages::resolve(const std::string& image_id) const {
  const std::filesystem::path rel(image_id);
  if (rel.is_absolute() || image_id.find("..") != std::string::npos) {
    throw IoError("invalid image id " + image_id);
  }
  return root_ / rel;
}

bool DirectoryImages::contains(const std::string& image_id) const {
  try {
    return std::filesystem::is_regular_file(resolve(image_id));
  } catch (const IoError&) {
    return false;
  }
}

const Image& DirectoryImages::get(const std::string& image_id) const {
  std::lock_guard lock(mutex_);
  auto it = cache_.find(image_id);
  if (it != cache_.end()) return *it->second;
  auto path = resolve(image_id);
  if (!std::filesystem::is_regular_file(path)) throw IoError("unknown image " + image_id);
  auto img = std::make_unique<Image>(io::read_image(path));
  const Image& ref = *img;
  cache_.emplace(image_id, std::move(img));
  return ref;
}

}  // namespace tightbox
