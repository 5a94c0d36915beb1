#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace tightbox {

/// 8-bit RGB image, row-major, channels interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Grid of instance ids; 0 is background. Cityscapes ids (class*1000 + index)
/// are accepted as-is.
struct InstanceMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> ids;

  InstanceMask() = default;
  InstanceMask(int w, int h) : width(w), height(h), ids(static_cast<std::size_t>(w) * h, 0) {}

  std::uint32_t& at(int x, int y) { return ids[static_cast<std::size_t>(y) * width + x]; }
  std::uint32_t at(int x, int y) const { return ids[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const InstanceMask&, const InstanceMask&) = default;
};

namespace io {

/// Reads PNG/JPEG as 8-bit RGB (grayscale is replicated).
Image read_image(const std::filesystem::path& path);

struct ImageSize {
  int width = 0;
  int height = 0;
};
ImageSize read_image_size(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& image);

/// Encodes as PNG bytes.
std::vector<std::uint8_t> encode_png(const Image& image);

/// Reads a single-channel 8- or 16-bit id map.
InstanceMask read_mask(const std::filesystem::path& path);

/// Writes a single-channel 16-bit PNG. Throws IoError for ids > 65535.
void write_mask(const std::filesystem::path& path, const InstanceMask& mask);

/// Lists image files (png/jpg/jpeg) under `root` as sorted relative paths
/// using '/' separators.
std::vector<std::string> list_images(const std::filesystem::path& root);

}  // namespace io

/// Resolves image ids (relative paths) to pixels.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  /// Throws IoError for unknown ids.
  virtual const Image& get(const std::string& image_id) const = 0;
  virtual bool contains(const std::string& image_id) const = 0;
};

class InMemoryImages final : public ImageSource {
 public:
  void add(std::string id, Image image) { images_[std::move(id)] = std::move(image); }
  const Image& get(const std::string& image_id) const override;
  bool contains(const std::string& image_id) const override { return images_.count(image_id) > 0; }
  std::size_t size() const { return images_.size(); }

 private:
  std::map<std::string, Image> images_;
};

/// Loads lazily from a directory and keeps decoded images. Thread-safe.
class DirectoryImages final : public ImageSource {
 public:
  explicit DirectoryImages(std::filesystem::path root) : root_(std::move(root)) {}
  const Image& get(const std::string& image_id) const override;
  bool contains(const std::string& image_id) const override;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path resolve(const std::string& image_id) const;

  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, std::unique_ptr<Image>> cache_;
};

}  // namespace tightbox
