#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "zsv/io.hpp"

namespace zsv {

// 8-bit single-channel raster.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// An encoded image (PNG/JPEG bytes) as uploaded or embedded.
struct EncodedImage {
  std::string bytes;
  std::string mime = "image/png";
};

inline std::string mime_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "image/png";
}

inline std::string encode_png(const GrayImage& img) {
  cv::Mat mat(img.height, img.width, CV_8UC1, const_cast<std::uint8_t*>(img.pixels.data()));
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", mat, buf)) throw IoError("PNG encoding failed");
  return {buf.begin(), buf.end()};
}

inline GrayImage decode_gray(std::string_view bytes) {
  std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
  cv::Mat mat = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw IoError("cannot decode image");
  GrayImage img(mat.cols, mat.rows);
  for (int y = 0; y < mat.rows; ++y)
    std::copy_n(mat.ptr<std::uint8_t>(y), mat.cols, img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * mat.cols);
  return img;
}

inline void write_png(const GrayImage& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_png(img));
}

inline EncodedImage load_image_file(const std::filesystem::path& path) {
  return {read_file(path), mime_for(path)};
}

// Re-encodes so that the longest side is at most `max_side`. Images already
// within bounds are returned untouched, byte for byte.
inline EncodedImage downscale_for_upload(const EncodedImage& image, int max_side) {
  std::vector<std::uint8_t> buf(image.bytes.begin(), image.bytes.end());
  cv::Mat mat = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw IoError("cannot decode image for upload");
  int longest = std::max(mat.cols, mat.rows);
  if (longest <= max_side) return image;
  double scale = static_cast<double>(max_side) / longest;
  cv::Mat small;
  cv::resize(mat, small, cv::Size(std::max(1, static_cast<int>(mat.cols * scale)),
                                  std::max(1, static_cast<int>(mat.rows * scale))),
             0, 0, cv::INTER_AREA);
  const bool jpeg = image.mime == "image/jpeg";
  std::vector<std::uint8_t> out;
  if (!cv::imencode(jpeg ? ".jpg" : ".png", small, out)) throw IoError("cannot re-encode image");
  return {std::string(out.begin(), out.end()), image.mime};
}

}  // namespace zsv
