#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "zsv/hash.hpp"
#include "zsv/image_io.hpp"
#include "zsv/manifest.hpp"

namespace zsv {

struct MediaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateCloud : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FrameSamplerConfig {
  std::size_t frame_count = 8;
};

// Center of each of `frame_count` equal segments over `total_frames`:
// floor((2i + 1) * N / (2T)).
inline std::vector<std::size_t> sample_frame_indices(std::size_t total_frames, std::size_t frame_count) {
  if (total_frames == 0 || frame_count == 0) throw std::invalid_argument("frame counts must be positive");
  std::vector<std::size_t> out(frame_count);
  for (std::size_t i = 0; i < frame_count; ++i) out[i] = (2 * i + 1) * total_frames / (2 * frame_count);
  return out;
}

struct RenderConfig {
  int view_count = 6;
  double azimuth_step_deg = 30.0;
  double elevation_deg = 30.0;
  int image_size = 224;

  void validate() const {
    if (view_count < 1) throw std::invalid_argument("view_count must be >= 1");
    if (azimuth_step_deg <= 0 || view_count * azimuth_step_deg > 360.0)
      throw std::invalid_argument("view_count * azimuth_step_deg must be in (0, 360]");
    if (image_size < 16) throw std::invalid_argument("image_size must be >= 16");
  }
};

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> points;

  void validate() const {
    if (points.empty()) throw std::invalid_argument("point cloud is empty");
    for (const auto& p : points)
      for (double v : p)
        if (!std::isfinite(v)) throw std::invalid_argument("point cloud has non-finite coordinates");
  }
};

// OFF reader (vertices only). Accepts the ModelNet quirk where the counts
// follow "OFF" on the same line.
inline PointCloud read_off(std::istream& in) {
  std::string first;
  if (!std::getline(in, first)) throw MediaError("empty OFF input");
  auto head = std::string(trim(first));
  if (head.rfind("OFF", 0) != 0) throw MediaError("missing OFF header");
  std::string counts = std::string(trim(std::string_view(head).substr(3)));
  while (counts.empty() || counts[0] == '#') {
    if (!std::getline(in, counts)) throw MediaError("missing OFF counts line");
    counts = std::string(trim(counts));
  }
  std::istringstream cs(counts);
  long long nv = -1, nf = 0;
  cs >> nv >> nf;
  if (!cs || nv < 0) throw MediaError("bad OFF counts line");
  PointCloud cloud;
  cloud.points.reserve(static_cast<std::size_t>(nv));
  for (long long i = 0; i < nv; ++i) {
    Point3 p{};
    if (!(in >> p[0] >> p[1] >> p[2])) throw MediaError("truncated OFF vertex list at vertex " + std::to_string(i));
    cloud.points.push_back(p);
  }
  return cloud;
}

inline PointCloud load_off(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MediaError("cannot open " + path.string());
  return read_off(in);
}

inline double azimuth_of_view(const RenderConfig& cfg, int k) { return k * cfg.azimuth_step_deg; }

// Orthographic depth views around the vertical (z) axis. The cloud is
// centred on its centroid and scaled into the unit sphere. View k looks at
// the cloud rotated by k * azimuth_step about z, tilted by the elevation.
// Image x follows the rotated x axis, image y points down.
inline std::vector<GrayImage> render_depth_views(const PointCloud& cloud, const RenderConfig& cfg) {
  cloud.validate();
  cfg.validate();

  Point3 c{0, 0, 0};
  for (const auto& p : cloud.points)
    for (int i = 0; i < 3; ++i) c[i] += p[i];
  for (double& v : c) v /= static_cast<double>(cloud.points.size());
  double radius = 0;
  for (const auto& p : cloud.points) {
    double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
    radius = std::max(radius, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  if (!(radius > 1e-12)) throw DegenerateCloud("all points coincide; bounding sphere has zero radius");

  std::vector<Point3> unit;
  unit.reserve(cloud.points.size());
  for (const auto& p : cloud.points) unit.push_back({(p[0] - c[0]) / radius, (p[1] - c[1]) / radius, (p[2] - c[2]) / radius});

  const int size = cfg.image_size;
  const double deg = std::numbers::pi / 180.0;
  const double se = std::sin(cfg.elevation_deg * deg), ce = std::cos(cfg.elevation_deg * deg);
  auto to_pixel = [size](double t) {
    auto px = static_cast<int>(std::floor((t + 1.0) * 0.5 * size));
    return std::clamp(px, 0, size - 1);
  };

  std::vector<GrayImage> views;
  views.reserve(static_cast<std::size_t>(cfg.view_count));
  for (int k = 0; k < cfg.view_count; ++k) {
    const double a = azimuth_of_view(cfg, k) * deg;
    const double sa = std::sin(a), ca = std::cos(a);
    std::vector<double> zbuf(static_cast<std::size_t>(size) * size, std::numeric_limits<double>::infinity());
    for (const auto& p : unit) {
      const double rx = ca * p[0] - sa * p[1];
      const double ry = sa * p[0] + ca * p[1];
      const double u = rx;
      const double v = ry * se + p[2] * ce;
      const double depth = ry * ce - p[2] * se;
      const int x = to_pixel(u);
      const int y = to_pixel(-v);
      auto& cell = zbuf[static_cast<std::size_t>(y) * size + x];
      cell = std::min(cell, depth);
    }
    double dmin = std::numeric_limits<double>::infinity(), dmax = -dmin;
    for (double d : zbuf)
      if (std::isfinite(d)) {
        dmin = std::min(dmin, d);
        dmax = std::max(dmax, d);
      }
    GrayImage img(size, size);
    const double span = dmax - dmin;
    for (std::size_t i = 0; i < zbuf.size(); ++i) {
      if (!std::isfinite(zbuf[i])) continue;
      // Nearest maps to 255, farthest to 1; 0 is reserved for empty pixels.
      double t = span > 0 ? (dmax - zbuf[i]) / span : 1.0;
      img.pixels[i] = static_cast<std::uint8_t>(1 + std::lround(254.0 * t));
    }
    views.push_back(std::move(img));
  }
  return views;
}

// External video decoder invoked as a subprocess. `{input}` and `{output}`
// are replaced by the (shell-quoted) video path and an output directory.
struct VideoDecoder {
  std::string command = "ffmpeg -loglevel error -nostdin -i {input} {output}/%06d.png";
};

namespace detail {

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

inline void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

inline bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> frames;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_file(entry.path())) frames.push_back(entry.path());
  std::sort(frames.begin(), frames.end());
  return frames;
}

}  // namespace detail

inline std::vector<EncodedImage> select_frames(const std::vector<std::filesystem::path>& frames,
                                               const FrameSamplerConfig& cfg) {
  std::vector<EncodedImage> out;
  for (auto idx : sample_frame_indices(frames.size(), cfg.frame_count)) out.push_back(load_image_file(frames[idx]));
  return out;
}

// Frames for one video sample: from a directory of extracted frames (sorted
// lexicographically) or by decoding a video file with `decoder`.
inline std::vector<EncodedImage> load_frames(const SampleRecord& sample, const FrameSamplerConfig& cfg,
                                             const VideoDecoder& decoder = {}) {
  namespace fs = std::filesystem;
  if (cfg.frame_count == 0) throw std::invalid_argument("frame_count must be >= 1");
  const auto& src = sample.source_path;
  std::error_code ec;
  if (fs::is_directory(src, ec)) {
    auto frames = detail::list_frames(src);
    if (frames.empty()) throw MediaError("no frames in " + src.string());
    return select_frames(frames, cfg);
  }
  if (!fs::is_regular_file(src, ec)) throw MediaError("missing media source " + src.string());

  auto out_dir = fs::temp_directory_path() /
                 ("zsv-decode-" + to_hex16(fnv1a64(src.string())) + "-" + std::to_string(::getpid()));
  fs::remove_all(out_dir, ec);
  fs::create_directories(out_dir);
  std::string cmd = decoder.command;
  detail::replace_all(cmd, "{input}", detail::shell_quote(src.string()));
  detail::replace_all(cmd, "{output}", detail::shell_quote(out_dir.string()));
  cmd += " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  std::vector<fs::path> frames;
  if (rc == 0) frames = detail::list_frames(out_dir);
  if (rc != 0 || frames.empty()) {
    fs::remove_all(out_dir, ec);
    throw MediaError("cannot decode " + src.string() + (rc != 0 ? " (decoder exit " + std::to_string(rc) + ")" : " (zero frames)"));
  }
  auto selected = select_frames(frames, cfg);
  fs::remove_all(out_dir, ec);
  return selected;
}

}  // namespace zsv
