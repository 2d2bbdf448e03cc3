#pragma once

// Shared test scaffolding: scratch directories, a synthetic image dataset,
// and mock-backed run configurations.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "zsv/image_io.hpp"
#include "zsv/io.hpp"
#include "zsv/pipeline.hpp"
#include "zsv/testing/mock_services.hpp"

namespace fs = std::filesystem;

namespace zsv_test {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "zsv-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline const std::vector<std::string>& toy_categories() {
  static const std::vector<std::string> cats{"red square", "green circle", "blue triangle"};
  return cats;
}

// `n` small grayscale images cycling through three classes, plus a manifest.
inline fs::path make_toy_dataset(const fs::path& dir, std::size_t n = 10, const std::string& name = "toyshapes") {
  fs::create_directories(dir / "images");
  std::ofstream m(dir / (name + ".manifest"));
  m << "#dataset " << name << " image 3 " << n << "\n";
  for (std::size_t c = 0; c < toy_categories().size(); ++c) m << "#cat " << c << " " << toy_categories()[c] << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    zsv::GrayImage img(48, 40);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        img.pixels[static_cast<std::size_t>(y * img.width + x)] =
            static_cast<std::uint8_t>((x * (i + 3) + y * (i % 3 + 1) * 7 + i * 31) % 256);
    char file[32];
    std::snprintf(file, sizeof file, "img_%03zu.png", i);
    zsv::write_png(img, dir / "images" / file);
    m << "images/" << file << "\t" << i % 3 << "\n";
  }
  return dir / (name + ".manifest");
}

inline zsv::RunConfig mock_config(const fs::path& run_dir, const fs::path& manifest, const std::string& url,
                                  std::size_t dim = 16) {
  zsv::RunConfig c;
  c.run_dir = run_dir;
  c.dataset = manifest;
  c.embed_endpoint = c.chat_endpoint = c.vlm_endpoint = url;
  c.embed_dimension = dim;
  c.transport.base_backoff_s = 0.01;
  c.transport.requests_per_minute = 100000;
  return c;
}

// In-process transport replaying queued responses and recording requests.
class ScriptedTransport final : public zsv::HttpTransport {
 public:
  struct Call {
    std::string path, body;
    zsv::Headers headers;
  };
  std::deque<zsv::HttpResponse> replies;
  std::function<zsv::HttpResponse(const Call&)> fallback;
  std::vector<Call> calls;

  zsv::HttpResponse post(const std::string& path, const std::string& body, const zsv::Headers& headers) override {
    calls.push_back({path, body, headers});
    if (!replies.empty()) {
      auto r = replies.front();
      replies.pop_front();
      return r;
    }
    if (fallback) return fallback(calls.back());
    return {500, "no scripted reply"};
  }
};

inline std::string chat_body(const std::string& text, int prompt_tokens = 10, int completion_tokens = 5) {
  return nlohmann::json{{"id", "req-1"},
                        {"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}},
                        {"usage", {{"prompt_tokens", prompt_tokens}, {"completion_tokens", completion_tokens}}}}
      .dump();
}

inline std::string slurp(const fs::path& p) { return zsv::read_file(p); }

// Every regular file under `root` keyed by relative path.
inline std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = zsv::read_file(e.path());
  return out;
}

}  // namespace zsv_test
