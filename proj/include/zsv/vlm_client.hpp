#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsv/chat.hpp"
#include "zsv/hash.hpp"
#include "zsv/image_io.hpp"
#include "zsv/io.hpp"
#include "zsv/manifest.hpp"
#include "zsv/transport.hpp"

namespace zsv {

struct MediaCountError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::string_view safety_refusal_phrase =
    "Your input image may contain content that is not allowed by our safety system.";

// Case-insensitive substring match against a list of refusal phrases.
class RefusalDetector {
 public:
  RefusalDetector() : patterns_{lower(safety_refusal_phrase), "not allowed by our safety system"} {}
  explicit RefusalDetector(std::vector<std::string> patterns) {
    for (auto& p : patterns) patterns_.push_back(lower(p));
  }

  void add_pattern(std::string_view p) { patterns_.push_back(lower(p)); }

  bool matches(std::string_view text) const {
    const auto t = lower(text);
    return std::any_of(patterns_.begin(), patterns_.end(),
                       [&](const std::string& p) { return !p.empty() && t.find(p) != std::string::npos; });
  }

 private:
  static std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
  }
  std::vector<std::string> patterns_;
};

inline bool detect_refusal(std::string_view text) { return RefusalDetector{}.matches(text); }

struct VisionOptions {
  std::string model_name = "gpt-4-vision-preview";
  std::string detail_level = "low";
  std::size_t frame_count = 8;
  std::size_t view_count = 6;
};

inline std::size_t expected_media_count(Modality m, const VisionOptions& opt) {
  switch (m) {
    case Modality::image: return 1;
    case Modality::video: return opt.frame_count;
    case Modality::pointcloud: return opt.view_count;
  }
  return 1;
}

// One sample, its images, and a prompt keyed by the sample's hashed id.
// There is deliberately no way to put several samples in one request.
struct VisionRequest {
  std::string model_name;
  std::string prompt_text;
  std::vector<EncodedImage> images;
  std::string sample_hash;
  std::string detail_level = "low";

  ChatRequest to_chat() const {
    ChatRequest req;
    req.model = model_name;
    req.temperature = 0.0;
    req.detail = detail_level;
    req.max_tokens = 300;
    req.messages.push_back({"user", prompt_text, images});
    return req;
  }
};

inline std::string vision_prompt(const CategorySet& cats, Modality modality, std::size_t media_count,
                                 const std::string& sample_hash) {
  std::ostringstream p;
  switch (modality) {
    case Modality::image: p << "Here is a single image"; break;
    case Modality::video: p << "Here are " << media_count << " frames uniformly sampled from a video"; break;
    case Modality::pointcloud: p << "Here are " << media_count << " rendered views of a 3D object"; break;
  }
  p << " for " << cats.size() << "-class classification. The category list is: [";
  for (std::size_t i = 0; i < cats.size(); ++i) p << (i ? ", " : "") << '"' << cats[i] << '"';
  p << "].\n";
  p << "Sort the categories by their relevance to the visual content and output the 5 most relevant categories, "
       "most relevant first. Only use names from the category list, exactly as written.\n";
  p << "Answer with a dictionary whose key is the sample ID \"" << sample_hash
    << "\" and whose value is the list of 5 categories, for example: {\"" << sample_hash
    << "\": [\"first\", \"second\", \"third\", \"fourth\", \"fifth\"]}";
  return p.str();
}

inline VisionRequest build_vision_request(const SampleRecord& sample, std::vector<EncodedImage> media,
                                          const CategorySet& categories, const VisionOptions& opt = {}) {
  const auto expected = expected_media_count(sample.modality, opt);
  if (media.size() != expected)
    throw MediaCountError(std::string(to_string(sample.modality)) + " sample needs " + std::to_string(expected) +
                          " images, got " + std::to_string(media.size()));
  VisionRequest r;
  r.model_name = opt.model_name;
  r.prompt_text = vision_prompt(categories, sample.modality, media.size(), sample.hashed_id);
  r.images = std::move(media);
  r.sample_hash = sample.hashed_id;
  r.detail_level = opt.detail_level;
  return r;
}

// Cache key over model, prompt, and each image's content hash.
inline std::string cache_key(const VisionRequest& r) {
  std::uint64_t h = fnv1a64_fields({r.model_name, r.prompt_text, r.detail_level});
  for (const auto& img : r.images) h = fnv1a64(content_hash(img.bytes), h);
  return to_hex16(h);
}

struct RawResponse {
  std::string text;
  TokenUsage usage;
  bool refusal = false;
  std::string request_id;
  bool from_cache = false;
};

// Token counters and prices; totals are an exact linear combination.
class CostLedger {
 public:
  CostLedger(double price_per_1k_prompt = 0.0, double price_per_1k_completion = 0.0)
      : price_prompt_(price_per_1k_prompt), price_completion_(price_per_1k_completion) {}

  void record(const TokenUsage& u) {
    prompt_tokens_ += u.prompt_tokens;
    completion_tokens_ += u.completion_tokens;
  }

  std::uint64_t prompt_tokens() const { return prompt_tokens_; }
  std::uint64_t completion_tokens() const { return completion_tokens_; }
  double price_per_1k_prompt() const { return price_prompt_; }
  double price_per_1k_completion() const { return price_completion_; }

  double total() const {
    return static_cast<double>(prompt_tokens_.load()) / 1000.0 * price_prompt_ +
           static_cast<double>(completion_tokens_.load()) / 1000.0 * price_completion_;
  }

 private:
  double price_prompt_;
  double price_completion_;
  std::atomic<std::uint64_t> prompt_tokens_{0};
  std::atomic<std::uint64_t> completion_tokens_{0};
};

inline double estimate_cost(const CostLedger& ledger) { return ledger.total(); }

// Linear extrapolation of observed spend to `total_samples`.
inline double project_cost(const CostLedger& ledger, std::size_t samples_done, std::size_t total_samples) {
  if (samples_done == 0) return 0.0;
  return ledger.total() * static_cast<double>(total_samples) / static_cast<double>(samples_done);
}

// One file per response at <root>/<model>/<key[0:2]>/<key>: a small header
// then a blank line and the raw response text.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path root) : root_(std::move(root)) {}

  std::filesystem::path path_for(const std::string& model, const std::string& key) const {
    std::string safe = model;
    for (char& c : safe)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
    return root_ / safe / key.substr(0, 2) / key;
  }

  std::optional<RawResponse> load(const std::string& model, const std::string& key) const {
    auto p = path_for(model, key);
    std::error_code ec;
    if (!std::filesystem::exists(p, ec)) return std::nullopt;
    auto data = read_file(p);
    auto sep = data.find("\n\n");
    if (sep == std::string::npos || data.rfind("#zsv-cache 1\n", 0) != 0) return std::nullopt;
    RawResponse r;
    r.from_cache = true;
    std::istringstream header(data.substr(0, sep));
    std::string line;
    while (std::getline(header, line)) {
      std::istringstream ls(line);
      std::string tag;
      ls >> tag;
      if (tag == "#usage") ls >> r.usage.prompt_tokens >> r.usage.completion_tokens;
      else if (tag == "#refusal") {
        int v = 0;
        ls >> v;
        r.refusal = v != 0;
      } else if (tag == "#request_id") {
        ls >> r.request_id;
      }
    }
    r.text = data.substr(sep + 2);
    return r;
  }

  void store(const std::string& model, const std::string& key, const RawResponse& r) const {
    std::ostringstream out;
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", &tm);
    out << "#zsv-cache 1\n#timestamp " << ts << "\n#usage " << r.usage.prompt_tokens << ' '
        << r.usage.completion_tokens << "\n#refusal " << (r.refusal ? 1 : 0) << "\n#request_id "
        << (r.request_id.empty() ? "-" : r.request_id) << "\n\n"
        << r.text;
    write_file_atomic(path_for(model, key), out.str());
  }

 private:
  std::filesystem::path root_;
};

// Vision-chat client: cache lookup, rate-limited dispatch with retries,
// refusal detection, cost accounting, cache write before returning.
class VlmClient {
 public:
  VlmClient(HttpTransport& transport, TransportPolicy policy, ResponseCache& cache, Clock& clock, RateLimiter& limiter,
            CostLedger& ledger, RefusalDetector refusals = {}, std::string api_key = {},
            std::string path = "/v1/chat/completions")
      : transport_(transport),
        policy_(policy),
        cache_(cache),
        clock_(clock),
        limiter_(limiter),
        ledger_(ledger),
        refusals_(std::move(refusals)),
        api_key_(std::move(api_key)),
        path_(std::move(path)) {
    policy_.validate();
  }

  const RefusalDetector& refusals() const { return refusals_; }
  std::size_t network_requests() const { return requests_; }

  RawResponse execute(const VisionRequest& request) {
    const auto key = cache_key(request);
    if (auto hit = cache_.load(request.model_name, key)) return *hit;

    Headers headers{{"X-Request-Key", key}};
    if (!api_key_.empty()) headers["Authorization"] = "Bearer " + api_key_;
    auto res = send_with_retry(transport_, path_, request.to_chat().to_json().dump(), headers, policy_, clock_, &limiter_);
    ++requests_;
    auto reply = parse_chat_reply(res.body);
    RawResponse r;
    r.text = std::move(reply.text);
    r.usage = reply.usage;
    r.request_id = std::move(reply.request_id);
    r.refusal = reply.api_refusal || refusals_.matches(r.text);
    ledger_.record(r.usage);
    cache_.store(request.model_name, key, r);
    return r;
  }

 private:
  HttpTransport& transport_;
  TransportPolicy policy_;
  ResponseCache& cache_;
  Clock& clock_;
  RateLimiter& limiter_;
  CostLedger& ledger_;
  RefusalDetector refusals_;
  std::string api_key_;
  std::string path_;
  std::atomic<std::size_t> requests_{0};
};

}  // namespace zsv
