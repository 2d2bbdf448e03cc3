#pragma once

// Stage orchestration over a run directory. Every stage reads and writes
// plain files and leaves a marker with the hash of its inputs, so reruns
// with unchanged inputs are no-ops and interrupted stages resume.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "zsv/chat.hpp"
#include "zsv/embedding_store.hpp"
#include "zsv/ensemble.hpp"
#include "zsv/hash.hpp"
#include "zsv/image_io.hpp"
#include "zsv/io.hpp"
#include "zsv/manifest.hpp"
#include "zsv/media.hpp"
#include "zsv/metrics.hpp"
#include "zsv/prompts.hpp"
#include "zsv/response_parser.hpp"
#include "zsv/transport.hpp"
#include "zsv/vlm_client.hpp"

namespace zsv {

namespace fs = std::filesystem;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageInputMissing : std::runtime_error {
  std::string prior_command;
  StageInputMissing(const std::string& what, std::string prior)
      : std::runtime_error(what + " (run `zsv " + prior + "` first)"), prior_command(std::move(prior)) {}
};

struct RunConfig {
  fs::path run_dir;
  fs::path dataset;
  std::string dataset_context;
  PromptMode mode = PromptMode::baseline;
  std::optional<std::size_t> k;
  std::size_t frames = 8;
  RenderConfig render;
  VideoDecoder decoder;
  std::optional<std::string> template_text;

  std::string embed_endpoint;
  std::string embed_model = "clip-vit-b-32";
  std::size_t embed_dimension = 512;
  fs::path embed_precomputed;

  std::string chat_endpoint;
  GenerationPolicy generation;

  std::string vlm_endpoint;
  VisionOptions vision;
  bool downscale = true;
  int max_side = 512;
  double price_per_1k_prompt = 0.01;
  double price_per_1k_completion = 0.03;
  std::vector<std::string> refusal_patterns;

  TransportPolicy transport;
  EnsembleConfig ensemble;
  MatchPolicy match;
  std::vector<fs::path> extra_runs;

  bool resume = true;
  std::string vlm_api_key;    // from VLM_API_KEY
  std::string embed_api_key;  // from EMBED_API_KEY

  std::size_t description_k() const { return k.value_or(20); }
};

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_secrets(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) return;
  for (const auto& [k, v] : j.items()) {
    std::string lk = k;
    std::transform(lk.begin(), lk.end(), lk.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lk.find("api_key") != std::string::npos || lk == "apikey" || lk == "authorization")
      throw ConfigError("'" + where + k + "': API keys are read from VLM_API_KEY / EMBED_API_KEY only");
    reject_secrets(v, where + k + ".");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir = {}) {
  detail::reject_secrets(j, "");
  RunConfig c;
  try {
    if (j.contains("run_dir")) c.run_dir = detail::resolve(base_dir, j["run_dir"].get<std::string>());
    if (j.contains("dataset")) c.dataset = detail::resolve(base_dir, j["dataset"].get<std::string>());
    detail::read_opt(j, "dataset_context", c.dataset_context);
    if (j.contains("mode")) {
      auto m = parse_prompt_mode(j["mode"].get<std::string>());
      if (!m) throw ConfigError("unknown mode '" + j["mode"].get<std::string>() + "'");
      c.mode = *m;
    }
    if (j.contains("k")) c.k = j["k"].get<std::size_t>();
    detail::read_opt(j, "frames", c.frames);
    detail::read_opt(j, "views", c.render.view_count);
    if (j.contains("template")) c.template_text = j["template"].get<std::string>();
    if (j.contains("decoder")) c.decoder.command = j["decoder"].get<std::string>();
    if (auto r = j.value("render", nlohmann::json::object()); !r.empty()) {
      detail::read_opt(r, "azimuth_step_deg", c.render.azimuth_step_deg);
      detail::read_opt(r, "elevation_deg", c.render.elevation_deg);
      detail::read_opt(r, "image_size", c.render.image_size);
    }
    if (auto e = j.value("embedding", nlohmann::json::object()); !e.empty()) {
      detail::read_opt(e, "endpoint", c.embed_endpoint);
      detail::read_opt(e, "model", c.embed_model);
      detail::read_opt(e, "dimension", c.embed_dimension);
      if (e.contains("precomputed")) c.embed_precomputed = detail::resolve(base_dir, e["precomputed"].get<std::string>());
    }
    if (auto ch = j.value("chat", nlohmann::json::object()); !ch.empty()) {
      detail::read_opt(ch, "endpoint", c.chat_endpoint);
      detail::read_opt(ch, "model", c.generation.model_name);
      detail::read_opt(ch, "temperature", c.generation.temperature);
      detail::read_opt(ch, "max_retries", c.generation.max_retries);
    }
    if (auto v = j.value("vlm", nlohmann::json::object()); !v.empty()) {
      detail::read_opt(v, "endpoint", c.vlm_endpoint);
      detail::read_opt(v, "model", c.vision.model_name);
      detail::read_opt(v, "detail", c.vision.detail_level);
      detail::read_opt(v, "downscale", c.downscale);
      detail::read_opt(v, "max_side", c.max_side);
      detail::read_opt(v, "price_per_1k_prompt", c.price_per_1k_prompt);
      detail::read_opt(v, "price_per_1k_completion", c.price_per_1k_completion);
      detail::read_opt(v, "refusal_patterns", c.refusal_patterns);
    }
    if (auto t = j.value("transport", nlohmann::json::object()); !t.empty()) {
      detail::read_opt(t, "max_retries", c.transport.max_retries);
      detail::read_opt(t, "base_backoff", c.transport.base_backoff_s);
      detail::read_opt(t, "requests_per_minute", c.transport.requests_per_minute);
      detail::read_opt(t, "timeout", c.transport.timeout_s);
      detail::read_opt(t, "concurrency_limit", c.transport.concurrency_limit);
    }
    if (auto e = j.value("ensemble", nlohmann::json::object()); !e.empty()) {
      detail::read_opt(e, "logit_scale", c.ensemble.logit_scale);
      if (e.contains("softmax_axis")) {
        auto axis = e["softmax_axis"].get<std::string>();
        if (axis == "per_slot") c.ensemble.axis = SoftmaxAxis::per_slot;
        else if (axis == "mean_then_softmax") c.ensemble.axis = SoftmaxAxis::mean_then_softmax;
        else throw ConfigError("unknown softmax_axis '" + axis + "'");
      }
    }
    if (auto m = j.value("match", nlohmann::json::object()); !m.empty()) {
      detail::read_opt(m, "max_edit_distance", c.match.max_edit_distance);
      detail::read_opt(m, "max_relative_distance", c.match.max_relative_distance);
    }
    if (j.contains("extra_runs"))
      for (const auto& r : j["extra_runs"]) c.extra_runs.push_back(detail::resolve(base_dir, r.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(j, path.parent_path());
}

inline void validate_config(const RunConfig& c) {
  if (c.run_dir.empty()) throw ConfigError("run_dir is not set");
  if (c.dataset.empty()) throw ConfigError("dataset manifest is not set");
  if (c.frames == 0) throw ConfigError("frames must be >= 1");
  if (c.k && *c.k == 0) throw ConfigError("k must be >= 1");
  try {
    c.render.validate();
    c.transport.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(c.ensemble.logit_scale > 0)) throw ConfigError("logit_scale must be positive");
}

// Network endpoints a stage talks to. Tests and --mock point these at local
// fixture servers.
struct Services {
  std::function<std::unique_ptr<HttpTransport>(const std::string& base_url, double timeout_s)> make_transport =
      [](const std::string& url, double timeout_s) -> std::unique_ptr<HttpTransport> {
    return std::make_unique<HttplibTransport>(url, std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000)));
  };
  Clock* clock = nullptr;  // defaults to a steady clock
};

enum class StageStatus { ran, up_to_date };

struct RunPaths {
  fs::path root;
  fs::path descriptions() const { return root / "prompts" / "descriptions.txt"; }
  fs::path media_dir() const { return root / "media"; }
  fs::path media_index() const { return root / "media" / "index.tsv"; }
  fs::path text_store(PromptMode m) const { return root / "embeddings" / ("text_" + std::string(to_string(m)) + ".zseb"); }
  fs::path vision_store() const { return root / "embeddings" / "vision.zseb"; }
  fs::path embed_cache() const { return root / "embeddings" / "cache.zseb"; }
  fs::path logs() const { return root / "logs"; }
  fs::path classify_log(PromptMode m, std::size_t k) const {
    return logs() / ("classify_" + std::string(to_string(m)) + "_k" + std::to_string(k) + ".tsv");
  }
  fs::path vlm_log() const { return logs() / "vlm.tsv"; }
  fs::path vlm_cost() const { return root / "cost" / "vlm_cost.json"; }
  fs::path response_cache() const { return root / "cache"; }
  fs::path report_dir() const { return root / "report"; }
  fs::path marker(const std::string& stage) const { return root / "stages" / (stage + ".marker"); }
  fs::path run_info() const { return root / "run.json"; }
};

namespace detail {

class InputHash {
 public:
  InputHash& add(std::string_view field) {
    h_ = fnv1a64(std::to_string(field.size()) + ":", h_);
    h_ = fnv1a64(field, h_);
    return *this;
  }
  InputHash& add_file(const fs::path& p) { return add(p.filename().string()).add(read_file(p)); }
  std::string hex() const { return to_hex16(h_); }

 private:
  std::uint64_t h_ = fnv1a64_offset_basis;
};

inline bool up_to_date(const RunConfig& cfg, const RunPaths& paths, const std::string& stage, const std::string& hash,
                       const std::vector<fs::path>& outputs) {
  if (!cfg.resume) return false;
  std::error_code ec;
  if (!fs::exists(paths.marker(stage), ec)) return false;
  if (std::string(trim(read_file(paths.marker(stage)))) != hash) return false;
  return std::all_of(outputs.begin(), outputs.end(), [](const fs::path& p) {
    std::error_code e;
    return fs::exists(p, e);
  });
}

inline void mark_done(const RunPaths& paths, const std::string& stage, const std::string& hash) {
  write_file_atomic(paths.marker(stage), hash + "\n");
}

inline DatasetManifest load_dataset(const RunConfig& cfg) {
  std::error_code ec;
  if (!fs::exists(cfg.dataset, ec)) throw ConfigError("dataset manifest not found: " + cfg.dataset.string());
  auto m = load_manifest(cfg.dataset);
  RunPaths paths{cfg.run_dir};
  nlohmann::json info{{"dataset", fs::absolute(cfg.dataset).lexically_normal().string()}};
  const auto text = info.dump(2) + "\n";
  if (!fs::exists(paths.run_info(), ec) || read_file(paths.run_info()) != text) write_file_atomic(paths.run_info(), text);
  return m;
}

inline std::string dataset_context(const RunConfig& cfg, const CategorySet& cats) {
  if (!cfg.dataset_context.empty()) return cfg.dataset_context;
  switch (cats.modality()) {
    case Modality::image: return cats.dataset_name() + " images";
    case Modality::video: return cats.dataset_name() + " videos";
    case Modality::pointcloud: return cats.dataset_name() + " 3D objects";
  }
  return cats.dataset_name();
}

inline Clock& clock_of(const Services& s) {
  static SteadyClock steady;
  return s.clock ? *s.clock : steady;
}

inline std::string require_endpoint(const std::string& url, const char* what) {
  if (url.empty()) throw ConfigError(std::string(what) + " endpoint is not configured");
  return url;
}

// media/index.tsv: <hashed_id>\t<relative path>...
inline std::map<std::string, std::vector<fs::path>> read_media_index(const RunPaths& paths) {
  std::map<std::string, std::vector<fs::path>> out;
  std::istringstream in(read_file(paths.media_index()));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    auto& files = out[fields[0]];
    for (std::size_t i = 1; i < fields.size(); ++i) files.push_back(paths.media_dir() / fields[i]);
  }
  return out;
}

inline std::string file_extension_for(const EncodedImage& img) { return img.mime == "image/jpeg" ? ".jpg" : ".png"; }

}  // namespace detail

inline StageStatus cmd_gen_descriptions(const RunConfig& cfg, const Services& services = {}) {
  validate_config(cfg);
  RunPaths paths{cfg.run_dir};
  auto manifest = detail::load_dataset(cfg);
  const auto& cats = manifest.category_set;
  GenerationPolicy policy = cfg.generation;
  policy.K = cfg.description_k();
  const auto context = detail::dataset_context(cfg, cats);

  auto hash = detail::InputHash{}
                  .add("gen-descriptions")
                  .add(manifest_to_string(manifest))
                  .add(context)
                  .add(std::to_string(policy.K))
                  .add(policy.model_name)
                  .add(std::to_string(policy.temperature))
                  .hex();
  if (detail::up_to_date(cfg, paths, "gen-descriptions", hash, {paths.descriptions()})) return StageStatus::up_to_date;

  auto transport = services.make_transport(detail::require_endpoint(cfg.chat_endpoint, "chat"), cfg.transport.timeout_s);
  auto& clock = detail::clock_of(services);
  RateLimiter limiter(cfg.transport.requests_per_minute, clock);
  ChatClient chat(*transport, cfg.transport, clock, &limiter, cfg.vlm_api_key);

  PromptSet set;
  set.dataset = cats.dataset_name();
  set.mode = PromptMode::gpt;
  set.K = policy.K;
  set.category_names = cats.names();
  set.sentences.resize(cats.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr error;
  std::vector<std::jthread> workers;
  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.transport.concurrency_limit), cats.size());
  for (std::size_t w = 0; w < n_workers; ++w)
    workers.emplace_back([&] {
      for (std::size_t c = next++; c < cats.size(); c = next++) {
        try {
          set.sentences[c] = generate_descriptions(chat, cats[c], context, policy);
        } catch (...) {
          std::lock_guard lk(err_mu);
          if (!error) error = std::current_exception();
          next = cats.size();
        }
      }
    });
  workers.clear();
  if (error) std::rethrow_exception(error);
  save_prompt_set(set, paths.descriptions());
  detail::mark_done(paths, "gen-descriptions", hash);
  return StageStatus::ran;
}

inline StageStatus cmd_prepare_media(const RunConfig& cfg, const Services& = {}) {
  validate_config(cfg);
  RunPaths paths{cfg.run_dir};
  auto manifest = detail::load_dataset(cfg);
  const auto modality = manifest.category_set.modality();
  auto hash = detail::InputHash{}
                  .add("prepare-media")
                  .add(manifest_to_string(manifest))
                  .add(std::to_string(cfg.frames))
                  .add(std::to_string(cfg.render.view_count))
                  .add(std::to_string(cfg.render.azimuth_step_deg))
                  .add(std::to_string(cfg.render.elevation_deg))
                  .add(std::to_string(cfg.render.image_size))
                  .hex();
  if (detail::up_to_date(cfg, paths, "prepare-media", hash, {paths.media_index()})) return StageStatus::up_to_date;

  std::string index;
  for (const auto& s : manifest.samples) {
    std::vector<EncodedImage> images;
    try {
      switch (modality) {
        case Modality::image: {
          std::error_code ec;
          if (!fs::is_regular_file(s.source_path, ec)) throw MediaError("missing image " + s.source_path.string());
          images.push_back(load_image_file(s.source_path));
          break;
        }
        case Modality::video:
          images = load_frames(s, FrameSamplerConfig{cfg.frames}, cfg.decoder);
          break;
        case Modality::pointcloud:
          for (const auto& view : render_depth_views(load_off(s.source_path), cfg.render))
            images.push_back({encode_png(view), "image/png"});
          break;
      }
    } catch (const MediaError& e) {
      throw StageInputMissing("media for sample " + s.hashed_id + ": " + e.what(), "prepare-media after fixing the dataset");
    } catch (const DegenerateCloud& e) {
      throw StageInputMissing("point cloud " + s.hashed_id + ": " + e.what(), "prepare-media after fixing the dataset");
    }
    index += s.hashed_id;
    for (std::size_t j = 0; j < images.size(); ++j) {
      char name[24];
      std::snprintf(name, sizeof name, "%02zu", j);
      fs::path rel = fs::path(s.hashed_id) / (name + detail::file_extension_for(images[j]));
      write_file_atomic(paths.media_dir() / rel, images[j].bytes);
      index += "\t" + rel.generic_string();
    }
    index += "\n";
  }
  write_file_atomic(paths.media_index(), index);
  detail::mark_done(paths, "prepare-media", hash);
  return StageStatus::ran;
}

inline StageStatus cmd_embed(const RunConfig& cfg, const Services& services = {}) {
  validate_config(cfg);
  RunPaths paths{cfg.run_dir};
  auto manifest = detail::load_dataset(cfg);
  const auto& cats = manifest.category_set;
  std::error_code ec;
  if (!fs::exists(paths.media_index(), ec)) throw StageInputMissing("no prepared media in " + paths.root.string(), "prepare-media");
  std::optional<PromptSet> descriptions;
  if (mode_uses_descriptions(cfg.mode)) {
    if (!fs::exists(paths.descriptions(), ec))
      throw StageInputMissing(std::string(to_string(cfg.mode)) + " mode needs generated descriptions", "gen-descriptions");
    descriptions = load_prompt_set(paths.descriptions());
  }
  const auto tmpl = cfg.template_text.value_or(default_template(cats.modality()));

  detail::InputHash h;
  h.add("embed").add(manifest_to_string(manifest)).add(to_string(cfg.mode)).add(tmpl).add(cfg.embed_model);
  h.add(std::to_string(cfg.embed_dimension)).add_file(paths.media_index());
  if (descriptions) h.add_file(paths.descriptions());
  const auto hash = h.hex();
  if (detail::up_to_date(cfg, paths, "embed", hash, {paths.text_store(cfg.mode), paths.vision_store()}))
    return StageStatus::up_to_date;

  auto prompts = build_prompt_set(cats, cfg.mode, tmpl, descriptions ? &*descriptions : nullptr);

  EmbeddingStore cache(cfg.embed_dimension);
  if (fs::exists(paths.embed_cache(), ec)) cache = read_store(paths.embed_cache());
  if (!cfg.embed_precomputed.empty()) {
    auto pre = read_store(cfg.embed_precomputed);
    for (const auto& id : pre.ids())
      if (!cache.contains(id)) cache.insert(id, pre.at(id));
  }
  if (cache.dimension() != 0 && cache.dimension() != cfg.embed_dimension)
    throw ConfigError("embedding cache has dimension " + std::to_string(cache.dimension()) + ", config says " +
                      std::to_string(cfg.embed_dimension));

  std::unique_ptr<HttpTransport> transport;
  struct Offline final : HttpTransport {
    HttpResponse post(const std::string&, const std::string&, const Headers&) override {
      throw ConfigError("embedding endpoint is not configured and the input is not in the precomputed store");
    }
  } offline;
  if (!cfg.embed_endpoint.empty()) transport = services.make_transport(cfg.embed_endpoint, cfg.transport.timeout_s);
  RemoteEmbeddingProvider provider(transport ? *transport : offline, cfg.embed_model, cfg.embed_dimension, cache,
                                   cfg.transport, &detail::clock_of(services), cfg.embed_api_key);

  auto save_cache = [&] { write_store(cache, paths.embed_cache()); };
  try {
    EmbeddingStore text(cfg.embed_dimension);
    for (std::size_t c = 0; c < cats.size(); ++c) {
      auto vecs = provider.embed_texts(prompts.sentences[c]);
      for (std::size_t k = 0; k < vecs.size(); ++k) text.insert(std::to_string(c) + "/" + std::to_string(k), vecs[k]);
    }
    EmbeddingStore vision(cfg.embed_dimension);
    auto media = detail::read_media_index(paths);
    for (const auto& s : manifest.samples) {
      auto it = media.find(s.hashed_id);
      if (it == media.end()) throw StageInputMissing("media index lacks sample " + s.hashed_id, "prepare-media");
      std::vector<EncodedImage> images;
      for (const auto& f : it->second) images.push_back(load_image_file(f));
      auto vecs = provider.embed_images(images);
      for (std::size_t j = 0; j < vecs.size(); ++j) vision.insert(s.hashed_id + "/" + std::to_string(j), vecs[j]);
    }
    save_cache();
    write_store(text, paths.text_store(cfg.mode));
    write_store(vision, paths.vision_store());
  } catch (...) {
    save_cache();
    throw;
  }
  detail::mark_done(paths, "embed", hash);
  return StageStatus::ran;
}

inline std::size_t classify_k(const RunConfig& cfg, std::size_t available) {
  if (!mode_uses_descriptions(cfg.mode)) return 1;
  const auto k = cfg.k.value_or(available);
  if (k > available)
    throw ConfigError("k = " + std::to_string(k) + " exceeds the " + std::to_string(available) +
                      " embedded sentences per category");
  return k;
}

inline StageStatus cmd_classify(const RunConfig& cfg, const Services& = {}) {
  validate_config(cfg);
  RunPaths paths{cfg.run_dir};
  auto manifest = detail::load_dataset(cfg);
  const auto& cats = manifest.category_set;
  std::error_code ec;
  if (!fs::exists(paths.text_store(cfg.mode), ec) || !fs::exists(paths.vision_store(), ec))
    throw StageInputMissing("no " + std::string(to_string(cfg.mode)) + " embeddings in " + paths.root.string(), "embed");

  auto text = read_store(paths.text_store(cfg.mode));
  std::size_t available = 0;
  while (text.contains("0/" + std::to_string(available))) ++available;
  const auto k = classify_k(cfg, available);
  const auto log_path = paths.classify_log(cfg.mode, k);
  const std::string stage = "classify_" + std::string(to_string(cfg.mode)) + "_k" + std::to_string(k);
  auto hash = detail::InputHash{}
                  .add(stage)
                  .add(manifest_to_string(manifest))
                  .add_file(paths.text_store(cfg.mode))
                  .add_file(paths.vision_store())
                  .add(std::to_string(cfg.ensemble.logit_scale))
                  .add(cfg.ensemble.axis == SoftmaxAxis::per_slot ? "per_slot" : "mean_then_softmax")
                  .hex();
  if (detail::up_to_date(cfg, paths, stage, hash, {log_path})) return StageStatus::up_to_date;

  std::vector<std::vector<EmbeddingVector>> text_vecs(cats.size());
  for (std::size_t c = 0; c < cats.size(); ++c)
    for (std::size_t j = 0; j < k; ++j) {
      auto* v = text.find(std::to_string(c) + "/" + std::to_string(j));
      if (!v) throw StageInputMissing("text embeddings incomplete for category " + std::to_string(c), "embed");
      text_vecs[c].push_back(*v);
    }
  auto vision = read_store(paths.vision_store());
  std::vector<RunLogEntry> log;
  for (const auto& s : manifest.samples) {
    std::vector<EmbeddingVector> frames;
    for (std::size_t j = 0;; ++j) {
      auto* v = vision.find(s.hashed_id + "/" + std::to_string(j));
      if (!v) break;
      frames.push_back(*v);
    }
    if (frames.empty()) throw StageInputMissing("no vision embedding for " + s.hashed_id, "embed");
    auto pooled = pool_vision_embedding(frames);
    auto scores = ensemble_scores(score_matrix(pooled, text_vecs), cfg.ensemble);
    auto pred = top_k(scores, std::min<std::size_t>(max_ranked, cats.size()));
    log.push_back({s.hashed_id, ParseStatus::ok, pred.ranked, {}});
  }
  write_file_atomic(log_path, format_run_log(log));
  detail::mark_done(paths, stage, hash);
  return StageStatus::ran;
}

struct VlmRunStats {
  std::size_t samples = 0;
  std::size_t network_requests = 0;
  std::size_t cache_hits = 0;
  std::size_t refused = 0;
  std::size_t unparseable = 0;
  std::size_t dropped_entries = 0;
  double cost = 0;
  double projected_cost = 0;
};

// Called after each sample's response has been persisted to the cache.
using ProgressHook = std::function<void(std::size_t completed)>;

inline StageStatus cmd_eval_vlm(const RunConfig& cfg, const Services& services = {}, ProgressHook on_progress = {},
                                VlmRunStats* stats_out = nullptr) {
  validate_config(cfg);
  RunPaths paths{cfg.run_dir};
  auto manifest = detail::load_dataset(cfg);
  const auto& cats = manifest.category_set;
  std::error_code ec;
  if (!fs::exists(paths.media_index(), ec)) throw StageInputMissing("no prepared media in " + paths.root.string(), "prepare-media");
  VisionOptions vopt = cfg.vision;
  vopt.frame_count = cfg.frames;
  vopt.view_count = static_cast<std::size_t>(cfg.render.view_count);

  auto hash = detail::InputHash{}
                  .add("eval-vlm")
                  .add(manifest_to_string(manifest))
                  .add_file(paths.media_index())
                  .add(vopt.model_name)
                  .add(vopt.detail_level)
                  .add(cfg.downscale ? std::to_string(cfg.max_side) : "full")
                  .add(std::to_string(cfg.match.max_edit_distance))
                  .add(std::to_string(cfg.match.max_relative_distance))
                  .hex();
  if (detail::up_to_date(cfg, paths, "eval-vlm", hash, {paths.vlm_log()})) return StageStatus::up_to_date;

  auto media = detail::read_media_index(paths);
  auto transport = services.make_transport(detail::require_endpoint(cfg.vlm_endpoint, "vlm"), cfg.transport.timeout_s);
  auto& clock = detail::clock_of(services);
  RateLimiter limiter(cfg.transport.requests_per_minute, clock);
  ResponseCache cache(paths.response_cache());
  CostLedger ledger(cfg.price_per_1k_prompt, cfg.price_per_1k_completion);
  RefusalDetector refusals;
  for (const auto& p : cfg.refusal_patterns) refusals.add_pattern(p);
  VlmClient client(*transport, cfg.transport, cache, clock, limiter, ledger, refusals, cfg.vlm_api_key);

  const auto n = manifest.samples.size();
  std::vector<RunLogEntry> log(n);
  std::atomic<std::size_t> next{0}, completed{0}, hits{0};
  std::mutex mu;
  std::exception_ptr error;
  {
    std::vector<std::jthread> workers;
    const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.transport.concurrency_limit), n);
    for (std::size_t w = 0; w < n_workers; ++w)
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            const auto& s = manifest.samples[i];
            auto it = media.find(s.hashed_id);
            if (it == media.end()) throw StageInputMissing("media index lacks sample " + s.hashed_id, "prepare-media");
            std::vector<EncodedImage> images;
            for (const auto& f : it->second) {
              auto img = load_image_file(f);
              images.push_back(cfg.downscale ? downscale_for_upload(img, cfg.max_side) : std::move(img));
            }
            auto response = client.execute(build_vision_request(s, std::move(images), cats, vopt));
            if (response.from_cache) {
              ++hits;
              ledger.record(response.usage);
            }
            log[i] = to_log_entry(s.hashed_id, parse_topk(response, s, cats, cfg.match, client.refusals()));
            auto done = ++completed;
            if (on_progress) {
              std::lock_guard lk(mu);
              on_progress(done);
            }
          } catch (...) {
            std::lock_guard lk(mu);
            if (!error) error = std::current_exception();
            next = n;
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);

  VlmRunStats stats;
  stats.samples = n;
  stats.network_requests = client.network_requests();
  stats.cache_hits = hits;
  for (const auto& e : log) {
    stats.refused += e.status == ParseStatus::refused;
    stats.unparseable += e.status == ParseStatus::unparseable;
    stats.dropped_entries += e.dropped.size();
  }
  stats.cost = estimate_cost(ledger);
  stats.projected_cost = project_cost(ledger, n, n);
  if (stats_out) *stats_out = stats;

  nlohmann::json cost{{"dataset", cats.dataset_name()},
                      {"model", vopt.model_name},
                      {"prompt_tokens", ledger.prompt_tokens()},
                      {"completion_tokens", ledger.completion_tokens()},
                      {"price_per_1k_prompt", ledger.price_per_1k_prompt()},
                      {"price_per_1k_completion", ledger.price_per_1k_completion()},
                      {"total", ledger.total()}};
  write_file_atomic(paths.vlm_cost(), cost.dump(2) + "\n");
  write_file_atomic(paths.vlm_log(), format_run_log(log));
  detail::mark_done(paths, "eval-vlm", hash);
  return StageStatus::ran;
}

struct LoadedRun {
  DatasetManifest manifest;
  std::vector<std::pair<std::string, RunResult>> results;  // method label -> result
};

inline LoadedRun load_run(const fs::path& run_dir, std::optional<fs::path> manifest_path = std::nullopt) {
  RunPaths paths{run_dir};
  std::error_code ec;
  if (!manifest_path) {
    if (!fs::exists(paths.run_info(), ec)) throw StageInputMissing("no run in " + run_dir.string(), "classify");
    manifest_path = nlohmann::json::parse(read_file(paths.run_info())).at("dataset").get<std::string>();
  }
  LoadedRun run{load_manifest(*manifest_path), {}};
  std::vector<fs::path> logs;
  if (fs::is_directory(paths.logs(), ec))
    for (const auto& e : fs::directory_iterator(paths.logs()))
      if (e.path().extension() == ".tsv") logs.push_back(e.path());
  std::sort(logs.begin(), logs.end());
  for (const auto& p : logs) {
    auto label = p.stem().string();
    run.results.emplace_back(label, run_result_from_log(run.manifest, read_run_log(p), label));
  }
  return run;
}

inline StageStatus cmd_report(const RunConfig& cfg, const Services& = {}) {
  validate_config(cfg);
  RunPaths paths{cfg.run_dir};
  detail::load_dataset(cfg);
  std::vector<LoadedRun> runs;
  runs.push_back(load_run(cfg.run_dir, cfg.dataset));
  if (runs.front().results.empty())
    throw StageInputMissing("no run logs in " + paths.logs().string(), "classify` or `zsv eval-vlm");
  for (const auto& extra : cfg.extra_runs) runs.push_back(load_run(extra));

  detail::InputHash h;
  h.add("report");
  for (const auto& r : runs) {
    h.add(manifest_to_string(r.manifest));
    for (const auto& [label, res] : r.results) {
      h.add(label);
      for (const auto& s : res.per_sample) {
        h.add(s.hashed_id).add(to_string(s.status));
        for (auto i : s.ranked) h.add(std::to_string(i));
      }
    }
  }
  const auto hash = h.hex();
  const auto csv_path = paths.report_dir() / "report.csv";
  const auto md_path = paths.report_dir() / "report.md";
  if (detail::up_to_date(cfg, paths, "report", hash, {csv_path, md_path})) return StageStatus::up_to_date;

  const std::string baseline = "classify_baseline_k1";
  ResultTable table;
  for (const auto& r : runs)
    for (const auto& [label, res] : r.results) {
      if (res.included() == 0) {
        std::cerr << "warning: " << res.dataset << "/" << label << " has no scorable samples; left out of the report\n";
        continue;
      }
      table.add(res);
    }
  table.compute_deltas(baseline);
  emit_report(table, ReportFormat::csv, csv_path);

  std::string md = "# Zero-shot recognition report\n\nTop-1 / Top-5 accuracy (%). Excluded samples are not counted in "
                   "either the numerator or the denominator.\n\n";
  md += render_markdown(table, baseline);

  // Sentence-count ablation for each description mode classified at several K.
  for (auto mode : {PromptMode::gpt, PromptMode::combined}) {
    const std::string prefix = "classify_" + std::string(to_string(mode)) + "_k";
    std::vector<std::pair<std::size_t, RunResult>> by_k;
    for (const auto& [label, res] : runs.front().results)
      if (label.rfind(prefix, 0) == 0 && res.included() > 0) by_k.emplace_back(std::stoul(label.substr(prefix.size())), res);
    if (by_k.size() < 2) continue;
    auto rows = ablation_table(by_k);
    write_file_atomic(paths.report_dir() / ("ablation_" + std::string(to_string(mode)) + ".csv"), render_ablation_csv(rows));
    md += "\n## Sentence count (" + std::string(to_string(mode)) + ")\n\n| K | Top-1 |\n|---|---|\n";
    for (const auto& r : rows) md += "| " + std::to_string(r.K) + " | " + format_pct(r.top1) + " |\n";
  }
  for (const auto& [label, res] : runs.front().results)
    write_file_atomic(paths.report_dir() / ("per_class_" + label + ".csv"),
                      render_per_class_csv(runs.front().manifest.category_set,
                                           per_class_accuracy(res, runs.front().manifest.category_set.size())));
  write_file_atomic(md_path, md);
  detail::mark_done(paths, "report", hash);
  return StageStatus::ran;
}

}  // namespace zsv
