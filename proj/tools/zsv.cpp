// zsv: command-line driver for the staged evaluation pipeline.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "zsv/pipeline.hpp"
#include "zsv/testing/mock_services.hpp"

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, missing_input = 3, transport_exhausted = 4 };

struct Flags {
  std::string config;
  std::string run_dir;
  std::string dataset;
  std::string mode;
  std::optional<std::size_t> k;
  std::optional<std::size_t> frames;
  std::optional<int> views;
  bool mock = false;
  bool no_resume = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration");
  cmd->add_option("--run-dir", f.run_dir, "run directory (overrides config)");
  cmd->add_option("--dataset", f.dataset, "dataset manifest (overrides config)");
  cmd->add_option("--mode", f.mode, "prompt mode: baseline, handcrafted, gpt, combined");
  cmd->add_option("--k", f.k, "sentences per category");
  cmd->add_option("--frames", f.frames, "frames sampled per video");
  cmd->add_option("--views", f.views, "rendered views per point cloud");
  cmd->add_flag("--mock", f.mock, "answer all remote calls from built-in local fixture services");
  cmd->add_flag("--no-resume", f.no_resume, "ignore stage markers and recompute");
}

zsv::RunConfig make_config(const Flags& f) {
  zsv::RunConfig c = f.config.empty() ? zsv::RunConfig{} : zsv::load_run_config(f.config);
  if (!f.run_dir.empty()) c.run_dir = f.run_dir;
  if (!f.dataset.empty()) c.dataset = f.dataset;
  if (!f.mode.empty()) {
    auto m = zsv::parse_prompt_mode(f.mode);
    if (!m) throw zsv::ConfigError("unknown mode '" + f.mode + "'");
    c.mode = *m;
  }
  if (f.k) c.k = *f.k;
  if (f.frames) c.frames = *f.frames;
  if (f.views) c.render.view_count = *f.views;
  c.resume = !f.no_resume;
  if (const char* key = std::getenv("VLM_API_KEY")) c.vlm_api_key = key;
  if (const char* key = std::getenv("EMBED_API_KEY")) c.embed_api_key = key;
  return c;
}

using Stage = zsv::StageStatus (*)(const zsv::RunConfig&, const zsv::Services&);

int run_stage(const std::string& name, const Flags& flags, Stage stage) {
  try {
    auto cfg = make_config(flags);
    zsv::Services services;
    std::unique_ptr<zsv::testing::MockServices> mock;
    if (flags.mock) {
      zsv::testing::MockServices::Options opt;
      opt.embedding_dimension = cfg.embed_dimension;
      mock = std::make_unique<zsv::testing::MockServices>(opt);
      cfg.chat_endpoint = cfg.vlm_endpoint = cfg.embed_endpoint = mock->base_url();
    }
    zsv::StageStatus status;
    if (name == "eval-vlm") {
      zsv::VlmRunStats stats;
      status = zsv::cmd_eval_vlm(cfg, services, {}, &stats);
      if (status == zsv::StageStatus::ran) {
        std::cerr << "eval-vlm: " << stats.samples << " samples, " << stats.network_requests << " requests, "
                  << stats.cache_hits << " cached, " << stats.refused << " refused, " << stats.unparseable
                  << " unparseable, " << stats.dropped_entries << " out-of-list entries dropped\n";
        char cost[64];
        std::snprintf(cost, sizeof cost, "%.2f", stats.cost);
        std::cerr << "eval-vlm: estimated cost $" << cost << "\n";
      }
    } else {
      status = stage(cfg, services);
    }
    std::cerr << name << ": " << (status == zsv::StageStatus::ran ? "done" : "up to date") << "\n";
    return ok;
  } catch (const zsv::ConfigError& e) {
    std::cerr << name << ": config error: " << e.what() << "\n";
    return config_error;
  } catch (const zsv::StageInputMissing& e) {
    std::cerr << name << ": missing input: " << e.what() << "\n";
    return missing_input;
  } catch (const zsv::ExhaustedRetries& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return transport_exhausted;
  } catch (const zsv::AuthError& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return transport_exhausted;
  } catch (const zsv::TransportError& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return transport_exhausted;
  } catch (const zsv::ParseError& e) {
    std::cerr << name << ": manifest line " << e.line << ": " << e.what() << "\n";
    return config_error;
  } catch (const zsv::ValidationError& e) {
    std::cerr << name << ": invalid dataset: " << e.what() << "\n";
    return config_error;
  } catch (const std::exception& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return failure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot recognition evaluation over contrastive embeddings and vision chat models"};
  app.require_subcommand(1);

  struct Entry {
    const char* name;
    const char* help;
    Stage stage;
  };
  const Entry entries[] = {
      {"gen-descriptions", "generate per-category descriptive sentences", zsv::cmd_gen_descriptions},
      {"prepare-media", "sample video frames, render point clouds, copy images", zsv::cmd_prepare_media},
      {"embed", "embed prompts and media", zsv::cmd_embed},
      {"classify", "ensemble classification over embeddings", zsv::cmd_classify},
      {"eval-vlm", "top-5 prediction with a vision chat model", nullptr},
      {"report", "accuracy tables", zsv::cmd_report},
  };
  Flags flags;
  std::string chosen;
  Stage chosen_stage = nullptr;
  for (const auto& e : entries) {
    auto* cmd = app.add_subcommand(e.name, e.help);
    add_common(cmd, flags);
    cmd->callback([&, e] {
      chosen = e.name;
      chosen_stage = e.stage;
    });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }
  return run_stage(chosen, flags, chosen_stage);
}
