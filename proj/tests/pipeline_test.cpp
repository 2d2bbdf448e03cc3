#include <gtest/gtest.h>

#include <csignal>
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <set>

#include "support.hpp"
#include "zsv/pipeline.hpp"

namespace {

using zsv::StageStatus;

struct ToyRun {
  zsv_test::TempDir dir;
  zsv::testing::MockServices mock;
  zsv::RunConfig cfg;

  explicit ToyRun(std::size_t n = 10)
      : cfg(zsv_test::mock_config(dir / "run", zsv_test::make_toy_dataset(dir / "data", n), mock.base_url())) {
    cfg.k = 4;
  }
};

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + ZSV_CLI + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << s;
}

}  // namespace

TEST(Pipeline, FullToyRunThenNoOpRerun) {
  ToyRun t;
  auto& cfg = t.cfg;
  EXPECT_EQ(zsv::cmd_gen_descriptions(cfg), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_prepare_media(cfg), StageStatus::ran);
  for (auto mode : {zsv::PromptMode::baseline, zsv::PromptMode::handcrafted, zsv::PromptMode::gpt}) {
    cfg.mode = mode;
    EXPECT_EQ(zsv::cmd_embed(cfg), StageStatus::ran);
    EXPECT_EQ(zsv::cmd_classify(cfg), StageStatus::ran);
  }
  EXPECT_EQ(zsv::cmd_eval_vlm(cfg), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_report(cfg), StageStatus::ran);

  zsv::RunPaths paths{cfg.run_dir};
  EXPECT_EQ(t.mock.description_requests(), 3u);
  EXPECT_EQ(t.mock.vision_requests(), 10u);
  EXPECT_TRUE(fs::exists(paths.classify_log(zsv::PromptMode::baseline, 1)));
  EXPECT_TRUE(fs::exists(paths.classify_log(zsv::PromptMode::gpt, 4)));
  auto csv = zsv_test::slurp(paths.report_dir() / "report.csv");
  EXPECT_EQ(csv.rfind("dataset,method,top1,top5,delta,excluded_refused,excluded_unparseable\n", 0), 0u);
  EXPECT_NE(csv.find("toyshapes,vlm,"), std::string::npos);
  EXPECT_NE(csv.find("toyshapes,classify_gpt_k4,"), std::string::npos);
  EXPECT_TRUE(fs::exists(paths.report_dir() / "per_class_vlm.csv"));

  const auto before = zsv_test::snapshot(cfg.run_dir);
  const auto embed_calls = t.mock.embedding_requests();
  EXPECT_EQ(zsv::cmd_gen_descriptions(cfg), StageStatus::up_to_date);
  EXPECT_EQ(zsv::cmd_prepare_media(cfg), StageStatus::up_to_date);
  EXPECT_EQ(zsv::cmd_embed(cfg), StageStatus::up_to_date);
  EXPECT_EQ(zsv::cmd_classify(cfg), StageStatus::up_to_date);
  EXPECT_EQ(zsv::cmd_eval_vlm(cfg), StageStatus::up_to_date);
  EXPECT_EQ(zsv::cmd_report(cfg), StageStatus::up_to_date);
  EXPECT_EQ(zsv_test::snapshot(cfg.run_dir), before);
  EXPECT_EQ(t.mock.embedding_requests(), embed_calls);
  EXPECT_EQ(t.mock.vision_requests(), 10u);
}

TEST(Pipeline, ForcedRecomputeIsByteIdenticalAndUsesCaches) {
  ToyRun t;
  auto& cfg = t.cfg;
  zsv::cmd_prepare_media(cfg);
  zsv::cmd_embed(cfg);
  zsv::cmd_classify(cfg);
  zsv::cmd_eval_vlm(cfg);
  zsv::cmd_report(cfg);
  zsv::RunPaths paths{cfg.run_dir};
  auto report = zsv_test::snapshot(paths.report_dir());
  auto logs = zsv_test::snapshot(paths.logs());
  const auto vision = t.mock.vision_requests(), embeds = t.mock.embedding_requests();

  cfg.resume = false;
  zsv::VlmRunStats stats;
  EXPECT_EQ(zsv::cmd_prepare_media(cfg), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_embed(cfg), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_classify(cfg), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_eval_vlm(cfg, {}, {}, &stats), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_report(cfg), StageStatus::ran);
  EXPECT_EQ(stats.cache_hits, 10u);
  EXPECT_EQ(stats.network_requests, 0u);
  EXPECT_EQ(t.mock.vision_requests(), vision);
  EXPECT_EQ(t.mock.embedding_requests(), embeds);
  EXPECT_EQ(zsv_test::snapshot(paths.report_dir()), report);
  EXPECT_EQ(zsv_test::snapshot(paths.logs()), logs);
}

TEST(Pipeline, ChangedInputsInvalidateMarkers) {
  ToyRun t;
  auto& cfg = t.cfg;
  zsv::cmd_prepare_media(cfg);
  zsv::cmd_embed(cfg);
  EXPECT_EQ(zsv::cmd_classify(cfg), StageStatus::ran);
  cfg.ensemble.logit_scale = 50;
  EXPECT_EQ(zsv::cmd_classify(cfg), StageStatus::ran);
  EXPECT_EQ(zsv::cmd_classify(cfg), StageStatus::up_to_date);
}

TEST(Pipeline, MissingInputsNameThePriorCommand) {
  ToyRun t;
  auto& cfg = t.cfg;
  try {
    zsv::cmd_embed(cfg);
    FAIL();
  } catch (const zsv::StageInputMissing& e) {
    EXPECT_EQ(e.prior_command, "prepare-media");
  }
  zsv::cmd_prepare_media(cfg);
  cfg.mode = zsv::PromptMode::gpt;
  try {
    zsv::cmd_embed(cfg);
    FAIL();
  } catch (const zsv::StageInputMissing& e) {
    EXPECT_EQ(e.prior_command, "gen-descriptions");
  }
  try {
    zsv::cmd_classify(cfg);
    FAIL();
  } catch (const zsv::StageInputMissing& e) {
    EXPECT_EQ(e.prior_command, "embed");
  }
  EXPECT_THROW(zsv::cmd_report(cfg), zsv::StageInputMissing);
}

TEST(Pipeline, SentenceCountAblation) {
  ToyRun t;
  auto& cfg = t.cfg;
  cfg.mode = zsv::PromptMode::gpt;
  zsv::cmd_gen_descriptions(cfg);
  zsv::cmd_prepare_media(cfg);
  zsv::cmd_embed(cfg);
  for (std::size_t k : {1, 2, 4}) {
    cfg.k = k;
    zsv::cmd_classify(cfg);
  }
  cfg.k = 5;
  EXPECT_THROW(zsv::cmd_classify(cfg), zsv::ConfigError);
  zsv::cmd_report(cfg);
  auto ablation = zsv_test::slurp(cfg.run_dir / "report" / "ablation_gpt.csv");
  EXPECT_EQ(ablation.rfind("K,top1\n1,", 0), 0u);
  EXPECT_EQ(std::count(ablation.begin(), ablation.end(), '\n'), 4);
}

TEST(Pipeline, RefusalsAreExcludedFromReport) {
  zsv_test::TempDir dir;
  zsv::testing::MockServices mock({.refuse_all_vision = true});
  auto cfg = zsv_test::mock_config(dir / "run", zsv_test::make_toy_dataset(dir / "data", 4), mock.base_url());
  zsv::cmd_prepare_media(cfg);
  zsv::cmd_embed(cfg);
  zsv::cmd_classify(cfg);
  zsv::VlmRunStats stats;
  zsv::cmd_eval_vlm(cfg, {}, {}, &stats);
  EXPECT_EQ(stats.refused, 4u);
  zsv::cmd_report(cfg);
  auto csv = zsv_test::slurp(cfg.run_dir / "report" / "report.csv");
  EXPECT_EQ(csv.find("toyshapes,vlm,"), std::string::npos);
  EXPECT_NE(csv.find("toyshapes,classify_baseline_k1,"), std::string::npos);
}

TEST(Pipeline, VideoAndPointCloudMedia) {
  zsv_test::TempDir dir;
  zsv::testing::MockServices mock;
  {
    std::ofstream m(dir / "clips.manifest");
    m << "#dataset clips video\n#cat 0 running\n#cat 1 jumping\n";
    for (int v = 0; v < 2; ++v) {
      fs::create_directories(dir / ("clip" + std::to_string(v)));
      for (int f = 0; f < 12; ++f) {
        zsv::GrayImage img(24, 24);
        std::fill(img.pixels.begin(), img.pixels.end(), static_cast<std::uint8_t>(v * 100 + f));
        zsv::write_png(img, dir / ("clip" + std::to_string(v)) / ("f" + std::to_string(100 + f) + ".png"));
      }
      m << "clip" << v << "\t" << v << "\n";
    }
    std::ofstream o(dir / "objects.manifest");
    o << "#dataset objects pointcloud\n#cat 0 chair\n#cat 1 table\n";
    for (int s = 0; s < 2; ++s) {
      std::ofstream off(dir / ("shape" + std::to_string(s) + ".off"));
      off << "OFF\n4 0 0\n0 0 0\n1 0 0\n0 " << s + 1 << " 0\n0 0 1\n";
      o << "shape" << s << ".off\t" << s << "\n";
    }
  }
  auto video = zsv_test::mock_config(dir / "vrun", dir / "clips.manifest", mock.base_url());
  zsv::cmd_prepare_media(video);
  auto index = zsv_test::slurp(video.run_dir / "media" / "index.tsv");
  EXPECT_EQ(std::count(index.begin(), index.end(), '\t'), 16);
  zsv::cmd_eval_vlm(video);
  EXPECT_EQ(mock.vision_requests(), 2u);
  zsv::cmd_embed(video);
  zsv::cmd_classify(video);

  auto cloud = zsv_test::mock_config(dir / "prun", dir / "objects.manifest", mock.base_url());
  cloud.render.image_size = 64;
  zsv::cmd_prepare_media(cloud);
  index = zsv_test::slurp(cloud.run_dir / "media" / "index.tsv");
  EXPECT_EQ(std::count(index.begin(), index.end(), '\t'), 12);
  zsv::cmd_eval_vlm(cloud);
  EXPECT_EQ(mock.vision_requests(), 4u);

  std::ofstream(dir / "flat.off") << "OFF\n2 0 0\n1 1 1\n1 1 1\n";
  std::ofstream(dir / "flat.manifest") << "#dataset flat pointcloud\n#cat 0 a\n#cat 1 b\nflat.off\t0\n";
  auto flat = zsv_test::mock_config(dir / "frun", dir / "flat.manifest", mock.base_url());
  EXPECT_THROW(zsv::cmd_prepare_media(flat), zsv::StageInputMissing);
}

TEST(Pipeline, TransportExhaustionSurfaces) {
  zsv_test::TempDir dir;
  zsv::testing::MockServices mock;
  mock.script_chat_statuses(std::vector<int>(50, 503));
  auto cfg = zsv_test::mock_config(dir / "run", zsv_test::make_toy_dataset(dir / "data", 3), mock.base_url());
  cfg.transport.max_retries = 2;
  cfg.transport.concurrency_limit = 1;
  zsv::cmd_prepare_media(cfg);
  EXPECT_THROW(zsv::cmd_eval_vlm(cfg), zsv::ExhaustedRetries);
  EXPECT_FALSE(fs::exists(zsv::RunPaths{cfg.run_dir}.vlm_log()));
}

TEST(Config, ParsesSectionsAndRejectsSecrets) {
  auto j = nlohmann::json::parse(R"({
    "run_dir": "runs/a", "dataset": "d.manifest", "mode": "combined", "k": 7, "frames": 4, "views": 3,
    "embedding": {"endpoint": "http://e", "model": "clip", "dimension": 768},
    "vlm": {"endpoint": "http://v", "detail": "high", "max_side": 256, "refusal_patterns": ["nope"]},
    "chat": {"model": "writer", "temperature": 0.2},
    "transport": {"max_retries": 2, "requests_per_minute": 30, "concurrency_limit": 2},
    "ensemble": {"logit_scale": 50, "softmax_axis": "mean_then_softmax"}})");
  auto c = zsv::parse_run_config(j, "/base");
  EXPECT_EQ(c.run_dir, "/base/runs/a");
  EXPECT_EQ(c.mode, zsv::PromptMode::combined);
  EXPECT_EQ(*c.k, 7u);
  EXPECT_EQ(c.frames, 4u);
  EXPECT_EQ(c.render.view_count, 3);
  EXPECT_EQ(c.embed_dimension, 768u);
  EXPECT_EQ(c.vision.detail_level, "high");
  EXPECT_EQ(c.refusal_patterns, std::vector<std::string>{"nope"});
  EXPECT_EQ(c.generation.model_name, "writer");
  EXPECT_EQ(c.transport.requests_per_minute, 30);
  EXPECT_EQ(c.ensemble.axis, zsv::SoftmaxAxis::mean_then_softmax);
  EXPECT_THROW(zsv::parse_run_config(nlohmann::json::parse(R"({"vlm": {"api_key": "sk-123"}})")), zsv::ConfigError);
  EXPECT_THROW(zsv::parse_run_config(nlohmann::json::parse(R"({"mode": "weird"})")), zsv::ConfigError);
  EXPECT_THROW(zsv::parse_run_config(nlohmann::json::parse(R"({"k": "seven"})")), zsv::ConfigError);
  zsv::RunConfig empty;
  EXPECT_THROW(zsv::validate_config(empty), zsv::ConfigError);
}

TEST(Cli, ExitCodes) {
  zsv_test::TempDir dir;
  auto manifest = zsv_test::make_toy_dataset(dir / "data", 4);
  const std::string base = "--run-dir " + (dir / "run").string() + " --dataset " + manifest.string();
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("classify --bogus"), 2);
  EXPECT_EQ(run_cli("classify --config " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(run_cli("classify " + base), 3);
  EXPECT_EQ(run_cli("embed --mode nonsense " + base), 2);

  write_text(dir / "dead.json", R"({"vlm": {"endpoint": "http://127.0.0.1:1"},
    "transport": {"max_retries": 1, "base_backoff": 0.01, "timeout": 1}})");
  EXPECT_EQ(run_cli("prepare-media " + base), 0);
  EXPECT_EQ(run_cli("eval-vlm --config " + (dir / "dead.json").string() + " " + base), 4);

  for (const char* stage : {"gen-descriptions", "prepare-media", "embed", "classify", "eval-vlm", "report"})
    EXPECT_EQ(run_cli(std::string(stage) + " --mock --mode gpt --k 3 " + base), 0) << stage;
  EXPECT_TRUE(fs::exists(dir / "run" / "report" / "report.md"));
  EXPECT_EQ(run_cli("report --mock " + base), 0);
}

TEST(Cli, ApiKeyComesFromEnvironment) {
  zsv_test::TempDir dir;
  zsv::testing::MockServices mock({.api_key = "sekrit"});
  auto manifest = zsv_test::make_toy_dataset(dir / "data", 2);
  write_text(dir / "cfg.json", "{\"vlm\": {\"endpoint\": \"" + mock.base_url() +
                                   "\"}, \"transport\": {\"max_retries\": 1, \"base_backoff\": 0.01}}");
  const std::string args = "--config " + (dir / "cfg.json").string() + " --run-dir " + (dir / "run").string() +
                           " --dataset " + manifest.string();
  EXPECT_EQ(run_cli("prepare-media " + args), 0);
  EXPECT_EQ(run_cli("eval-vlm " + args, "VLM_API_KEY=wrong"), 4);
  EXPECT_EQ(run_cli("eval-vlm " + args, "VLM_API_KEY=sekrit"), 0);
}

// Runs eval-vlm in a child that is SIGKILLed right after its fourth response
// is cached, then resumes in this process against a fresh server sharing the
// same request log.
TEST(Resume, KilledRunResumesWithoutDuplicateRequests) {
  std::size_t threads = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator("/proc/self/task")) ++threads;
  if (threads > 1) GTEST_SKIP() << "needs a single-threaded process to fork safely";

  zsv_test::TempDir dir;
  const auto keys = dir / "answered_keys.log";
  const auto manifest = dir / "data" / "toyshapes.manifest";
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    try {
      zsv_test::make_toy_dataset(dir / "data", 10);
      zsv::testing::MockServices mock({.key_log_path = keys.string()});
      auto cfg = zsv_test::mock_config(dir / "run", manifest, mock.base_url());
      cfg.transport.concurrency_limit = 1;
      zsv::cmd_prepare_media(cfg);
      zsv::cmd_eval_vlm(cfg, {}, [](std::size_t done) {
        if (done == 4) std::raise(SIGKILL);
      });
    } catch (...) {
    }
    _exit(0);
  }
  int status = 0;
  waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFSIGNALED(status));
  ASSERT_EQ(WTERMSIG(status), SIGKILL);

  zsv::testing::MockServices mock({.key_log_path = keys.string()});
  auto cfg = zsv_test::mock_config(dir / "run", manifest, mock.base_url());
  zsv::VlmRunStats stats;
  EXPECT_EQ(zsv::cmd_eval_vlm(cfg, {}, {}, &stats), StageStatus::ran);
  EXPECT_EQ(stats.cache_hits, 4u);
  EXPECT_EQ(stats.network_requests, 6u);

  std::ifstream in(keys);
  std::vector<std::string> answered;
  for (std::string k; std::getline(in, k);) answered.push_back(k);
  std::set<std::string> unique(answered.begin(), answered.end());
  EXPECT_EQ(answered.size(), 10u);
  EXPECT_EQ(unique.size(), answered.size());
}
