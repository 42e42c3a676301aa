#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "cli/app.hpp"
#include "cli/image_io.hpp"
#include "cli/run_config.hpp"
#include "mtu/checkpoint.hpp"
#include "mtu/errors.hpp"
#include "test_util.hpp"

namespace mtu::cli {
namespace {

namespace fs = std::filesystem;

// Small model and data so every command finishes in well under a second.
const std::vector<std::string> kSmall{
    "--set", "model.num_blocks=1", "--set", "model.d_model=16", "--set", "model.d_ffn=32",
    "--set", "model.heads=2",      "--set", "model.d_text=8",   "--set", "model.timesteps=20",
    "--set", "moe.d_task=4",       "--set", "train.batch_size=4", "--set", "data.train=16",
    "--set", "data.val=8",         "--set", "data.test=4",      "--set", "eval.count=2",
    "--set", "eval.steps=3",       "--set", "sample.steps=3",   "--set", "sample.count=2"};

struct Run {
  int code = 0;
  std::string out, err;
};

Run mtu(std::vector<std::string> args, bool small = true) {
  std::vector<std::string> full{"mtu"};
  full.insert(full.end(), args.begin(), args.end());
  if (small) full.insert(full.end(), kSmall.begin(), kSmall.end());
  std::vector<const char*> argv;
  for (const auto& a : full) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::string path_str(const fs::path& p) { return p.string(); }

TEST(RunConfig, IniRoundTripsAndOverridesApplyInOrder) {
  const auto dir = testing::temp_dir("cli_config");
  auto cfg = load_config({}, {"train.lr=0.0025", "moe.top_k=2", "tasks.list=SR,IE", "eval.split=val",
                              "train.lr=0.003", "data.dir=some/where"});
  EXPECT_EQ(cfg.train.optim.lr, 0.003);
  EXPECT_EQ(cfg.moe.top_k, std::optional<std::size_t>(2));
  EXPECT_EQ(cfg.tasks, (std::vector<TaskId>{TaskId::kSR, TaskId::kIE}));
  EXPECT_EQ(cfg.eval.split, data::Split::kVal);
  cfg.train.cond_dropout = 1.0 / 3;  // needs every digit to survive
  {
    std::ofstream f(dir / "a.ini");
    f << to_ini(cfg);
  }
  EXPECT_EQ(load_config(dir / "a.ini", {}), cfg);
  EXPECT_EQ(to_ini(load_config(dir / "a.ini", {})), to_ini(cfg));
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(load_config({}, {"train.speed=3"}), ConfigError);
  EXPECT_THROW(load_config({}, {"train.steps=many"}), ConfigError);
  EXPECT_THROW(load_config({}, {"train.steps"}), ConfigError);
  EXPECT_THROW(load_config({}, {"moe.num_experts=5"}), ConfigError);  // 5 does not divide d_ffn
  EXPECT_THROW(load_config({}, {"tasks.list=T2I,XY"}), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.ini", {}), ConfigError);
}

TEST(ImageIo, PpmRoundTripAndGrid) {
  const auto dir = testing::temp_dir("cli_ppm");
  const auto img = data::generate_one(TaskId::kIE, data::Split::kTest, 0, 1).target;
  const auto rgb = to_rgb(img, data::kImageSize);
  write_ppm(dir / "x.ppm", rgb);
  const auto back = read_ppm(dir / "x.ppm");
  EXPECT_EQ(back.pixels, rgb.pixels);
  const auto planar = from_rgb(back);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(planar[i], img[i], 1.0 / 255 + 1e-6);
  const auto g = grid({rgb, rgb, rgb}, 2);
  EXPECT_EQ(g.width, 2 * 25 + 1u);
  EXPECT_EQ(g.height, 2 * 25 + 1u);
  {
    std::ofstream f(dir / "bad.ppm");
    f << "P3\n1 1\n255\n0 0 0\n";
  }
  EXPECT_THROW(read_ppm(dir / "bad.ppm"), DataError);
}

TEST(Cli, ExitCodes) {
  const auto dir = testing::temp_dir("cli_exit");
  EXPECT_EQ(mtu({"--help"}, false).code, kExitOk);
  EXPECT_EQ(mtu({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(mtu({"pretrain", "--set", "train.nonsense=1"}).code, kExitConfig);
  EXPECT_EQ(mtu({"flops", "--ckpt", path_str(dir / "absent.ckpt")}).code, kExitCheckpoint);
  {
    std::ofstream f(dir / "junk.ckpt");
    f << "NOTACKPT\n";
  }
  const auto junk = mtu({"flops", "--ckpt", path_str(dir / "junk.ckpt"), "--out", path_str(dir / "f")});
  EXPECT_EQ(junk.code, kExitCheckpoint);
  EXPECT_NE(junk.err.find("checkpoint error"), std::string::npos);
  EXPECT_EQ(mtu({"pretrain", "--out", path_str(dir / "p"), "--set", "data.dir=" + path_str(dir / "nodata")}).code,
            kExitData);

  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "pre"), "--set", "train.steps=1"}).code, kExitOk);
  const auto pre = path_str(dir / "pre" / "model.ckpt");
  // A dense T2I model cannot serve an editing task.
  EXPECT_EQ(mtu({"sample", "--ckpt", pre, "--task", "IE", "--out", path_str(dir / "s")}).code, kExitCheckpoint);
  EXPECT_EQ(mtu({"finetune", "--ckpt", pre, "--task", "T2I", "--out", path_str(dir / "f")}).code, kExitConfig);
  EXPECT_EQ(mtu({"component-ft", "--ckpt", pre, "--task", "IE", "--component", "XX", "--out", path_str(dir / "c")})
                .code,
            kExitConfig);
}

TEST(Cli, OneStepPretrainLoadsAndMatchesInit) {
  const auto dir = testing::temp_dir("cli_pretrain");
  const auto r = mtu({"pretrain", "--out", path_str(dir / "a"), "--seed", "5", "--set", "train.steps=1"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("step=1 lr=0.001"), std::string::npos);
  const auto cfg = load_config(dir / "a" / "config.ini", {});
  EXPECT_EQ(cfg.seed, 5u);
  const auto ck = load_checkpoint<float>(dir / "a" / "model.ckpt");
  const auto init = Denoiser<float>::init_dense(cfg.model, TaskId::kT2I, 5);
  EXPECT_TRUE(ck.model.params().congruent(init.params()));
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->steps(), 1);
  EXPECT_EQ(ck.meta.at("run.command"), "pretrain");
  EXPECT_EQ(slurp(dir / "a" / "train_log.txt").rfind("step=1 ", 0), 0u);
}

TEST(Cli, FixedSeedRunsWriteIdenticalCheckpoints) {
  const auto dir = testing::temp_dir("cli_determinism");
  for (const char* sub : {"a", "b"}) {
    ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / sub), "--set", "train.steps=2"}).code, kExitOk);
  }
  EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "c"), "--seed", "1", "--set", "train.steps=2"}).code, kExitOk);
  EXPECT_NE(slurp(dir / "a" / "model.ckpt"), slurp(dir / "c" / "model.ckpt"));
}

TEST(Cli, ResumedPretrainMatchesUninterrupted) {
  const auto dir = testing::temp_dir("cli_resume");
  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "full"), "--set", "train.steps=3"}).code, kExitOk);
  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "half"), "--set", "train.steps=1"}).code, kExitOk);
  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "rest"), "--resume", path_str(dir / "half" / "model.ckpt"),
                 "--set", "train.steps=3"})
                .code,
            kExitOk);
  const auto a = load_checkpoint<float>(dir / "full" / "model.ckpt");
  const auto b = load_checkpoint<float>(dir / "rest" / "model.ckpt");
  EXPECT_TRUE(a.model.params().bitwise_equal(b.model.params()));
  EXPECT_EQ(b.optimizer->steps(), 3);
}

TEST(Cli, DatasetsOnDiskMatchInMemoryGeneration) {
  const auto dir = testing::temp_dir("cli_gendata");
  ASSERT_EQ(mtu({"gen-data", "--out", path_str(dir / "g"), "--set", "tasks.list=T2I"}).code, kExitOk);
  EXPECT_TRUE(fs::exists(dir / "g" / "data" / "T2I_test.mtu"));
  EXPECT_TRUE(fs::exists(dir / "g" / "data" / "vocab.txt"));
  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "disk"), "--set", "train.steps=2", "--set",
                 "data.dir=" + path_str(dir / "g" / "data")})
                .code,
            kExitOk);
  ASSERT_EQ(mtu({"pretrain", "--out", path_str(dir / "mem"), "--set", "train.steps=2"}).code, kExitOk);
  const auto a = load_checkpoint<float>(dir / "disk" / "model.ckpt");
  const auto b = load_checkpoint<float>(dir / "mem" / "model.ckpt");
  EXPECT_TRUE(a.model.params().bitwise_equal(b.model.params()));
}

// pretrain -> finetune -> analyze, upcycle -> train-mtu -> sample/evaluate/flops, ablate-experts.
TEST(Cli, PipelineProducesEveryArtifact) {
  const auto dir = testing::temp_dir("cli_pipeline");
  auto p = [&](const char* s) { return path_str(dir / s); };
  ASSERT_EQ(mtu({"pretrain", "--out", p("pre"), "--set", "train.steps=2"}).code, kExitOk);
  const auto pre = p("pre/model.ckpt");
  ASSERT_EQ(mtu({"finetune", "--ckpt", pre, "--task", "IE", "--out", p("ie"), "--set", "train.steps=2"}).code,
            kExitOk);
  const auto comp = mtu({"component-ft", "--ckpt", pre, "--task", "SR", "--component", "CA", "--out", p("sr"),
                         "--set", "train.steps=2"});
  ASSERT_EQ(comp.code, kExitOk) << comp.err;
  EXPECT_NE(slurp(dir / "sr" / "metrics.csv").find("SR,psnr,"), std::string::npos);
  // Only CA (and the input convolution) moved.
  const auto sr = load_checkpoint<float>(dir / "sr" / "model.ckpt");
  for (const auto& [name, e] : sr.model.params()) {
    EXPECT_EQ(e.frozen, !(component_class(e.tag) == ComponentClass::kCa || e.tag == Component::kInputConv)) << name;
  }
  const auto an = mtu({"analyze", "--pre", pre, "--fine", p("ie/model.ckpt"), "--fine", p("sr/model.ckpt"), "--out",
                       p("an")});
  ASSERT_EQ(an.code, kExitOk) << an.err;
  EXPECT_EQ(slurp(dir / "an" / "deviation_pooled.csv").rfind("layer,component,task,phi,rank\n", 0), 0u);

  ASSERT_EQ(mtu({"upcycle", "--ckpt", pre, "--out", p("up")}).code, kExitOk);
  const auto tm = mtu({"train-mtu", "--ckpt", p("up/model.ckpt"), "--out", p("mtu"), "--set", "train.steps=2"});
  ASSERT_EQ(tm.code, kExitOk) << tm.err;
  EXPECT_NE(tm.out.find("loss.IP="), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "mtu" / "router_weights.csv"));

  const auto ckpt = p("mtu/model.ckpt");
  const auto before = slurp(ckpt);
  const auto s = mtu({"sample", "--ckpt", ckpt, "--task", "IE", "--out", p("s"), "--set", "sample.text_scale=2"});
  ASSERT_EQ(s.code, kExitOk) << s.err;
  EXPECT_EQ(slurp(ckpt), before);  // sampling never touches its input
  EXPECT_EQ(read_ppm(dir / "s" / "sample_001.ppm").width, data::kImageSize);
  // Condition image from a file and an explicit prompt.
  ASSERT_EQ(mtu({"sample", "--ckpt", ckpt, "--task", "IE", "--cond", p("s/sample_000.ppm"), "--prompt",
                 "make the circle red", "--out", p("s2")})
                .code,
            kExitOk);
  EXPECT_EQ(slurp(dir / "s2" / "prompt.txt"), "make the circle red\n");
  EXPECT_EQ(mtu({"sample", "--ckpt", ckpt, "--task", "IE", "--prompt", "make the hexagon red", "--out", p("s3")}).code,
            kExitData);

  const auto ev = mtu({"evaluate", "--ckpt", ckpt, "--task", "SR", "--out", p("ev")});
  ASSERT_EQ(ev.code, kExitOk) << ev.err;
  EXPECT_NE(ev.out.find("task=SR n=2"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "ev" / "grid.ppm"));
  const auto fl = mtu({"flops", "--ckpt", ckpt, "--out", p("fl")});
  ASSERT_EQ(fl.code, kExitOk);
  EXPECT_NE(fl.out.find("task=T2I params="), std::string::npos);

  const auto ab = mtu({"ablate-experts", "--ckpt", pre, "--experts", "1,2", "--top-k", "0,1", "--out", p("ab"),
                       "--set", "train.steps=1", "--set", "tasks.list=T2I,SR"});
  ASSERT_EQ(ab.code, kExitOk) << ab.err;
  const auto csv = slurp(dir / "ab" / "ablation.csv");
  EXPECT_NE(csv.find("\n2,1,SR,"), std::string::npos);
  EXPECT_NE(csv.find("\n1,0,T2I,"), std::string::npos);
  // Top-1 of a single expert is the same model as all experts.
  std::map<std::string, std::string> rows;
  std::stringstream ss(csv);
  for (std::string line; std::getline(ss, line);) {
    const auto c = line.find(',', line.find(',', line.find(',') + 1) + 1);
    rows[line.substr(0, c)] = line.substr(c + 1);
  }
  EXPECT_EQ(rows.at("1,1,SR"), rows.at("1,0,SR"));
  auto ffn = [&](const std::string& key) {
    const auto& r = rows.at(key);
    const auto a = r.find(',') + 1;
    return std::stol(r.substr(a, r.find(',', a) - a));
  };
  EXPECT_EQ(2 * ffn("2,1,T2I"), ffn("2,0,T2I"));
}

}  // namespace
}  // namespace mtu::cli
