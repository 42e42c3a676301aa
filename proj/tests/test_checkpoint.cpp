#include <gtest/gtest.h>

#include <fstream>

#include "mtu/checkpoint.hpp"
#include "mtu/container.hpp"
#include "mtu/errors.hpp"
#include "mtu/moe.hpp"
#include "test_util.hpp"

namespace mtu {
namespace {

const std::vector<TaskId> kAll{TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP};
const AdamW<float>* const kNoOptimizer = nullptr;

TEST(Container, BlobsAndMetaRoundTrip) {
  const auto dir = testing::temp_dir("container");
  io::Container c;
  c.meta["kind"] = "test";
  c.meta["note"] = "values run to end of line";
  const std::vector<double> d{1.0 / 3, -2.5, 1e-300};
  const std::vector<int> i{-7, 0, 1 << 30};
  c.add_real<double>("a.b", {3}, d, "FFN", true);
  c.add_ints("ids", {1, 3}, i);
  io::write_container(dir / "c.mtu", c);
  const auto back = io::read_container(dir / "c.mtu");
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_NE(back.find("a.b"), nullptr);
  EXPECT_EQ(back.find("a.b")->as<double>(), d);
  EXPECT_EQ(back.find("a.b")->tag, "FFN");
  EXPECT_TRUE(back.find("a.b")->frozen);
  EXPECT_EQ(back.find("ids")->as<int>(), i);
  EXPECT_EQ(back.find("ids")->shape, (Shape{1, 3}));
  EXPECT_THROW(back.require_meta("absent"), CheckpointError);
  // No temp files are left behind by the atomic write.
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
}

TEST(Container, RejectsCorruptFiles) {
  const auto dir = testing::temp_dir("container_bad");
  EXPECT_THROW(io::read_container(dir / "missing.mtu"), CheckpointError);
  {
    std::ofstream f(dir / "magic.mtu");
    f << "NOTACKPT\nversion 1\ndata\n";
  }
  EXPECT_THROW(io::read_container(dir / "magic.mtu"), CheckpointError);

  io::Container c;
  const std::vector<float> v(100, 1.0f);
  c.add_real<float>("w", {100}, v);
  io::write_container(dir / "full.mtu", c);
  const auto size = std::filesystem::file_size(dir / "full.mtu");
  std::filesystem::copy_file(dir / "full.mtu", dir / "cut.mtu");
  std::filesystem::resize_file(dir / "cut.mtu", size - 10);
  EXPECT_THROW(io::read_container(dir / "cut.mtu"), CheckpointError);
}

template <class T>
void expect_same_model(const Denoiser<T>& a, const Denoiser<T>& b) {
  EXPECT_EQ(a.spec().denoiser, b.spec().denoiser);
  EXPECT_EQ(a.spec().tasks, b.spec().tasks);
  EXPECT_EQ(a.spec().moe, b.spec().moe);
  EXPECT_TRUE(a.params().bitwise_equal(b.params()));
}

TEST(Checkpoint, DenseAndMtuRoundTripLosslessly) {
  const auto dir = testing::temp_dir("ckpt");
  auto dense = Denoiser<float>::init_dense(testing::tiny_config(), TaskId::kT2I, 1);
  testing::jitter(dense.params(), 2, 0.1, true);
  save_checkpoint(dir / "dense.ckpt", dense, kNoOptimizer, {{"run.note", "hello world"}});
  const auto d = load_checkpoint<float>(dir / "dense.ckpt");
  expect_same_model(dense, d.model);
  EXPECT_FALSE(d.optimizer.has_value());
  EXPECT_EQ(d.meta.at("run.note"), "hello world");
  EXPECT_EQ(d.meta.at("kind"), "dense");

  MoEConfig cfg;
  cfg.d_task = 4;
  cfg.top_k = 3;
  auto mtu = moe::upcycle(dense, kAll, cfg, 3);
  testing::jitter(mtu.params(), 4, 0.1);
  save_checkpoint(dir / "mtu.ckpt", mtu);
  const auto m = load_checkpoint<float>(dir / "mtu.ckpt");
  expect_same_model(mtu, m.model);
  EXPECT_EQ(m.meta.at("kind"), "mtu");
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  const auto dir = testing::temp_dir("ckpt_opt");
  auto model = Denoiser<double>::init_dense(testing::tiny_config(), TaskId::kSR, 5);
  AdamW<double> opt({2e-3, 0.8, 0.99, 1e-7, 0.05});
  const auto s = NoiseSchedule::linear(testing::tiny_config().timesteps);
  for (std::uint64_t i = 0; i < 2; ++i) {
    model.params().zero_grad();
    backward(diffusion_loss(model, testing::random_batch<double>(testing::tiny_config(), TaskId::kSR, 2, i), s));
    opt.step(model.params());
  }
  save_checkpoint(dir / "opt.ckpt", model, &opt);
  const auto c = load_checkpoint<double>(dir / "opt.ckpt");
  ASSERT_TRUE(c.optimizer.has_value());
  EXPECT_EQ(c.optimizer->steps(), 2);
  EXPECT_EQ(c.optimizer->config().lr, 2e-3);
  EXPECT_EQ(c.optimizer->config().beta1, 0.8);
  EXPECT_EQ(c.optimizer->config().weight_decay, 0.05);
  ASSERT_EQ(c.optimizer->state().size(), opt.state().size());
  for (const auto& [name, mv] : opt.state()) {
    EXPECT_EQ(c.optimizer->state().at(name).m, mv.m) << name;
    EXPECT_EQ(c.optimizer->state().at(name).v, mv.v) << name;
  }
}

TEST(Checkpoint, LoadsAcrossPrecisions) {
  const auto dir = testing::temp_dir("ckpt_prec");
  const auto f = Denoiser<float>::init_dense(testing::tiny_config(), TaskId::kT2I, 6);
  save_checkpoint(dir / "f.ckpt", f);
  const auto d = load_checkpoint<double>(dir / "f.ckpt");
  for (const auto& [name, e] : f.params()) {
    const auto a = e.value.data();
    const auto b = d.model.params().tensor(name).data();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(static_cast<double>(a[i]), b[i]);
  }
}

TEST(Checkpoint, RejectsReservedKeysAndBadFiles) {
  const auto dir = testing::temp_dir("ckpt_bad");
  const auto m = Denoiser<float>::init_dense(testing::tiny_config(), TaskId::kT2I, 7);
  EXPECT_THROW(save_checkpoint(dir / "x.ckpt", m, kNoOptimizer, {{"kind", "mtu"}}), std::invalid_argument);
  EXPECT_THROW(load_checkpoint<float>(dir / "absent.ckpt"), CheckpointError);

  // A dataset file is a valid container but not a checkpoint.
  io::Container c;
  c.meta["kind"] = "dataset";
  io::write_container(dir / "ds.mtu", c);
  EXPECT_THROW(load_checkpoint<float>(dir / "ds.mtu"), CheckpointError);

  // Drop one parameter: the model no longer matches its manifest.
  save_checkpoint(dir / "ok.ckpt", m);
  auto raw = io::read_container(dir / "ok.ckpt");
  raw.blobs.pop_back();
  io::write_container(dir / "short.ckpt", raw);
  EXPECT_THROW(load_checkpoint<float>(dir / "short.ckpt"), CheckpointError);
}

TEST(Checkpoint, SpecMetaRoundTrips) {
  ModelSpec spec{testing::tiny_config(), kAll, MoEConfig{}};
  spec.moe->d_task = 4;
  spec.moe->top_k = 2;
  const auto back = spec_from_meta(spec_meta(spec));
  EXPECT_EQ(back.denoiser, spec.denoiser);
  EXPECT_EQ(back.tasks, spec.tasks);
  EXPECT_EQ(back.moe, spec.moe);
  auto meta = spec_meta(spec);
  meta["model.d_model"] = "sixteen";
  EXPECT_THROW(spec_from_meta(meta), CheckpointError);
  meta.erase("model.d_model");
  EXPECT_THROW(spec_from_meta(meta), CheckpointError);
}

}  // namespace
}  // namespace mtu
