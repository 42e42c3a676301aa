#include <gtest/gtest.h>

#include "mtu/checkpoint.hpp"
#include "mtu/errors.hpp"
#include "mtu/evaluate.hpp"
#include "mtu/moe.hpp"
#include "mtu/train.hpp"
#include "test_util.hpp"

namespace mtu::train {
namespace {

using testing::data_config;

struct Fixture : ::testing::Test {
  std::map<TaskId, data::Dataset> sets;
  NoiseSchedule schedule = NoiseSchedule::linear(data_config().timesteps);

  void SetUp() override {
    for (auto task : {TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP}) {
      sets.emplace(task, data::generate(task, data::Split::kTrain, 32, 1));
    }
  }
  std::map<TaskId, const data::Dataset*> pointers(std::vector<TaskId> tasks) const {
    std::map<TaskId, const data::Dataset*> out;
    for (auto t : tasks) out[t] = &sets.at(t);
    return out;
  }
};

TEST_F(Fixture, MakeBatchIsPureInSeed) {
  const auto& ds = sets.at(TaskId::kIE);
  const auto a = make_batch<float>(ds, 8, 3, schedule, 0.1);
  const auto b = make_batch<float>(ds, 8, 3, schedule, 0.1);
  const auto c = make_batch<float>(ds, 8, 4, schedule, 0.1);
  EXPECT_TRUE(testing::bitwise_same(a.z0.data(), b.z0.data()));
  EXPECT_TRUE(testing::bitwise_same(a.eps.data(), b.eps.data()));
  EXPECT_EQ(a.t, b.t);
  EXPECT_EQ(a.text.ids, b.text.ids);
  EXPECT_FALSE(testing::bitwise_same(a.eps.data(), c.eps.data()));
  EXPECT_NO_THROW(a.validate(schedule.timesteps()));
}

// Monte-Carlo check of the dropout rate: each condition is nulled independently with p = 0.1.
TEST_F(Fixture, ConditionDropoutRateAndIndependence) {
  const auto& ds = sets.at(TaskId::kIE);
  std::size_t n = 0, text_dropped = 0, image_dropped = 0, both = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto b = make_batch<float>(ds, 32, seed, schedule, 0.1);
    const auto per = b.cond->numel() / 32;
    for (std::size_t i = 0; i < 32; ++i) {
      const auto row = b.text.row(i);
      const bool td = std::all_of(row.begin(), row.end(), [](int id) { return id == data::kPad; });
      const auto img = b.cond->data().subspan(i * per, per);
      const bool id = std::all_of(img.begin(), img.end(), [](float v) { return v == 0.0f; });
      text_dropped += td;
      image_dropped += id;
      both += td && id;
      ++n;
    }
  }
  const double p = 0.1, sd = std::sqrt(p * (1 - p) / static_cast<double>(n));
  EXPECT_NEAR(static_cast<double>(text_dropped) / static_cast<double>(n), p, 5 * sd);
  EXPECT_NEAR(static_cast<double>(image_dropped) / static_cast<double>(n), p, 5 * sd);
  const double sd2 = std::sqrt(0.01 * 0.99 / static_cast<double>(n));
  EXPECT_NEAR(static_cast<double>(both) / static_cast<double>(n), 0.01, 5 * sd2);
  const auto clean = make_batch<float>(ds, 32, 0, schedule, 0.0);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NE(clean.text.row(i)[0], data::kPad);
}

TEST_F(Fixture, TrainingLowersTheLossAndLogsEachStep) {
  auto model = Denoiser<float>::init_dense(data_config(), TaskId::kT2I, 2);
  AdamW<float> opt({3e-3});
  const auto& val = sets.at(TaskId::kT2I);
  const double before = validation_loss(model, val, schedule, 9, 32);
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.batch_size = 8;
  std::vector<StepRecord> log;
  train(model, opt, pointers({TaskId::kT2I}), schedule, cfg, [&](const StepRecord& r) { log.push_back(r); });
  ASSERT_EQ(log.size(), 40u);
  EXPECT_EQ(log.back().step, 40);
  EXPECT_EQ(log.front().to_line().rfind("step=1 lr=0.003 wall=", 0), 0u);
  EXPECT_NE(log.front().to_line().find(" loss.T2I="), std::string::npos);
  EXPECT_LT(validation_loss(model, val, schedule, 9, 32), before);
}

TEST_F(Fixture, ResumedRunMatchesUninterruptedRunBitwise) {
  const auto dir = testing::temp_dir("resume");
  const auto dense = Denoiser<float>::init_dense(data_config(), TaskId::kT2I, 3);
  MoEConfig mcfg;
  mcfg.d_task = 4;
  const auto tasks = pointers({TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP});
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 4;
  cfg.seed = 7;

  auto straight = moe::upcycle(dense, {TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP}, mcfg, 4);
  AdamW<float> opt_a;
  train(straight, opt_a, tasks, schedule, cfg);

  auto first = moe::upcycle(dense, {TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP}, mcfg, 4);
  AdamW<float> opt_b;
  auto half = cfg;
  half.steps = 3;
  train(first, opt_b, tasks, schedule, half);
  save_checkpoint(dir / "half.ckpt", first, &opt_b);
  auto resumed = load_checkpoint<float>(dir / "half.ckpt");
  train(resumed.model, *resumed.optimizer, tasks, schedule, cfg);

  EXPECT_EQ(resumed.optimizer->steps(), 6);
  EXPECT_TRUE(straight.params().bitwise_equal(resumed.model.params()));
}

TEST_F(Fixture, MtuTrainingNeedsEveryRegisteredTask) {
  const auto dense = Denoiser<float>::init_dense(data_config(), TaskId::kT2I, 5);
  MoEConfig mcfg;
  mcfg.d_task = 4;
  auto mtu = moe::upcycle(dense, {TaskId::kT2I, TaskId::kSR}, mcfg, 6);
  AdamW<float> opt;
  TrainConfig cfg;
  cfg.steps = 1;
  EXPECT_THROW(train(mtu, opt, pointers({TaskId::kT2I}), schedule, cfg), DataError);
  EXPECT_THROW(train(mtu, opt, pointers({TaskId::kT2I, TaskId::kSR, TaskId::kIE}), schedule, cfg), DataError);
  auto wrong = pointers({TaskId::kT2I, TaskId::kSR});
  wrong[TaskId::kSR] = &sets.at(TaskId::kIE);
  EXPECT_THROW(train(mtu, opt, wrong, schedule, cfg), DataError);
}

TEST_F(Fixture, FreezeExceptKeepsOneComponentClass) {
  auto model = Denoiser<float>::init_dense(data_config(), TaskId::kIE, 8);
  freeze_except(model.params(), ComponentClass::kFfn, true);
  for (const auto& [name, e] : model.params()) {
    const bool expect_train = component_class(e.tag) == ComponentClass::kFfn || e.tag == Component::kInputConv;
    EXPECT_EQ(e.frozen, !expect_train) << name;
  }
  const auto before = model.params().clone();
  AdamW<float> opt;
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 4;
  train(model, opt, pointers({TaskId::kIE}), schedule, cfg);
  for (const auto& [name, e] : model.params()) {
    const bool same = testing::bitwise_same(e.value.data(), before.tensor(name).data());
    EXPECT_EQ(same, e.frozen) << name;
  }
}

TEST_F(Fixture, ValidationLossIsDeterministicAndCoversEverySample) {
  const auto model = Denoiser<float>::init_dense(data_config(), TaskId::kSR, 9);
  const auto& ds = sets.at(TaskId::kSR);
  EXPECT_EQ(validation_loss(model, ds, schedule, 1, 10), validation_loss(model, ds, schedule, 1, 10));
  EXPECT_NE(validation_loss(model, ds, schedule, 1, 10), validation_loss(model, ds, schedule, 2, 10));
}

TEST_F(Fixture, EvaluationScoresEverySample) {
  const auto model = Denoiser<float>::init_dense(data_config(), TaskId::kIE, 10);
  eval::EvalConfig cfg;
  cfg.count = 6;
  cfg.steps = 3;
  cfg.batch_size = 4;
  std::vector<data::Image> out;
  const auto r = eval::evaluate(model, schedule, sets.at(TaskId::kIE), cfg, &out);
  ASSERT_EQ(r.samples.size(), 6u);
  ASSERT_EQ(out.size(), 6u);
  double mse = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto pm = metrics::psnr_mse(out[i], sets.at(TaskId::kIE).samples[i].target);
    EXPECT_EQ(pm.mse, r.samples[i].mse);
    mse += pm.mse;
  }
  EXPECT_NEAR(r.mean_mse, mse / 6, 1e-12);
  EXPECT_NE(r.summary().find("task=IE n=6"), std::string::npos);
  const auto again = eval::evaluate(model, schedule, sets.at(TaskId::kIE), cfg);
  EXPECT_EQ(again.mean_mse, r.mean_mse);

  const auto sr = Denoiser<float>::init_dense(data_config(), TaskId::kSR, 11);
  const auto rs = eval::evaluate(sr, schedule, sets.at(TaskId::kSR), cfg);
  EXPECT_EQ(rs.it_degenerate, 6u);
}

}  // namespace
}  // namespace mtu::train
