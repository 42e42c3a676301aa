#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mtu/diffusion.hpp"
#include "mtu/errors.hpp"
#include "mtu/schedule.hpp"
#include "test_util.hpp"

namespace mtu {
namespace {

using testing::tiny_config;

template <class T>
const Tensor<T>* const kNoImage = nullptr;

TEST(Schedule, LinearIsValidAndEndsNearZeroSignal) {
  for (std::size_t T : {2u, 20u, 200u, 1000u}) {
    const auto s = NoiseSchedule::linear(T);
    ASSERT_EQ(s.timesteps(), T);
    EXPECT_DOUBLE_EQ(s.a(0), 1.0);
    for (std::size_t t = 1; t <= T; ++t) {
      EXPECT_LT(s.a(t), s.a(t - 1));
      EXPECT_GT(s.a(t), 0.0);
    }
  }
  const auto s = NoiseSchedule::linear(1000);
  EXPECT_NEAR(s.a(1), 1 - 1e-4, 1e-12);
  EXPECT_LT(s.a(1000), 1e-4);
}

TEST(Schedule, RejectsInvalidSequences) {
  EXPECT_THROW(NoiseSchedule({0.9, 0.5}), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule({1.0, 0.5, 0.6}), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule({1.0, -0.1}), std::invalid_argument);
  EXPECT_NO_THROW(NoiseSchedule({1.0, 0.5, 0.1}));
}

TEST(ForwardNoise, MatchesClosedFormPerExample) {
  const auto s = NoiseSchedule::linear(50);
  Rng rng(1);
  const auto z0 = testing::randn<double>({2, 3}, rng), eps = testing::randn<double>({2, 3}, rng);
  const std::vector<int> t{5, 40};
  const auto zt = forward_noise(z0, t, eps, s);
  for (std::size_t b = 0; b < 2; ++b) {
    const double a = s.a(static_cast<std::size_t>(t[b]));
    for (std::size_t i = 0; i < 3; ++i) {
      const auto k = b * 3 + i;
      EXPECT_NEAR(zt.data()[k], std::sqrt(a) * z0.data()[k] + std::sqrt(1 - a) * eps.data()[k], 1e-15);
    }
  }
}

// Monte-Carlo oracle: z_t | z_0 ~ N(sqrt(a_t) z_0, (1 - a_t) I).
TEST(ForwardNoise, MonteCarloMomentsMatchMarginal) {
  const auto s = NoiseSchedule::linear(200);
  const std::size_t n = 200000;
  Rng rng(2);
  for (int t : {1, 60, 200}) {
    const auto z0 = Tensor<double>::full({n}, 0.7);
    const auto eps = testing::randn<double>({n}, rng);
    const std::vector<int> ts(n, t);
    const auto zt = forward_noise(ops::reshape(z0, {n, 1}), ts, ops::reshape(eps, {n, 1}), s);
    double mean = 0, sq = 0;
    for (double v : zt.data()) mean += v;
    mean /= n;
    for (double v : zt.data()) sq += (v - mean) * (v - mean);
    const double var = sq / (n - 1);
    const double a = s.a(static_cast<std::size_t>(t));
    const double sd = std::sqrt(1 - a);
    EXPECT_NEAR(mean, std::sqrt(a) * 0.7, 5 * sd / std::sqrt(n)) << "t=" << t;
    EXPECT_NEAR(var, 1 - a, 5 * (1 - a) * std::sqrt(2.0 / n)) << "t=" << t;
  }
}

TEST(ConditioningBatch, ValidationCatchesInconsistentFields) {
  const auto c = tiny_config();
  auto b = testing::random_batch<double>(c, TaskId::kIE, 2, 3);
  EXPECT_NO_THROW(b.validate(c.timesteps));
  auto bad_t = b;
  bad_t.t[0] = 0;
  EXPECT_THROW(bad_t.validate(c.timesteps), DataError);
  bad_t.t[0] = static_cast<int>(c.timesteps) + 1;
  EXPECT_THROW(bad_t.validate(c.timesteps), DataError);
  auto no_cond = b;
  no_cond.cond.reset();
  EXPECT_THROW(no_cond.validate(c.timesteps), DataError);
  auto extra_cond = testing::random_batch<double>(c, TaskId::kT2I, 2, 3);
  extra_cond.cond = b.cond;
  EXPECT_THROW(extra_cond.validate(c.timesteps), DataError);
  auto short_text = b;
  short_text.text.batch = 1;
  short_text.text.ids.resize(c.text_len);
  EXPECT_THROW(short_text.validate(c.timesteps), DataError);
}

TEST(DiffusionLoss, FiniteDifferenceOnModelParameters) {
  const auto c = tiny_config();
  for (auto task : {TaskId::kT2I, TaskId::kSR}) {
    auto model = Denoiser<double>::init_dense(c, task, 7);
    testing::jitter(model.params(), 8, 0.05, true);
    const auto s = NoiseSchedule::linear(c.timesteps);
    const auto batch = testing::random_batch<double>(c, task, 2, 9);
    model.params().zero_grad();
    backward(diffusion_loss(model, batch, s));
    auto loss = [&] { return diffusion_loss(model, batch, s).item(); };
    Rng rng(10);
    const auto names = model.params().names();
    std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
    for (int k = 0; k < 80; ++k) {
      auto& p = model.params().at(names[pick(rng)]).value;
      std::uniform_int_distribution<std::size_t> coord(0, p.numel() - 1);
      const auto i = coord(rng);
      const double analytic = p.grad()[i];
      const double numeric = testing::central_difference(loss, p, i);
      EXPECT_LT(testing::rel_err(analytic, numeric), 1e-4) << task_name(task) << " " << names[0] << " coord " << i;
    }
  }
}

TEST(Guidance, CombineCollapsesToItsTerms) {
  const std::vector<double> uu{1, 2}, iu{3, 5}, it{7, 11};
  EXPECT_EQ(combine_guidance<double>(uu, iu, it, 1, 1), it);
  EXPECT_EQ(combine_guidance<double>(uu, iu, it, 1, 0), iu);
  EXPECT_EQ(combine_guidance<double>(uu, iu, it, 0, 0), uu);
  const auto g = combine_guidance<double>(uu, iu, it, 2.0, 3.0);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(g[i], uu[i] + 2 * (iu[i] - uu[i]) + 3 * (it[i] - iu[i]));
  // Text-only usage: both unconditional inputs are the same prediction.
  const auto t = combine_guidance<double>(uu, uu, it, 0.0, 4.0);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(t[i], uu[i] + 4 * (it[i] - uu[i]));
}

TEST(Guidance, BatchedPassesMatchSeparatePredictions) {
  const auto c = tiny_config();
  auto model = Denoiser<double>::init_dense(c, TaskId::kIE, 11);
  testing::jitter(model.params(), 12, 0.05, true);
  const auto b = testing::random_batch<double>(c, TaskId::kIE, 2, 13);
  const std::vector<int> t(2, 9);
  const auto null_text = null_tokens(2, c.text_len);
  const auto zeros = Tensor<double>::zeros(b.z0.shape());
  const auto e_uu = model.predict(b.z0, &zeros, null_text, t, TaskId::kIE);
  const auto e_iu = model.predict(b.z0, &*b.cond, null_text, t, TaskId::kIE);
  const auto e_it = model.predict(b.z0, &*b.cond, b.text, t, TaskId::kIE);
  const auto ref = combine_guidance<double>(e_uu.data(), e_iu.data(), e_it.data(), 1.5, 4.0);
  const auto got = guided_noise(model, b.z0, 9, TaskId::kIE, b.text, &*b.cond, GuidanceConfig{4.0, 1.5});
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.data()[i], ref[i], 1e-12);

  // Unit scales take the single conditional pass.
  const auto unit = guided_noise(model, b.z0, 9, TaskId::kIE, b.text, &*b.cond, GuidanceConfig{1.0, 1.0});
  EXPECT_TRUE(testing::bitwise_same(unit.data(), e_it.data()));
}

TEST(Guidance, TextOnlyTaskRejectsImageScale) {
  const auto c = tiny_config();
  const auto model = Denoiser<double>::init_dense(c, TaskId::kT2I, 14);
  const auto b = testing::random_batch<double>(c, TaskId::kT2I, 1, 15);
  EXPECT_THROW(guided_noise(model, b.z0, 3, TaskId::kT2I, b.text, kNoImage<double>, GuidanceConfig{2.0, 1.0}), ConfigError);
  const auto s = NoiseSchedule::linear(c.timesteps);
  EXPECT_THROW(sample(model, s, TaskId::kT2I, b.text, kNoImage<double>, 4, GuidanceConfig{1.0, 2.0}, 0), ConfigError);
}

TEST(Sampling, TimestepGrid) {
  EXPECT_EQ(sampling_timesteps(5, 5), (std::vector<int>{5, 4, 3, 2, 1}));
  EXPECT_EQ(sampling_timesteps(10, 1), (std::vector<int>{10}));
  const auto g = sampling_timesteps(200, 50);
  EXPECT_EQ(g.front(), 200);
  EXPECT_EQ(g.back(), 1);
  EXPECT_TRUE(std::is_sorted(g.rbegin(), g.rend()));
  EXPECT_EQ(std::adjacent_find(g.begin(), g.end()), g.end());
  EXPECT_THROW(sampling_timesteps(10, 0), ConfigError);
  EXPECT_THROW(sampling_timesteps(10, 11), ConfigError);
}

// Reference DDIM (η = 0) over every timestep, written directly from the update rule.
TEST(Sampling, FullChainMatchesReferenceSampler) {
  const auto c = tiny_config();
  auto model = Denoiser<double>::init_dense(c, TaskId::kT2I, 16);
  testing::jitter(model.params(), 17, 0.05, true);
  const auto s = NoiseSchedule::linear(c.timesteps);
  Rng trng(18);
  const auto text = testing::random_tokens(2, c, trng);
  const std::uint64_t seed = 19;
  const auto got = sample(model, s, TaskId::kT2I, text, kNoImage<double>, c.timesteps, GuidanceConfig{}, seed);

  const Shape shape{2, c.channels, c.image_size, c.image_size};
  Rng rng(mix_seed(seed, {0x5A3B1E}));
  auto z = normal_vector<double>(rng, shape_numel(shape));
  for (int t = static_cast<int>(c.timesteps); t >= 1; --t) {
    const std::vector<int> ts(2, t);
    const auto eps = model.predict(Tensor<double>::constant(shape, z), nullptr, text, ts, TaskId::kT2I);
    const double a = s.a(static_cast<std::size_t>(t)), ap = s.a(static_cast<std::size_t>(t - 1));
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double e = eps.data()[j];
      const double x0 = std::clamp((z[j] - std::sqrt(1 - a) * e) / std::sqrt(a), -1.0, 1.0);
      z[j] = std::sqrt(ap) * x0 + std::sqrt(1 - ap) * e;
    }
  }
  for (std::size_t j = 0; j < z.size(); ++j) {
    EXPECT_NEAR(got.data()[j], std::clamp(z[j], -1.0, 1.0), 1e-12);
    EXPECT_LE(std::abs(got.data()[j]), 1.0);
  }
}

TEST(Sampling, FixedSeedIsBitwiseReproducible) {
  const auto c = tiny_config();
  const auto model = Denoiser<float>::init_dense(c, TaskId::kIP, 20);
  const auto s = NoiseSchedule::linear(c.timesteps);
  const auto b = testing::random_batch<float>(c, TaskId::kIP, 2, 21);
  const GuidanceConfig g{3.0, 1.5};
  const auto x = sample(model, s, TaskId::kIP, b.text, &*b.cond, 5, g, 22);
  const auto y = sample(model, s, TaskId::kIP, b.text, &*b.cond, 5, g, 22);
  const auto z = sample(model, s, TaskId::kIP, b.text, &*b.cond, 5, g, 23);
  EXPECT_TRUE(testing::bitwise_same(x.data(), y.data()));
  EXPECT_FALSE(testing::bitwise_same(x.data(), z.data()));
}

}  // namespace
}  // namespace mtu
