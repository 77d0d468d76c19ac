// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "dualpipe/io/files.hpp"
#include "dualpipe/train/experiment.hpp"
#include "dualpipe/train/gradcheck_suite.hpp"

using namespace dualpipe;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dualpipe_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

TrainConfig quick(std::uint64_t steps, std::size_t threads = 1) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 3;
  tc.peak_lr = 3e-3;
  tc.seed = 5;
  tc.threads = threads;
  return tc;
}

}  // namespace

TEST(Trainer, SameSeedGivesBitwiseIdenticalCheckpoints) {
  const auto s = tiny_setup(1);
  const auto a = train_base(s.model, s.primary_vocab, s.existing, quick(6));
  const auto b = train_base(s.model, s.primary_vocab, s.existing, quick(6));
  const auto da = scratch("det_a"), db = scratch("det_b");
  a.save(da);
  b.save(db);
  EXPECT_EQ(io::read_file(da / "weights.bin"), io::read_file(db / "weights.bin"));
  EXPECT_EQ(io::read_file(da / "manifest.json"), io::read_file(db / "manifest.json"));
  std::filesystem::remove_all(da);
  std::filesystem::remove_all(db);

  TrainConfig other = quick(6);
  other.seed = 6;
  EXPECT_NE(train_base(s.model, s.primary_vocab, s.existing, other).digest(), a.digest());
}

TEST(Trainer, ThreadCountDoesNotChangeTheResult) {
  const auto s = tiny_setup(2);
  const auto one = train_base(s.model, s.primary_vocab, s.existing, quick(5, 1));
  const auto three = train_base(s.model, s.primary_vocab, s.existing, quick(5, 3));
  EXPECT_EQ(one.digest(), three.digest());

  auto base = std::make_shared<const BaseModel<float>>(one);
  const auto e1 = extend(base, s.ext, s.secondary_vocab, s.added, quick(4, 1));
  for (int rep = 0; rep < 3; ++rep) {
    const auto e3 = extend(base, s.ext, s.secondary_vocab, s.added, quick(4, 3));
    for (std::size_t i = 0; i < e1.params().size(); ++i)
      ASSERT_EQ(e1.params()[i].value.vec(), e3.params()[i].value.vec()) << e1.params()[i].name;
  }
}

TEST(Trainer, LogFollowsScheduleAndLossDecreases) {
  const auto s = tiny_setup(3);
  TrainResult log;
  TrainConfig tc = quick(40);
  train_base(s.model, s.primary_vocab, s.existing, tc, &log);
  ASSERT_EQ(log.log.size(), 40u);
  const TriStageSchedule sched{tc.peak_lr, tc.steps};
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < log.log.size(); ++i) {
    EXPECT_EQ(log.log[i].step, i + 1);
    EXPECT_DOUBLE_EQ(log.log[i].lr, lr_at(sched, i + 1));
    EXPECT_TRUE(std::isfinite(log.log[i].loss));
    clipped += log.log[i].clipped;
    EXPECT_EQ(log.log[i].clipped, log.log[i].grad_norm > tc.grad_clip);
  }
  EXPECT_EQ(clipped, log.clipped_steps);
  EXPECT_LT(log.log.back().loss, log.log.front().loss);

  const std::string csv = loss_log_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,lr,loss,grad_norm,clipped");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 41u);
}

TEST(Trainer, ExtensionLeavesBaseUntouchedAndTrainsEveryExtensionTensor) {
  const auto s = tiny_setup(4, 1, 2);
  auto base = std::make_shared<const BaseModel<float>>(train_base(s.model, s.primary_vocab, s.existing, quick(3)));
  const std::string before = base->digest();
  std::vector<Tensor<float>> primary_before;
  for (const auto& u : s.existing) primary_before.push_back(base->encode_primary(u.features));

  const DualPipelineModel<float> init(base, s.ext, s.secondary_vocab, Rng(9).derive(0xE77).next_u64());
  TrainConfig tc = quick(8);
  tc.seed = 9;
  const auto m = extend(base, s.ext, s.secondary_vocab, s.added, tc);
  EXPECT_EQ(base->digest(), before);
  EXPECT_EQ(base->frozen_digest(), before);
  for (std::size_t i = 0; i < s.existing.size(); ++i)
    EXPECT_EQ(base->encode_primary(s.existing[i].features).vec(), primary_before[i].vec());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_TRUE(m.params()[i].trainable);
    EXPECT_NE(m.params()[i].value.vec(), init.params()[i].value.vec()) << m.params()[i].name;
  }
}

TEST(Trainer, ExtensionCheckpointsAtRequestedSteps) {
  const auto s = tiny_setup(5);
  auto base = std::make_shared<const BaseModel<float>>(train_base(s.model, s.primary_vocab, s.existing, quick(0)));
  TrainConfig tc = quick(7);
  tc.checkpoint_every = 3;
  std::vector<std::uint64_t> seen;
  extend(base, s.ext, s.secondary_vocab, s.added, tc, nullptr,
         [&](const DualPipelineModel<float>&, std::uint64_t step) { seen.push_back(step); });
  EXPECT_EQ(seen, (std::vector<std::uint64_t>{3, 6}));
}

TEST(Trainer, ExtensionRefusesUnfrozenBase) {
  const auto s = tiny_setup(6);
  auto loose = std::make_shared<const BaseModel<float>>(s.model, s.primary_vocab, 1);
  EXPECT_THROW(extend(loose, s.ext, s.secondary_vocab, s.added, quick(1)), ConfigError);
}

TEST(Trainer, NonFiniteLossAbortsWithStateDump) {
  ParamStore<float> store;
  store.add("w", Tensor<float>({1, 2}, 1.0f));
  const auto dump = scratch("nan_dump");
  TrainHooks hooks;
  hooks.dump_dir = dump;
  std::size_t calls = 0;
  auto loss = [&](Graph<float>& g, std::size_t, Rng&) -> std::pair<Var, std::size_t> {
    ++calls;
    const float f = calls > 6 ? std::numeric_limits<float>::quiet_NaN() : 1.0f;
    return {g.sum_all(g.scale(g.param(store.get("w")), f)), 1};
  };
  TrainConfig tc = quick(10);
  try {
    run_training<float>(store, 4, tc, loss, hooks);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
  }
  ASSERT_TRUE(std::filesystem::exists(dump / "manifest.json"));
  const auto ck = load_checkpoint(dump);
  EXPECT_EQ(ck.meta.at("kind"), "dump");
  EXPECT_EQ(ck.meta.at("step"), 3);
  EXPECT_EQ(ck.params.size(), 1u);
  std::filesystem::remove_all(dump);
}

TEST(Trainer, ConfigValidation) {
  TrainConfig tc;
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.peak_lr = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  ParamStore<float> store;
  store.add("w", Tensor<float>({1, 1}, 1.0f));
  auto loss = [&](Graph<float>& g, std::size_t, Rng&) -> std::pair<Var, std::size_t> {
    return {g.sum_all(g.param(store.get("w"))), 1};
  };
  EXPECT_THROW(run_training<float>(store, 0, quick(1), loss), ConfigError);
}

TEST(Trainer, EmptySweepIsHeaderOnly) {
  EXPECT_EQ(sweep_csv({}, SweepAxis::Rank), "rank,params_lora,params_decoder,params_layernorm,params,avg_cer\n");
  EXPECT_EQ(sweep_csv({}, SweepAxis::StartLayer),
            "start_layer,params_lora,params_decoder,params_layernorm,params,avg_cer\n");
  EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
}

TEST(GradientSuite, AnalyticMatchesFiniteDifferences) {
  for (const auto& r : run_gradient_suite(3)) {
    EXPECT_TRUE(r.report.pass) << r.name << ": worst " << r.report.worst_param << " rel "
                               << r.report.max_rel_error;
    EXPECT_GT(r.report.checked, 0u);
  }
}
