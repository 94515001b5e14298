#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "vsur/errors.hpp"
#include "vsur/training.hpp"

using namespace vsur;

namespace {

double clamped_log(double x) { return std::log(std::clamp(x, 1e-7, 1.0 - 1e-7)); }

double weight_sum(torch::nn::Module& m) {
  double s = 0.0;
  for (const auto& p : m.parameters()) s += p.to(torch::kFloat64).abs().sum().item<double>();
  return s;
}

struct Fixture {
  test::TempDir dir;
  Manifest manifest;
  ModelConfig model;
  TrainingConfig cfg;

  explicit Fixture(LossMode mode) {
    manifest = test::toy_corpus(dir / "corpus", 4, 2, 16);
    model = ModelConfig::for_spec(manifest.spec, 4, 16);
    model.branch_width = 32;
    cfg.loss_mode = mode;
    cfg.batch_size = 4;
    cfg.max_iterations = 6;
    cfg.checkpoint_every = 1000;
    cfg.deterministic = true;
    cfg.seed = 3;
  }

  TrainResult run(const std::string& name, std::optional<std::filesystem::path> resume = std::nullopt,
                  std::function<void(std::int64_t, Regressor&, Discriminator*)> cb = nullptr) {
    TrainOptions o;
    o.checkpoint = dir / (name + ".ckpt");
    o.log_path = dir / (name + ".log");
    o.resume_from = std::move(resume);
    o.after_iteration = std::move(cb);
    return train(manifest, model, cfg, o);
  }
};

}  // namespace

TEST(Losses, WorkedExamples) {
  const auto half = torch::full({2, 3, 4, 4}, 0.5);
  EXPECT_NEAR(vsur::mse_loss(half, torch::zeros_like(half)).item<double>(), 0.25, 1e-7);
  EXPECT_NEAR(adv_loss_R(torch::full({4}, std::exp(-1.0397))).item<double>(), 1.0397, 1e-5);
  EXPECT_NEAR(adv_loss_D(torch::full({4}, 0.5), torch::full({4}, 0.5)).item<double>(), 2.0 * std::log(2.0), 1e-6);

  TrainingConfig c;
  c.loss_mode = LossMode::feat_adv;
  LossTerms t{torch::tensor(9.0), torch::tensor(2.0), torch::tensor(1.0)};
  EXPECT_NEAR(combined_loss(c, t).item<double>(), 2.01, 1e-6);
  c.lambda = 0.0;
  EXPECT_NEAR(combined_loss(c, t).item<double>(), 2.0, 1e-7);
  c.loss_mode = LossMode::mse;
  EXPECT_NEAR(combined_loss(c, t).item<double>(), 9.0, 1e-7);
  c.loss_mode = LossMode::adv;
  EXPECT_NEAR(combined_loss(c, t).item<double>(), 1.0, 1e-7);
}

TEST(Losses, AdversarialMatchesElementwiseOracle) {
  torch::manual_seed(2);
  const auto real = torch::rand({64}, torch::kFloat64);
  auto fake = torch::rand({64}, torch::kFloat64);
  fake[0] = 0.0;  // exercises the clamp
  double r = 0.0, d = 0.0;
  for (int i = 0; i < 64; ++i) {
    const double f = fake[i].item<double>(), x = real[i].item<double>();
    r -= clamped_log(f);
    d -= clamped_log(x) + clamped_log(1.0 - f);
  }
  EXPECT_NEAR(adv_loss_R(fake).item<double>(), r / 64, 1e-9);
  EXPECT_NEAR(adv_loss_D(real, fake).item<double>(), d / 64, 1e-9);
  EXPECT_TRUE(std::isfinite(adv_loss_R(torch::zeros({3})).item<double>()));
}

TEST(Losses, LogitFormAgreesWithClamped) {
  const auto rl = torch::linspace(-6, 6, 25, torch::kFloat64);
  const auto fl = torch::linspace(5, -5, 25, torch::kFloat64);
  EXPECT_NEAR(adv_loss_R_logits(fl).item<double>(), adv_loss_R(torch::sigmoid(fl)).item<double>(), 1e-9);
  EXPECT_NEAR(adv_loss_D_logits(rl, fl).item<double>(),
              adv_loss_D(torch::sigmoid(rl), torch::sigmoid(fl)).item<double>(), 1e-9);
  // Far into saturation the logit form still carries a gradient.
  auto x = torch::full({1}, -40.0, torch::kFloat64).set_requires_grad(true);
  adv_loss_R_logits(x).backward();
  EXPECT_NEAR(x.grad().item<double>(), -1.0, 1e-9);
}

TEST(Losses, FeatureLossOracleAndSymmetry) {
  auto comp = FeatureComparator::fallback();
  torch::manual_seed(4);
  const auto a = torch::rand({2, 3, 8, 8}) * 2 - 1;
  const auto b = torch::rand({2, 3, 8, 8}) * 2 - 1;
  const auto fa = comp(a).to(torch::kFloat64), fb = comp(b).to(torch::kFloat64);
  double sum = 0.0;
  const auto diff = (fa - fb).flatten();
  for (std::int64_t i = 0; i < diff.numel(); ++i) sum += diff[i].item<double>() * diff[i].item<double>();
  const double oracle = sum / static_cast<double>(diff.numel());
  EXPECT_NEAR(feature_loss(comp, a, b).item<double>(), oracle, 1e-5 * oracle);
  EXPECT_NEAR(feature_loss(comp, a, b).item<double>(), feature_loss(comp, b, a).item<double>(), 1e-6 * oracle);
  EXPECT_EQ(feature_loss(comp, a, a).item<double>(), 0.0);
}

TEST(TrainingConfig, DefaultsAndValidation) {
  TrainingConfig c;
  EXPECT_DOUBLE_EQ(c.lr_discriminator / c.lr_regressor, 4.0);
  EXPECT_EQ(c.batch_size, 16);
  EXPECT_DOUBLE_EQ(c.lambda, 0.01);
  EXPECT_DOUBLE_EQ(c.beta1, 0.0);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = c;
  bad.lambda = -1;
  EXPECT_THROW(bad.validate(), ValidationError);
  EXPECT_THROW(loss_mode_from_string("l1"), ValidationError);
  for (auto m : {LossMode::mse, LossMode::feat, LossMode::adv, LossMode::feat_adv})
    EXPECT_EQ(loss_mode_from_string(to_string(m)), m);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainingConfig>().lr_discriminator, c.lr_discriminator);
}

TEST(Training, DeterministicReplay) {
  Fixture f(LossMode::feat_adv);
  const auto a = f.run("a");
  const auto b = f.run("b");
  ASSERT_EQ(a.log.size(), 6u);
  ASSERT_EQ(b.log.size(), 6u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_TRUE(same_losses(a.log[i], b.log[i])) << i;
  EXPECT_TRUE(a.log[0].l_feat && a.log[0].l_adv_R && a.log[0].l_adv_D && a.log[0].d_real);
}

TEST(Training, BothNetworksUpdatedEveryIteration) {
  Fixture f(LossMode::feat_adv);
  double prev_r = -1, prev_d = -1;
  int changes_r = 0, changes_d = 0;
  const auto res = f.run("a", std::nullopt, [&](std::int64_t, Regressor& r, Discriminator* d) {
    ASSERT_NE(d, nullptr);
    const double sr = weight_sum(*r), sd = weight_sum(**d);
    if (sr != prev_r) ++changes_r;
    if (sd != prev_d) ++changes_d;
    prev_r = sr;
    prev_d = sd;
  });
  EXPECT_EQ(res.regressor_updates, 6);
  EXPECT_EQ(res.discriminator_updates, 6);
  EXPECT_EQ(changes_r, 6);
  EXPECT_EQ(changes_d, 6);
}

TEST(Training, MseModeHasNoDiscriminator) {
  Fixture f(LossMode::mse);
  const auto res = f.run("m");
  EXPECT_EQ(res.discriminator_updates, 0);
  EXPECT_FALSE(res.log[0].l_adv_D.has_value());
  EXPECT_DOUBLE_EQ(res.log[0].total, res.log[0].l_mse);
  const auto loaded = load_checkpoint(f.dir / "m.ckpt");
  EXPECT_FALSE(loaded.meta.has_discriminator);
  EXPECT_EQ(loaded.meta.iteration, 6);
}

TEST(Training, ResumeMatchesUninterrupted) {
  Fixture f(LossMode::feat_adv);
  const auto full = f.run("full");
  f.cfg.max_iterations = 3;
  f.run("part");
  f.cfg.max_iterations = 6;
  const auto rest = f.run("part", f.dir / "part.ckpt");
  ASSERT_EQ(rest.log.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rest.log[i].iteration, full.log[i + 3].iteration);
    EXPECT_TRUE(same_losses(rest.log[i], full.log[i + 3])) << i;
  }
  auto a = load_checkpoint(f.dir / "full.ckpt"), b = load_checkpoint(f.dir / "part.ckpt");
  for (const auto& p : a.regressor->named_parameters())
    EXPECT_TRUE(torch::equal(p.value(), b.regressor->named_parameters()[p.key()])) << p.key();

  std::ifstream log(f.dir / "part.log");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["iteration"].get<int>(), ++lines);
    EXPECT_TRUE(j.contains("L_feat") && j.contains("D_fake") && j.contains("wall_ms"));
  }
  EXPECT_EQ(lines, 6);
}

TEST(Training, NonFiniteLossStops) {
  Fixture f(LossMode::mse);
  f.cfg.max_iterations = 1;
  f.run("seed");
  auto loaded = load_checkpoint(f.dir / "seed.ckpt");
  {
    torch::NoGradGuard ng;
    for (auto& p : loaded.regressor->parameters()) p.fill_(std::nan(""));
  }
  CheckpointMeta meta = loaded.meta;
  meta.iteration = 0;
  torch::optim::Adam opt(loaded.regressor->parameters(), torch::optim::AdamOptions(1e-3));
  save_checkpoint(f.dir / "nan.ckpt", meta, loaded.regressor, nullptr, &opt, nullptr);
  EXPECT_THROW(f.run("after", f.dir / "nan.ckpt"), TrainingError);
}

TEST(Training, ResolutionMismatchRejected) {
  Fixture f(LossMode::mse);
  f.model.resolution = 32;
  EXPECT_THROW(f.run("x"), ValidationError);
}

TEST(Training, SingleRecordLossSettles) {
  test::TempDir dir;
  const auto m = test::toy_corpus(dir / "one", 1, 1, 16, 1, 0);
  ASSERT_EQ(m.n_train, 1u);
  auto model = ModelConfig::for_spec(m.spec, 4, 16);
  model.branch_width = 32;
  TrainingConfig cfg;
  cfg.loss_mode = LossMode::mse;
  cfg.batch_size = 4;
  cfg.max_iterations = 200;
  cfg.checkpoint_every = 1000;
  cfg.deterministic = true;
  TrainOptions o;
  o.checkpoint = dir / "one.ckpt";
  const auto log = train(m, model, cfg, o).log;
  ASSERT_EQ(log.size(), 200u);
  for (std::size_t i = 101; i < log.size(); ++i) EXPECT_LE(log[i].l_mse, log[i - 1].l_mse) << log[i].iteration;
  EXPECT_LT(log.back().l_mse, log.front().l_mse);
}
