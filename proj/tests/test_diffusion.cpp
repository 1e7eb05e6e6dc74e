#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "metadiff/diffusion.hpp"
#include "metadiff/em_oracle.hpp"
#include "metadiff/nn/gradcheck.hpp"
#include "metadiff/nn/optim.hpp"
#include "metadiff/nn/surrogate.hpp"

using namespace metadiff;
using nn::Tensor;
using TensorD = Tensor<double>;

namespace {

// Stand-in denoiser returning a fixed prediction and recording the gradient it receives.
struct FixedNet {
  TensorD eps;
  TensorD grad_seen;
  int calls = 0;
  std::vector<std::uint8_t> last_null;

  TensorD forward(const TensorD&, std::span<const int>, const nn::ConditionBatch<double>& c) {
    ++calls;
    last_null = c.is_null;
    return eps;
  }
  TensorD backward(const TensorD& g, bool) {
    grad_seen = g;
    return {};
  }
};

TensorD random_tensor(std::vector<int> shape, nn::InitRng& rng, double bound = 1.0) {
  TensorD t(std::move(shape));
  nn::init_uniform(t, bound, rng);
  return t;
}

TrainBatch<double> random_batch(int n, int size, nn::InitRng& rng) {
  TrainBatch<double> b{random_tensor({3, n, size, size}, rng, 0.8), TensorD({n, kSpectrumPoints}),
                       random_tensor({n, nn::kMaterialFeatures}, rng)};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : b.spectra.values()) v = u(rng);
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule

TEST(Schedule, FourStepHandProduct) {
  const auto s = make_schedule(4);
  const double b[4] = {1e-4, 1e-4 + (0.02 - 1e-4) / 3, 1e-4 + 2 * (0.02 - 1e-4) / 3, 0.02};
  double prod = 1.0;
  for (int t = 1; t <= 4; ++t) {
    prod *= 1.0 - b[t - 1];
    EXPECT_NEAR(s.beta_at(t), b[t - 1], 1e-15);
    EXPECT_NEAR(s.alpha_at(t), 1.0 - b[t - 1], 1e-15);
    EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-15);
  }
  EXPECT_EQ(s.alpha_bar_at(0), 1.0);
  EXPECT_NEAR(s.posterior_variance(1), 0.0, 1e-18);
  EXPECT_NEAR(s.posterior_variance(3), b[2] * (1 - s.alpha_bar_at(2)) / (1 - s.alpha_bar_at(3)), 1e-15);
}

TEST(Schedule, StrictlyDecreasingAndNearlyDestroysSignal) {
  const auto s = make_schedule(kDefaultTimesteps);
  for (int t = 1; t <= s.T; ++t) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1)) << t;
  EXPECT_GT(s.terminal_alpha_bar(), 0.0);
  EXPECT_LT(s.terminal_alpha_bar(), 0.05);
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_schedule(1), std::invalid_argument);
  const auto s = make_schedule(10);
  EXPECT_THROW(s.alpha_bar_at(11), std::out_of_range);
  EXPECT_THROW(s.beta_at(0), std::out_of_range);
  EXPECT_THROW(schedule_kind_from_string("cosine"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Forward process

TEST(ForwardProcess, MomentsMatchClosedForm) {
  const auto s = make_schedule(kDefaultTimesteps);
  const int t = s.T / 2;
  const std::size_t n = 100000;
  const double x0v = 0.3;
  std::vector<double> x0(n, x0v), eps(n), out(n);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  for (auto& e : eps) e = z(rng);
  forward_sample<double>(x0, t, eps, s, out);
  double mean = 0, sq = 0;
  for (double v : out) mean += v;
  mean /= n;
  for (double v : out) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / (n - 1));
  const double ab = s.alpha_bar_at(t);
  const double want_sd = std::sqrt(1 - ab);
  EXPECT_NEAR(mean, std::sqrt(ab) * x0v, 3 * want_sd / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(sd / want_sd, 1.0, 0.02);
}

TEST(ForwardProcess, BatchedUsesPerSampleTimestep) {
  const auto s = make_schedule(20);
  nn::InitRng rng(5);
  const TensorD x0 = random_tensor({3, 2, 2, 2}, rng), eps = random_tensor({3, 2, 2, 2}, rng);
  const std::vector<int> t{1, 20};
  const TensorD xt = forward_sample(x0, t, eps, s);
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 2; ++i)
      for (int p = 0; p < 4; ++p) {
        const std::size_t idx = (static_cast<std::size_t>(k) * 2 + i) * 4 + p;
        const double ab = s.alpha_bar_at(t[i]);
        EXPECT_NEAR(xt[idx], std::sqrt(ab) * x0[idx] + std::sqrt(1 - ab) * eps[idx], 1e-15);
      }
  EXPECT_THROW(forward_sample(x0, std::vector<int>{1}, eps, s), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Guidance and reverse step

TEST(Guidance, ZeroWeightIsConditionalBitwise) {
  nn::InitRng rng(6);
  const Tensor<float> c({2, 3}, 0.0f);
  Tensor<float> ec = c, eu = c;
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  for (auto& v : ec.values()) v = u(rng);
  for (auto& v : eu.values()) v = u(rng);
  const auto g = guided_noise(ec, eu, 0.0);
  for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g[i], ec[i]);
}

TEST(Guidance, EqualPredictionsAreFixedPoint) {
  nn::InitRng rng(7);
  const TensorD e = random_tensor({4, 5}, rng, 3.0);
  for (double w : {0.0, 0.5, 1.0, 5.0, 100.0}) {
    const auto g = guided_noise(e, e, w);
    for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g[i], e[i]) << "w=" << w;
  }
}

TEST(Guidance, HandValue) {
  TensorD c({1, 2}), u({1, 2});
  c[0] = 1.0, c[1] = -2.0, u[0] = 0.5, u[1] = 1.0;
  const auto g = guided_noise(c, u, 5.0);
  EXPECT_DOUBLE_EQ(g[0], 1.0 + 5.0 * 0.5);
  EXPECT_DOUBLE_EQ(g[1], -2.0 + 5.0 * -3.0);
}

TEST(ReverseStep, MeanMatchesHandFormulaAndFinalStepIsNoiseless) {
  const auto s = make_schedule(10);
  const TensorD x({1, 1}, 0.7), e({1, 1}, -0.4);
  for (int t : {1, 5, 10}) {
    const double want = (0.7 - s.beta_at(t) / std::sqrt(1 - s.alpha_bar_at(t)) * -0.4) / std::sqrt(s.alpha_at(t));
    EXPECT_NEAR(reverse_mean(x, t, e, s)[0], want, 1e-15);
  }
  std::mt19937_64 a(1), b(2);
  EXPECT_EQ(reverse_step(x, 1, e, s, a)[0], reverse_step(x, 1, e, s, b)[0]);
  EXPECT_NE(reverse_step(x, 2, e, s, a)[0], reverse_step(x, 2, e, s, b)[0]);
}

TEST(ReverseStep, NoiseHasPosteriorVariance) {
  const auto s = make_schedule(50);
  const int t = 30;
  const TensorD x({1, 100000}, 0.0), e({1, 100000}, 0.0);
  std::mt19937_64 rng(8);
  const auto y = reverse_step(x, t, e, s, rng);
  double sq = 0;
  for (double v : y.values()) sq += v * v;
  EXPECT_NEAR(sq / y.numel() / s.posterior_variance(t), 1.0, 0.02);
}

// ---------------------------------------------------------------------------
// Training loss

TEST(TrainingLoss, WeightedChannelMseByHand) {
  // One 2x2 sample; prediction misses the noise by 1, 2, 3 in R, G, B.
  const auto s = make_schedule(10);
  TrainBatch<double> batch{TensorD({3, 1, 2, 2}, 0.0), TensorD({1, kSpectrumPoints}, 0.5),
                           TensorD({1, nn::kMaterialFeatures}, 0.0)};
  StepNoise<double> noise{{4}, TensorD({3, 1, 2, 2}, 0.0), {0}};
  FixedNet net{TensorD({3, 1, 2, 2}, 0.0), {}};
  for (int k = 0; k < 3; ++k)
    for (int p = 0; p < 4; ++p) net.eps[static_cast<std::size_t>(k) * 4 + p] = k + 1.0;
  LossWeights w;
  w.lambda_spec = 0.0;
  const auto parts = training_loss<double>(net, static_cast<nn::Surrogate<double>*>(nullptr), batch, noise, w, s);
  EXPECT_DOUBLE_EQ(parts.r, 1.0);
  EXPECT_DOUBLE_EQ(parts.g, 4.0);
  EXPECT_DOUBLE_EQ(parts.b, 9.0);
  EXPECT_DOUBLE_EQ(parts.total, 2.0 * 1 + 1.5 * 4 + 1.5 * 9);
  // d/d eps_pred of w_c * mean_c (d^2) = 2 w_c d / 4.
  for (int k = 0; k < 3; ++k)
    EXPECT_DOUBLE_EQ(net.grad_seen[static_cast<std::size_t>(k) * 4], 2.0 * (k == 0 ? 2.0 : 1.5) * (k + 1.0) / 4.0);
}

TEST(TrainingLoss, SingleChannelBatchesAreAccepted) {
  const auto s = make_schedule(10);
  TrainBatch<double> batch{TensorD({1, 2, 2, 2}, 0.0), TensorD({2, kSpectrumPoints}, 0.5),
                           TensorD({2, nn::kMaterialFeatures}, 0.0)};
  StepNoise<double> noise{{1, 2}, TensorD({1, 2, 2, 2}, 1.0), {0, 0}};
  FixedNet net{TensorD({1, 2, 2, 2}, 0.0), {}};
  LossWeights w;
  w.lambda_spec = 0.0;
  const auto parts = training_loss<double>(net, static_cast<nn::Surrogate<double>*>(nullptr), batch, noise, w, s);
  EXPECT_DOUBLE_EQ(parts.r, 1.0);
  EXPECT_DOUBLE_EQ(parts.g, 0.0);
  EXPECT_DOUBLE_EQ(parts.total, 2.0);
}

TEST(TrainingLoss, NonFiniteLossIsReportedBeforeBackward) {
  const auto s = make_schedule(10);
  TrainBatch<double> batch{TensorD({3, 1, 2, 2}, 0.0), TensorD({1, kSpectrumPoints}, 0.5),
                           TensorD({1, nn::kMaterialFeatures}, 0.0)};
  StepNoise<double> noise{{4}, TensorD({3, 1, 2, 2}, 0.0), {0}};
  FixedNet net{TensorD({3, 1, 2, 2}, 0.0), {}};
  net.eps[5] = std::numeric_limits<double>::quiet_NaN();
  LossWeights w;
  w.lambda_spec = 0.0;
  EXPECT_THROW(training_loss<double>(net, static_cast<nn::Surrogate<double>*>(nullptr), batch, noise, w, s),
               NonFiniteError);
  EXPECT_EQ(net.grad_seen.numel(), 0u);
}

TEST(TrainingLoss, SpectralTermNeedsFrozenSurrogate) {
  const auto s = make_schedule(10);
  nn::InitRng rng(9);
  nn::Surrogate<double> sur(nn::SurrogateConfig::toy(), rng);
  auto batch = random_batch(1, 8, rng);
  StepNoise<double> noise{{2}, TensorD({3, 1, 8, 8}, 0.0), {0}};
  FixedNet net{TensorD({3, 1, 8, 8}, 0.0), {}};
  LossWeights w;
  EXPECT_THROW(training_loss(net, static_cast<nn::Surrogate<double>*>(nullptr), batch, noise, w, s),
               std::invalid_argument);
  EXPECT_THROW(training_loss(net, &sur, batch, noise, w, s), std::logic_error);
  sur.set_frozen(true);
  const auto parts = training_loss(net, &sur, batch, noise, w, s);
  // With eps = 0 and eps_pred = 0, x0_hat is x0 itself: L_spec is the surrogate error on x0.
  TensorD img = batch.x0;
  for (auto& v : img.values()) v = 0.5 * (v + 1.0);
  const auto pred = sur.forward(img, batch.materials);
  double sse = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) sse += (pred[i] - batch.spectra[i]) * (pred[i] - batch.spectra[i]);
  EXPECT_NEAR(parts.spec, sse / kSpectrumPoints, 1e-12);
  EXPECT_NEAR(parts.total, 5.0 * sse / kSpectrumPoints, 1e-12);
  w.spectral_reduction = SpectralReduction::sum;
  const auto summed = training_loss(net, &sur, batch, noise, w, s);
  EXPECT_NEAR(summed.spec, sse, 1e-12);
  EXPECT_NEAR(summed.total, 5.0 * sse, 1e-12);
  for (auto* p : sur.parameters())
    for (double g : p->grad.values()) ASSERT_EQ(g, 0.0);
}

TEST(TrainingLoss, GradientCheckThroughSurrogate) {
  const auto s = make_schedule(10);
  nn::InitRng rng(10);
  nn::Denoiser<double> net(nn::DenoiserConfig::toy(), rng);
  nn::Surrogate<double> sur(nn::SurrogateConfig::toy(), rng);
  const auto params = net.parameters();
  std::uniform_real_distribution<double> d(-0.2, 0.2);
  for (auto* p : params)
    for (auto& v : p->value.values()) v += d(rng);
  for (auto* p : sur.parameters())
    for (auto& v : p->value.values()) v += 2 * d(rng);
  sur.set_frozen(true);
  const auto batch = random_batch(2, 8, rng);
  // Small timesteps keep the one-step estimate away from the clamp boundaries.
  StepNoise<double> noise{{1, 2}, random_tensor({3, 2, 8, 8}, rng, 0.3), {0, 1}};
  LossWeights w;
  w.lambda_spec = 2.0;
  for (auto reduction : {SpectralReduction::mean, SpectralReduction::sum}) {
    w.spectral_reduction = reduction;
    for (auto* p : params) p->grad.zero();
    training_loss(net, &sur, batch, noise, w, s);
    std::vector<nn::GradTarget> targets;
    nn::add_parameter_targets(targets, params);
    const auto report = nn::gradient_check(
        "training_loss", targets, [&] { return training_loss(net, &sur, batch, noise, w, s, false).total; }, 1e-6, 6);
    EXPECT_TRUE(report.passed(1e-4)) << to_string(reduction) << ": " << report.summary();
    EXPECT_GT(report.max_rel_error(), 0.0);
  }
}

TEST(TrainingLoss, DropoutFrequencyMatchesProbability) {
  const auto s = make_schedule(10);
  std::mt19937_64 rng(11);
  std::size_t nulls = 0, total = 0;
  std::vector<std::size_t> t_hist(11, 0);
  for (int rep = 0; rep < 2000; ++rep) {
    const auto noise = draw_step_noise<float>({3, 50, 1, 1}, s, 0.1, rng);
    for (auto m : noise.null_mask) nulls += m;
    for (int t : noise.t) ++t_hist[static_cast<std::size_t>(t)];
    total += noise.null_mask.size();
  }
  const double p = static_cast<double>(nulls) / total;
  EXPECT_NEAR(p, 0.1, 3 * std::sqrt(0.09 / total));
  EXPECT_EQ(t_hist[0], 0u);
  for (int t = 1; t <= 10; ++t) EXPECT_NEAR(t_hist[t] / static_cast<double>(total), 0.1, 0.01) << t;
}

TEST(TrainingLoss, NullMaskReachesDenoiser) {
  const auto s = make_schedule(10);
  TrainBatch<double> batch{TensorD({3, 2, 2, 2}, 0.0), TensorD({2, kSpectrumPoints}, 0.5),
                           TensorD({2, nn::kMaterialFeatures}, 0.0)};
  StepNoise<double> noise{{1, 2}, TensorD({3, 2, 2, 2}, 0.0), {1, 0}};
  FixedNet net{TensorD({3, 2, 2, 2}, 0.0), {}};
  LossWeights w;
  w.lambda_spec = 0.0;
  training_loss<double>(net, static_cast<nn::Surrogate<double>*>(nullptr), batch, noise, w, s);
  EXPECT_EQ(net.last_null, (std::vector<std::uint8_t>{1, 0}));
}

TEST(TrainingLoss, ShortTrainingReducesLoss) {
  const auto s = make_schedule(50);
  nn::InitRng rng(12);
  nn::Denoiser<float> net(nn::DenoiserConfig::toy(), rng);
  nn::Adam<float> opt(net.parameters());
  TrainBatch<float> batch{Tensor<float>({3, 4, 8, 8}), Tensor<float>({4, kSpectrumPoints}, 0.5f),
                          Tensor<float>({4, nn::kMaterialFeatures}, 0.0f)};
  // Structured targets: a centred square in R, constant G/B.
  for (int i = 0; i < 4; ++i)
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        const std::size_t p = (static_cast<std::size_t>(i) * 8 + r) * 8 + c;
        batch.x0[p] = (r >= 2 && r < 6 && c >= 2 && c < 6) ? 1.0f : -1.0f;
        batch.x0[4 * 64 + p] = -0.5f;
        batch.x0[8 * 64 + p] = 0.25f;
      }
  LossWeights w;
  w.lambda_spec = 0.0;
  std::mt19937_64 gen(13);
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    const auto noise = draw_step_noise<float>(batch.x0.shape(), s, w.cfg_dropout, gen);
    opt.zero_grad();
    const double l = training_loss(net, static_cast<nn::Surrogate<float>*>(nullptr), batch, noise, w, s).total;
    opt.step(2e-3);
    if (step < 20) first += l / 20;
    if (step >= 180) last += l / 20;
  }
  EXPECT_LT(last, 0.7 * first) << "first " << first << " last " << last;
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Sampling, RowsDependOnlyOnSeedAndCondition) {
  const auto s = make_schedule(6);
  nn::InitRng rng(14);
  nn::Denoiser<double> net(nn::DenoiserConfig::toy(), rng);
  std::uniform_real_distribution<double> d(-0.1, 0.1);
  for (auto* p : net.parameters())
    for (auto& v : p->value.values()) v += d(rng);
  TensorD spectra({2, kSpectrumPoints}, 0.3), mats({2, nn::kMaterialFeatures}, 0.0);
  for (int p = 0; p < kSpectrumPoints; ++p) spectra[kSpectrumPoints + p] = 0.9;
  const std::vector<std::uint64_t> seeds{5, 7};
  const auto both = sample_images(net, spectra, mats, s, 5.0, seeds);
  ASSERT_EQ(both.shape(), (std::vector<int>{3, 2, 8, 8}));
  for (double v : both.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  TensorD one_s({1, kSpectrumPoints}, 0.9), one_m({1, nn::kMaterialFeatures}, 0.0);
  const auto alone = sample_design(net, one_s, one_m, s, 5.0, 7);
  const auto from_batch = to_encoded_image(both, 1);
  for (std::size_t i = 0; i < alone.data.size(); ++i) EXPECT_NEAR(alone.data[i], from_batch.data[i], 1e-6);
  const auto again = sample_images(net, spectra, mats, s, 5.0, seeds);
  EXPECT_EQ(again.values().size(), both.values().size());
  for (std::size_t i = 0; i < both.numel(); ++i) EXPECT_EQ(again[i], both[i]);
}

TEST(Sampling, NonFiniteStateIsReportedWithStep) {
  const auto s = make_schedule(4);
  nn::InitRng rng(15);
  nn::Denoiser<double> net(nn::DenoiserConfig::toy(), rng);
  net.parameters().back()->value[0] = std::numeric_limits<double>::quiet_NaN();
  TensorD spectra({1, kSpectrumPoints}, 0.3), mats({1, nn::kMaterialFeatures}, 0.0);
  const std::vector<std::uint64_t> seeds{1};
  try {
    sample_images(net, spectra, mats, s, 5.0, seeds);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("t=4"), std::string::npos) << e.what();
  }
}

TEST(Sampling, ImageBatchRoundTrip) {
  EncodedImage a(4, 4), b(4, 4);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = static_cast<float>(i % 5) / 4.0f;
    b.data[i] = 1.0f - a.data[i];
  }
  const auto batch = images_to_batch<float>({&a, &b});
  EXPECT_EQ(batch.shape(), (std::vector<int>{3, 2, 4, 4}));
  Tensor<float> unit = batch;
  for (auto& v : unit.values()) v = 0.5f * (v + 1.0f);
  const auto a2 = to_encoded_image(unit, 0), b2 = to_encoded_image(unit, 1);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_FLOAT_EQ(a2.data[i], a.data[i]);
    EXPECT_FLOAT_EQ(b2.data[i], b.data[i]);
  }
}
