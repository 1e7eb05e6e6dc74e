#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "metadiff/nn/checkpoint.hpp"
#include "metadiff/nn/denoiser.hpp"
#include "metadiff/nn/gradcheck.hpp"
#include "metadiff/nn/optim.hpp"
#include "metadiff/nn/surrogate.hpp"

using namespace metadiff::nn;
using TensorD = Tensor<double>;

namespace {

constexpr double kTol = 1e-4;

TensorD random_tensor(std::vector<int> shape, InitRng& rng, double bound = 1.0) {
  TensorD t(std::move(shape));
  init_uniform(t, bound, rng);
  return t;
}

// Zero-initialized layers make most upstream gradients vanish; perturb every
// parameter so the check exercises every path.
void randomize(const ParameterList<double>& params, InitRng& rng, double bound = 0.4) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto* p : params)
    for (auto& v : p->value.values()) v += d(rng);
}

void zero_grads(const ParameterList<double>& params) {
  for (auto* p : params) p->grad.zero();
}

ConditionBatch<double> random_condition(int n, InitRng& rng, std::vector<std::uint8_t> is_null) {
  ConditionBatch<double> c;
  c.spectra = random_tensor({n, kSpectrumLength}, rng);
  for (auto& v : c.spectra.values()) v = 0.5 + 0.5 * v;
  c.materials = random_tensor({n, kMaterialFeatures}, rng);
  c.is_null = std::move(is_null);
  return c;
}

void expect_pass(const GradReport& r, double tol = kTol) {
  EXPECT_TRUE(r.passed(tol)) << r.summary();
  for (const auto& e : r.entries) EXPECT_GT(e.checked, 0u) << e.name;
}

}  // namespace

// ---------------------------------------------------------------------------
// FiLM

TEST(Film, IdentityModulation) {
  InitRng rng(1);
  const TensorD f = random_tensor({3, 2, 4, 4}, rng);
  const TensorD out = film_modulate(f, TensorD({2, 3}, 1.0), TensorD({2, 3}, 0.0));
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(out[i], f[i]);
}

TEST(Film, ZeroGammaGivesBeta) {
  InitRng rng(2);
  const TensorD f = random_tensor({2, 1, 3, 3}, rng);
  TensorD beta({1, 2});
  beta[0] = 0.25;
  beta[1] = -1.5;
  const TensorD out = film_modulate(f, TensorD({1, 2}, 0.0), beta);
  for (int p = 0; p < 9; ++p) {
    EXPECT_EQ(out[static_cast<std::size_t>(p)], 0.25);
    EXPECT_EQ(out[static_cast<std::size_t>(9 + p)], -1.5);
  }
}

TEST(Film, HandComputedTwoChannels) {
  TensorD f({2, 1, 2, 2});
  const double vals[] = {1, 2, 3, 4, -1, 0, 0.5, 2};
  for (int i = 0; i < 8; ++i) f[static_cast<std::size_t>(i)] = vals[i];
  TensorD gamma({1, 2}), beta({1, 2});
  gamma[0] = 2;
  gamma[1] = -1;
  beta[0] = 0.5;
  beta[1] = 0;
  const TensorD out = film_modulate(f, gamma, beta);
  const double expect[] = {2.5, 4.5, 6.5, 8.5, 1, 0, -0.5, -2};
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(out[static_cast<std::size_t>(i)], expect[i]);
}

TEST(Film, ChannelMismatchThrows) {
  EXPECT_THROW(film_modulate(TensorD({3, 1, 2, 2}), TensorD({1, 2}), TensorD({1, 2})), std::invalid_argument);
}

TEST(Film, LinearInFeaturesWhenBetaZero) {
  InitRng rng(3);
  const TensorD f1 = random_tensor({4, 2, 3, 3}, rng), f2 = random_tensor({4, 2, 3, 3}, rng);
  const TensorD gamma = random_tensor({2, 4}, rng), zero({2, 4});
  const double a = 0.7, b = -1.3;
  TensorD mix(f1.shape());
  for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * f1[i] + b * f2[i];
  const TensorD lhs = film_modulate(mix, gamma, zero);
  const TensorD o1 = film_modulate(f1, gamma, zero), o2 = film_modulate(f2, gamma, zero);
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], a * o1[i] + b * o2[i], 1e-12);
}

TEST(Film, GradientCheck) {
  InitRng rng(4);
  TensorD f = random_tensor({3, 2, 3, 3}, rng), gamma = random_tensor({2, 3}, rng), beta = random_tensor({2, 3}, rng);
  const TensorD r = probe_weights(f.shape(), rng);
  // d/dy of sum(r*y) is r.
  const FilmGrads<double> g = film_modulate_backward(r, f, gamma);
  const auto report = gradient_check(
      "film_modulate", {{"features", &f, &g.features}, {"gamma", &gamma, &g.gamma}, {"beta", &beta, &g.beta}},
      [&] { return probe_loss(film_modulate(f, gamma, beta), r); });
  EXPECT_LT(report.max_rel_error(), 1e-6) << report.summary();
}

TEST(Film, GeneratorStartsAsIdentity) {
  InitRng rng(5);
  FilmGenerator<double> gen("film", 6, 4, rng);
  const auto [gamma, beta] = gen.forward(random_tensor({3, 6}, rng));
  for (auto v : gamma.values()) EXPECT_EQ(v, 1.0);
  for (auto v : beta.values()) EXPECT_EQ(v, 0.0);
}

TEST(Film, GeneratorGradientCheck) {
  InitRng rng(6);
  FilmGenerator<double> gen("film", 5, 3, rng);
  auto params = ParameterList<double>{};
  gen.collect(params);
  randomize(params, rng);
  TensorD cond = random_tensor({2, 5}, rng);
  const TensorD rg = probe_weights({2, 3}, rng), rb = probe_weights({2, 3}, rng);
  auto loss = [&] {
    const auto [g, b] = gen.forward(cond);
    return probe_loss(g, rg) + probe_loss(b, rb);
  };
  loss();
  const TensorD gc = gen.backward(rg, rb);
  std::vector<GradTarget> targets{{"cond", &cond, &gc}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("film_generator", targets, loss));
}

// ---------------------------------------------------------------------------
// Layers

TEST(Layers, LinearGradientCheck) {
  InitRng rng(7);
  Linear<double> lin("lin", 4, 3, rng);
  ParameterList<double> params;
  lin.collect(params);
  TensorD x = random_tensor({5, 4}, rng);
  const TensorD r = probe_weights({5, 3}, rng);
  lin.forward(x);
  const TensorD gx = lin.backward(r);
  std::vector<GradTarget> targets{{"x", &x, &gx}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("linear", targets, [&] { return probe_loss(lin.forward(x), r); }));
}

class ConvGradient : public ::testing::TestWithParam<int> {};

TEST_P(ConvGradient, MatchesFiniteDifferences) {
  InitRng rng(8);
  const int k = GetParam();
  Conv2d<double> conv("conv", 3, 4, k, rng);
  ParameterList<double> params;
  conv.collect(params);
  TensorD x = random_tensor({3, 2, 5, 5}, rng);
  const TensorD r = probe_weights({4, 2, 5, 5}, rng);
  conv.forward(x);
  const TensorD gx = conv.backward(r);
  std::vector<GradTarget> targets{{"x", &x, &gx}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("conv" + std::to_string(k), targets, [&] { return probe_loss(conv.forward(x), r); }));
}

INSTANTIATE_TEST_SUITE_P(Kernels, ConvGradient, ::testing::Values(1, 3));

TEST(Layers, Conv3x3MatchesDirectSum) {
  InitRng rng(9);
  Conv2d<double> conv("conv", 2, 3, 3, rng);
  const TensorD x = random_tensor({2, 2, 4, 5}, rng);
  const TensorD y = conv.forward(x);
  const auto& w = conv.weight.value;
  for (int o = 0; o < 3; ++o)
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
          double s = conv.bias.value[static_cast<std::size_t>(o)];
          for (int c = 0; c < 2; ++c)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int yy = i + dy, xx = j + dx;
                if (yy < 0 || yy >= 4 || xx < 0 || xx >= 5) continue;
                s += w[static_cast<std::size_t>(((o * 2 + c) * 3 + dy + 1) * 3 + dx + 1)] *
                     x[static_cast<std::size_t>(((c * 2 + n) * 4 + yy) * 5 + xx)];
              }
          EXPECT_NEAR(y[static_cast<std::size_t>(((o * 2 + n) * 4 + i) * 5 + j)], s, 1e-12);
        }
}

TEST(Layers, GroupNormGradientCheck) {
  InitRng rng(10);
  GroupNorm<double> gn("gn", 4, 2);
  ParameterList<double> params;
  gn.collect(params);
  randomize(params, rng);
  TensorD x = random_tensor({4, 3, 3, 3}, rng, 2.0);
  const TensorD r = probe_weights(x.shape(), rng);
  gn.forward(x);
  const TensorD gx = gn.backward(r);
  std::vector<GradTarget> targets{{"x", &x, &gx}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("group_norm", targets, [&] { return probe_loss(gn.forward(x), r); }));
}

TEST(Layers, ActivationsGradientCheck) {
  InitRng rng(11);
  TensorD x = random_tensor({4, 7}, rng, 3.0);
  const TensorD r = probe_weights(x.shape(), rng);
  SiLU<double> silu;
  Sigmoid<double> sig;
  silu.forward(x);
  sig.forward(x);
  const TensorD gs = silu.backward(r), gg = sig.backward(r);
  expect_pass(gradient_check("silu", {{"x", &x, &gs}}, [&] { return probe_loss(silu.forward(x), r); }));
  expect_pass(gradient_check("sigmoid", {{"x", &x, &gg}}, [&] { return probe_loss(sig.forward(x), r); }));
}

TEST(Layers, ParameterFreePathsAreExact) {
  // Pooling and upsampling are linear, so central differences are exact up to rounding.
  InitRng rng(12);
  TensorD x = random_tensor({2, 2, 4, 4}, rng);
  const TensorD rp = probe_weights({2, 2, 2, 2}, rng), ru = probe_weights({2, 2, 8, 8}, rng);
  const TensorD gp = avg_pool2_backward(rp), gu = upsample2_backward(ru);
  const auto pool = gradient_check("avg_pool2", {{"x", &x, &gp}}, [&] { return probe_loss(avg_pool2(x), rp); });
  const auto up = gradient_check("upsample2", {{"x", &x, &gu}}, [&] { return probe_loss(upsample2(x), ru); });
  EXPECT_LT(pool.max_rel_error(), 1e-8) << pool.summary();
  EXPECT_LT(up.max_rel_error(), 1e-8) << up.summary();
}

// ---------------------------------------------------------------------------
// Composite blocks

class ResBlockGradient : public ::testing::TestWithParam<std::pair<int, int>> {};

TEST_P(ResBlockGradient, MatchesFiniteDifferences) {
  InitRng rng(13);
  const auto [in, out] = GetParam();
  FilmResBlock<double> blk("blk", in, out, 5, 2, rng);
  ParameterList<double> params;
  blk.collect(params);
  randomize(params, rng);
  TensorD x = random_tensor({in, 2, 4, 4}, rng), cond = random_tensor({2, 5}, rng);
  const TensorD r = probe_weights({out, 2, 4, 4}, rng);
  blk.forward(x, cond);
  const auto [gx, gc] = blk.backward(r);
  std::vector<GradTarget> targets{{"x", &x, &gx}, {"cond", &cond, &gc}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("film_resblock", targets, [&] { return probe_loss(blk.forward(x, cond), r); }));
}

INSTANTIATE_TEST_SUITE_P(Widths, ResBlockGradient, ::testing::Values(std::pair{4, 4}, std::pair{2, 4}));

TEST(UNet, GradientCheckToy) {
  InitRng rng(14);
  UNetConfig cfg;
  cfg.in_channels = 3;
  cfg.base_channels = 2;
  cfg.channel_mult = {1, 2};
  cfg.blocks_per_level = 2;
  cfg.groups = 1;  // one channel per group would make conv biases feeding a norm exactly gradient-free
  cfg.cond_dim = 3;
  cfg.image_size = 4;
  UNet<double> net(cfg, rng);
  ParameterList<double> params;
  net.collect(params);
  randomize(params, rng);
  TensorD x = random_tensor({3, 2, 4, 4}, rng), cond = random_tensor({2, 3}, rng);
  const TensorD r = probe_weights({3, 2, 4, 4}, rng);
  net.forward(x, cond);
  const auto [gx, gc] = net.backward(r);
  std::vector<GradTarget> targets{{"x", &x, &gx}, {"cond", &cond, &gc}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("unet", targets, [&] { return probe_loss(net.forward(x, cond), r); }));
}

TEST(Embedder, ShapeAndNullDeterminism) {
  InitRng rng(15);
  ConditionEmbedder<double> emb(EmbedderConfig{}, rng);
  EXPECT_EQ(emb.output_dim(), 128);
  const auto cond = random_condition(3, rng, {0, 1, 1});
  const TensorD c = emb.forward(cond);
  ASSERT_EQ(c.shape(), (std::vector<int>{3, 128}));
  for (int j = 0; j < 128; ++j) {
    EXPECT_EQ(c[static_cast<std::size_t>(128 + j)], c[static_cast<std::size_t>(256 + j)]);
    EXPECT_EQ(c[static_cast<std::size_t>(128 + j)], emb.null_embedding().value[static_cast<std::size_t>(j)]);
  }
}

TEST(Embedder, MaterialChangesEmbedding) {
  InitRng rng(16);
  ConditionEmbedder<double> emb(EmbedderConfig{}, rng);
  auto a = random_condition(1, rng, {0});
  auto b = a;
  standardize_material(3.48, 0.0037, 1.524, a.materials.data());
  standardize_material(6.4, 0.0038, 1.524, b.materials.data());
  const TensorD ca = emb.forward(a), cb = emb.forward(b);
  for (int j = 0; j < 96; ++j) EXPECT_EQ(ca[static_cast<std::size_t>(j)], cb[static_cast<std::size_t>(j)]);
  double diff = 0;
  for (int j = 96; j < 128; ++j) diff += std::abs(ca[static_cast<std::size_t>(j)] - cb[static_cast<std::size_t>(j)]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Embedder, WrongSpectrumLengthThrows) {
  InitRng rng(17);
  ConditionEmbedder<double> emb(EmbedderConfig{}, rng);
  ConditionBatch<double> c{TensorD({1, 200}), TensorD({1, 3}), {0}};
  EXPECT_THROW(emb.forward(c), std::invalid_argument);
}

TEST(Embedder, GradientCheck) {
  InitRng rng(18);
  ConditionEmbedder<double> emb(EmbedderConfig{5, 3}, rng);
  ParameterList<double> params;
  emb.collect(params);
  const auto cond = random_condition(3, rng, {0, 1, 0});
  const TensorD r = probe_weights({3, 8}, rng);
  emb.forward(cond);
  emb.backward(r, cond);
  std::vector<GradTarget> targets;
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("embedder", targets, [&] { return probe_loss(emb.forward(cond), r); }));
}

// ---------------------------------------------------------------------------
// Denoiser and surrogate

class DenoiserGradient : public ::testing::TestWithParam<Conditioning> {};

TEST_P(DenoiserGradient, ToyConfigMatchesFiniteDifferences) {
  InitRng rng(19);
  auto cfg = DenoiserConfig::toy();
  cfg.conditioning = GetParam();
  Denoiser<double> net(cfg, rng);
  const auto params = net.parameters();
  randomize(params, rng, 0.2);
  TensorD x = random_tensor({3, 2, 8, 8}, rng);
  const std::vector<int> t{3, 150};
  const auto cond = random_condition(2, rng, {0, 1});
  const TensorD r = probe_weights(x.shape(), rng);
  net.forward(x, t, cond);
  const TensorD gx = net.backward(r);
  std::vector<GradTarget> targets{{"x_t", &x, &gx}};
  add_parameter_targets(targets, params);
  const auto report = gradient_check("denoiser", targets, [&] { return probe_loss(net.forward(x, t, cond), r); });
  expect_pass(report);
}

INSTANTIATE_TEST_SUITE_P(Modes, DenoiserGradient, ::testing::Values(Conditioning::film, Conditioning::input_concat),
                         [](const auto& info) { return to_string(info.param); });

TEST(Denoiser, ShapeDeterminismAndSize) {
  InitRng rng(20);
  Denoiser<float> net(DenoiserConfig{}, rng);
  std::size_t count = 0;
  for (auto* p : net.parameters()) count += p->value.numel();
  EXPECT_LT(count, 5'000'000u);
  InitRng data(21);
  Tensor<float> x({3, 2, 32, 32});
  init_uniform(x, 1.0, data);
  ConditionBatch<float> cond{Tensor<float>({2, kSpectrumLength}, 0.5f), Tensor<float>({2, 3}, 0.3f), {0, 1}};
  const std::vector<int> t{1, 200};
  const auto a = net.forward(x, t, cond);
  const auto b = net.forward(x, t, cond);
  EXPECT_EQ(a.shape(), x.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Denoiser, RejectsBadInputs) {
  InitRng rng(22);
  Denoiser<double> net(DenoiserConfig::toy(), rng);
  const auto cond = random_condition(1, rng, {0});
  const std::vector<int> t0{0}, t1{1};
  EXPECT_THROW(net.forward(TensorD({3, 1, 8, 8}), t0, cond), std::invalid_argument);
  EXPECT_THROW(net.forward(TensorD({3, 1, 4, 4}), t1, cond), std::invalid_argument);
}

TEST(Surrogate, GradientCheckToy) {
  InitRng rng(23);
  Surrogate<double> s(SurrogateConfig::toy(), rng);
  const auto params = s.parameters();
  randomize(params, rng);
  TensorD img = random_tensor({3, 2, 8, 8}, rng), mat = random_tensor({2, 3}, rng);
  const TensorD r = probe_weights({2, kSpectrumLength}, rng);
  s.forward(img, mat);
  const TensorD gi = s.backward(r);
  std::vector<GradTarget> targets{{"image", &img, &gi}};
  add_parameter_targets(targets, params);
  expect_pass(gradient_check("surrogate", targets, [&] { return probe_loss(s.forward(img, mat), r); }));
}

TEST(Surrogate, FrozenAccumulatesNoParameterGradient) {
  InitRng rng(24);
  Surrogate<double> s(SurrogateConfig::toy(), rng);
  s.set_frozen(true);
  const TensorD img = random_tensor({3, 1, 8, 8}, rng), mat = random_tensor({1, 3}, rng);
  s.forward(img, mat);
  const TensorD gi = s.backward(TensorD({1, kSpectrumLength}, 1.0));
  double gnorm = 0;
  for (auto v : gi.values()) gnorm += std::abs(v);
  EXPECT_GT(gnorm, 0.0);
  for (auto* p : s.parameters())
    for (auto v : p->grad.values()) ASSERT_EQ(v, 0.0) << p->name;
}

TEST(Surrogate, OutputRangeAndDeterminism) {
  InitRng rng(25);
  Surrogate<float> s(SurrogateConfig{}, rng);
  Tensor<float> img({3, 2, 32, 32}), mat({2, 3}, 0.4f);
  init_uniform(img, 1.0, rng);
  const auto a = s.forward(img, mat), b = s.forward(img, mat);
  ASSERT_EQ(a.shape(), (std::vector<int>{2, kSpectrumLength}));
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_GE(a[i], 0.0f);
    EXPECT_LE(a[i], 1.0f);
    EXPECT_EQ(a[i], b[i]);
  }
}

// ---------------------------------------------------------------------------
// Optimizer, schedule, checkpoints

TEST(LearningRate, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(lr_at(0, 60), 1e-4);
  EXPECT_NEAR(lr_at(60, 60), 0.0, 1e-20);
  EXPECT_NEAR(lr_at(30, 60), 5e-5, 1e-18);
  EXPECT_THROW(lr_at(61, 60), std::invalid_argument);
  EXPECT_THROW(lr_at(-1, 60), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("p", {2});
  p.value[0] = 1.0;
  p.value[1] = -2.0;
  p.grad[0] = 0.3;
  p.grad[1] = -7.0;
  Adam<double> opt({&p});
  opt.step(0.01);
  // Bias-corrected first step is lr * g / (|g| + eps').
  EXPECT_NEAR(p.value[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.value[1], -2.0 + 0.01, 1e-9);
}

TEST(Checkpoint, RoundTripAndShapeValidation) {
  InitRng rng(26);
  Surrogate<float> a(SurrogateConfig::toy(), rng), b(SurrogateConfig::toy(), rng);
  const auto path = std::filesystem::temp_directory_path() / "metadiff_ckpt_test.bin";
  write_checkpoint(path, "test/1", {{"epoch", 3}}, snapshot(a.parameters()));
  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.schema, "test/1");
  EXPECT_EQ(ck.metadata.at("epoch"), 3);
  require_exact_table(ck, b.parameters());
  restore(ck, b.parameters());
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k]->value.numel(); ++i) ASSERT_EQ(pa[k]->value[i], pb[k]->value[i]);

  auto bigger = SurrogateConfig::toy();
  bigger.hidden = 6;
  Surrogate<float> c(bigger, rng);
  EXPECT_THROW(restore(ck, c.parameters()), std::runtime_error);
  std::filesystem::remove(path);
}
