#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "../support/printers.hpp"
#include "cfmplan/diffcore.hpp"
#include "../support/fd_oracle.hpp"

using namespace cfmplan;
using namespace cfmplan::diff;

namespace {

AttentionParams identity_attention(Tape& t, std::size_t d, double out_scale) {
  Tensor2 eye(d, d);
  for (std::size_t i = 0; i < d; ++i) eye(i, i) = 1.0;
  Tensor2 wo = eye;
  for (double& v : wo.data) v *= out_scale;
  return {t.constant(eye), t.constant(eye), t.constant(eye), t.constant(wo)};
}

}  // namespace

TEST(Dense, ZeroInputPassesBias) {
  const Tensor2 w(2, 2, {0.3, -1.2, 4.0, 0.7});
  const auto y = dense_forward(Tensor2(1, 2, {0.0, 0.0}), w, Tensor2(1, 2, {1.0, -1.0}), Activation::identity);
  EXPECT_EQ(y, Tensor2(1, 2, {1.0, -1.0}));
}

TEST(Dense, IdentityWeights) {
  const auto y = dense_forward(Tensor2(1, 2, {3.0, 4.0}), Tensor2(2, 2, {1, 0, 0, 1}), Tensor2(1, 2),
                               Activation::identity);
  EXPECT_EQ(y, Tensor2(1, 2, {3.0, 4.0}));
}

TEST(Dense, DiagonalScaling) {
  const auto y = dense_forward(Tensor2(1, 2, {1.0, 1.0}), Tensor2(2, 2, {2, 0, 0, 3}), Tensor2(1, 2),
                               Activation::identity);
  EXPECT_EQ(y, Tensor2(1, 2, {2.0, 3.0}));
}

TEST(Dense, ShapeMismatchNamesBothShapes) {
  try {
    dense_forward(Tensor2(1, 3), Tensor2(2, 2), Tensor2(1, 2), Activation::identity);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1x3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(2x2)"), std::string::npos) << msg;
  }
}

TEST(Dense, GeluMatchesErfForm) {
  const auto y = dense_forward(Tensor2(1, 1, {0.7}), Tensor2(1, 1, {1.0}), Tensor2(1, 1), Activation::gelu);
  EXPECT_NEAR(y.data[0], 0.5 * 0.7 * (1.0 + std::erf(0.7 / std::sqrt(2.0))), 1e-15);
}

TEST(Attention, SingletonKeyWeightIsOne) {
  Tape t(GradMode::none);
  Var q = t.constant(Tensor2(1, 2, {0.4, -0.3}));
  auto r = cross_attention(t, q, t.constant(Tensor2(1, 2, {0.4, -0.3})), identity_attention(t, 2, 1.0));
  EXPECT_EQ(t.value(r.weights), Tensor2(1, 1, {1.0}));
}

TEST(Attention, TwoIdenticalKeysSplitEvenly) {
  Tape t(GradMode::none);
  Var q = t.constant(Tensor2(1, 2, {1.0, 2.0}));
  auto r = cross_attention(t, q, t.constant(Tensor2(2, 2, {0.5, 0.5, 0.5, 0.5})), identity_attention(t, 2, 1.0));
  EXPECT_DOUBLE_EQ(t.value(r.weights).data[0], 0.5);
  EXPECT_DOUBLE_EQ(t.value(r.weights).data[1], 0.5);
}

TEST(Attention, MatchesHandSoftmaxOracle) {
  Rng rng(11);
  const std::size_t d = 4;
  ParamStore p;
  add_attention(p, "a", d, rng);
  p.value("a.wo") = fdcheck::random_tensor(d, d, rng);
  const Tensor2 q = fdcheck::random_tensor(1, d, rng);
  const Tensor2 kv = fdcheck::random_tensor(2, d, rng);

  Tape t(GradMode::none);
  auto r = cross_attention(t, t.constant(q), t.constant(kv), attention_params(t, std::as_const(p), "a"));

  // Scalar oracle: project, score, softmax, mix, output projection, residual.
  auto proj = [&](const Tensor2& x, std::size_t row, const Tensor2& w) {
    std::vector<double> out(d, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < d; ++i) out[j] += x(row, i) * w(i, j);
    return out;
  };
  const auto qp = proj(q, 0, p.value("a.wq"));
  double s[2];
  std::vector<double> vals[2];
  for (std::size_t k = 0; k < 2; ++k) {
    const auto kp = proj(kv, k, p.value("a.wk"));
    vals[k] = proj(kv, k, p.value("a.wv"));
    s[k] = 0.0;
    for (std::size_t i = 0; i < d; ++i) s[k] += qp[i] * kp[i];
    s[k] /= std::sqrt(static_cast<double>(d));
  }
  const double m = std::max(s[0], s[1]);
  const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
  const double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
  EXPECT_NEAR(t.value(r.weights).data[0], w0, 1e-9);
  EXPECT_NEAR(t.value(r.weights).data[1], w1, 1e-9);
  for (std::size_t j = 0; j < d; ++j) {
    double o = q(0, j);
    for (std::size_t i = 0; i < d; ++i) o += (w0 * vals[0][i] + w1 * vals[1][i]) * p.value("a.wo")(i, j);
    EXPECT_NEAR(t.value(r.out).data[j], o, 1e-9);
  }
}

TEST(Attention, WeightRowsAreProbabilityVectors) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore p;
    add_attention(p, "a", 6, rng);
    Tape t(GradMode::none);
    auto r = cross_attention(t, t.constant(fdcheck::random_tensor(3, 6, rng, 3.0)),
                             t.constant(fdcheck::random_tensor(5, 6, rng, 3.0)), attention_params(t, std::as_const(p), "a"));
    const Tensor2& w = t.value(r.weights);
    for (std::size_t row = 0; row < w.rows; ++row) {
      double sum = 0.0;
      for (double v : w.row(row)) {
        EXPECT_GE(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Attention, ZeroOutputProjectionIsExactResidual) {
  Rng rng(2);
  ParamStore p;
  add_attention(p, "a", 4, rng);
  const Tensor2 q = fdcheck::random_tensor(2, 4, rng);
  Tape t(GradMode::none);
  auto r = cross_attention(t, t.constant(q), t.constant(fdcheck::random_tensor(3, 4, rng)),
                           attention_params(t, std::as_const(p), "a"));
  EXPECT_EQ(t.value(r.out), q);
}

TEST(Attention, EmptyKeySetRejected) {
  Tape t(GradMode::none);
  EXPECT_THROW(cross_attention(t, t.constant(Tensor2(1, 2)), t.constant(Tensor2(0, 2)), identity_attention(t, 2, 1.0)),
               DimensionError);
}

TEST(TimeEmbedding, ZeroTime) {
  const auto e = sinusoidal_embed(0.0, {8, 1000.0});
  ASSERT_EQ(e.size(), 8u);
  for (std::size_t i = 0; i < 8; i += 2) {
    EXPECT_EQ(e[i], 0.0);
    EXPECT_EQ(e[i + 1], 1.0);
  }
}

TEST(TimeEmbedding, DeterministicAndBounded) {
  const auto a = sinusoidal_embed(0.37, {16, 1000.0});
  EXPECT_EQ(a, sinusoidal_embed(0.37, {16, 1000.0}));
  for (double v : a) EXPECT_LE(std::abs(v), 1.0);
}

TEST(TimeEmbedding, UnitFrequencyAtPi) {
  const auto e = sinusoidal_embed(std::numbers::pi, {8, 1000.0});
  EXPECT_LT(std::abs(e[0]), 1e-12);
}

TEST(TimeEmbedding, OddDimRejected) { EXPECT_THROW(sinusoidal_embed(0.1, {7, 1000.0}), ConfigError); }

TEST(Backward, LinearMapGradientIsOuterProduct) {
  ParamStore p;
  p.add("w", Tensor2(2, 3, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}));
  const Tensor2 x(1, 2, {2.0, -3.0});
  Tape t;
  Var loss = sum(t, matmul(t, t.constant(x), t.param(p, "w")));
  t.backward(loss);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(p.grad("w")(i, j), x.data[i]);
}

TEST(Backward, UnusedBlockGradientExactlyZero) {
  ParamStore p;
  p.add("used", Tensor2(1, 1, {2.0}));
  p.add("unused", Tensor2(1, 1, {5.0}));
  Tape t;
  t.param(p, "unused");
  t.backward(sum(t, square(t, t.param(p, "used"))));
  EXPECT_EQ(p.grad("used").data[0], 4.0);
  EXPECT_EQ(p.grad("unused").data[0], 0.0);
}

TEST(Backward, BeforeForwardIsStateError) {
  Tape t;
  EXPECT_THROW(t.backward(Var{0}), StateError);
}

TEST(Backward, RepeatedBackwardRejected) {
  ParamStore p;
  p.add("w", Tensor2(1, 1, {1.0}));
  Tape t;
  Var l = sum(t, t.param(p, "w"));
  t.backward(l);
  EXPECT_THROW(t.backward(l), StateError);
}

TEST(Backward, InputGradientAvailable) {
  Tape t;
  Var x = t.input(Tensor2(1, 3, {1.0, -2.0, 0.5}));
  t.backward(sum(t, square(t, x)));
  EXPECT_EQ(t.grad(x), Tensor2(1, 3, {2.0, -4.0, 1.0}));
}

TEST(Backward, ForwardLeavesParametersUnchanged) {
  Rng rng(3);
  ParamStore p;
  add_dense(p, "l", 3, 2, rng);
  const auto before = p.value("l.w");
  Tape t;
  t.backward(sum(t, dense(t, t.constant(Tensor2(1, 3, {1, 2, 3})), dense_params(t, p, "l"), Activation::gelu)));
  EXPECT_EQ(p.value("l.w"), before);
}

class RandomNetworkFd : public ::testing::TestWithParam<int> {};

TEST_P(RandomNetworkFd, GradientsMatchCentralDifferences) {
  const auto rep = fdcheck::random_network(1000 + GetParam());
  EXPECT_GT(rep.checked, 0u);
  EXPECT_LT(rep.worst, 1e-4) << rep.where;
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomNetworkFd, ::testing::Range(0, 8));

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    Rng rng(9);
    ParamStore p;
    add_dense(p, "l", 4, 4, rng);
    add_attention(p, "a", 4, rng);
    p.value("a.wo") = fdcheck::random_tensor(4, 4, rng);
    Tape t;
    Var h = dense(t, t.constant(fdcheck::random_tensor(2, 4, rng)), dense_params(t, p, "l"), Activation::gelu);
    Var o = cross_attention(t, h, t.constant(fdcheck::random_tensor(3, 4, rng)), attention_params(t, p, "a")).out;
    t.backward(mean(t, square(t, o)));
    std::vector<double> g;
    for (auto& [_, b] : p.blocks()) g.insert(g.end(), b.grad.data.begin(), b.grad.data.end());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamStore p;
  p.add("w", Tensor2(1, 3, {1.0, -2.0, 3.0}));
  p.mark_gradients();
  adam_step(p, {0.1, 0.9, 0.999, 1e-8});
  EXPECT_EQ(p.value("w"), Tensor2(1, 3, {1.0, -2.0, 3.0}));
  EXPECT_EQ(p.step(), 1u);
}

TEST(Adam, ConstantGradientDescends) {
  ParamStore p;
  p.add("w", Tensor2(1, 1, {0.0}));
  for (int i = 0; i < 50; ++i) {
    p.grad("w").data[0] = 2.5;
    p.mark_gradients();
    adam_step(p, {0.01, 0.9, 0.999, 1e-8});
  }
  EXPECT_LT(p.value("w").data[0], -0.4);
}

TEST(Adam, FirstStepHandComputed) {
  ParamStore p;
  p.add("w", Tensor2(1, 1, {1.0}));
  p.grad("w").data[0] = 1.0;
  p.mark_gradients();
  adam_step(p, {0.1, 0.9, 0.999, 1e-8});
  // m = 0.1, v = 0.001, m_hat = v_hat = 1  ->  step = 0.1 / (1 + 1e-8)
  EXPECT_NEAR(p.value("w").data[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.grad("w").data[0], 0.0);
  EXPECT_FALSE(p.has_gradients());
}

TEST(Adam, MissingGradientsRejected) {
  ParamStore p;
  p.add("w", Tensor2(1, 1, {1.0}));
  EXPECT_THROW(adam_step(p, {}), StateError);
}

TEST(Checkpoint, WriteReadWriteIsByteIdentical) {
  Rng rng(4);
  ParamStore p;
  add_dense(p, "enc", 3, 5, rng);
  add_attention(p, "att", 4, rng);
  const auto bytes = encode_blocks(snapshot(p));
  const auto dir = std::filesystem::temp_directory_path() / "cfmplan_ckpt_test";
  std::filesystem::create_directories(dir);
  write_blocks(dir / "a.bin", snapshot(p));
  const auto back = read_blocks(dir / "a.bin");
  EXPECT_EQ(encode_blocks(back), bytes);
  ParamStore q;
  add_dense(q, "enc", 3, 5, rng);
  add_attention(q, "att", 4, rng);
  restore(q, back);
  EXPECT_EQ(snapshot(q), snapshot(p));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptContainerRejected) {
  ParamStore p;
  p.add("w", Tensor2(1, 2, {1.0, 2.0}));
  auto bytes = encode_blocks(snapshot(p));
  EXPECT_THROW(decode_blocks(bytes.substr(0, bytes.size() - 3)), ParseError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_blocks(bytes), ParseError);
}
