#include <gtest/gtest.h>

#include "../support/printers.hpp"
#include "cfmplan/sampler.hpp"
#include "cfmplan/scenario/generator.hpp"

using namespace cfmplan;
using namespace cfmplan::sampler;
using flownet::ModelConfig;
using flownet::ConditionType;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.horizon = 4;
  c.embed_dim = 8;
  c.hidden_dim = 12;
  c.init_seed = 3;
  return c;
}

VelocityModel trained_stand_in(std::uint64_t seed) {
  VelocityModel m(small_model());
  Rng rng(seed);
  for (auto& [_, b] : m.params().blocks())
    for (double& v : b.value.data) v += 0.2 * rng.normal();
  return m;
}

scenario::Scene road() {
  scenario::Scene s;
  s.lanes.push_back({{{-5.0, 0.0}, {60.0, 0.0}}, 1.75});
  s.obstacles.push_back({{9.0, 0.3}, {0.0, 0.0}, 1.0});
  s.ego.speed = 5.0;
  return s;
}

Trajectory straight(std::size_t n, double step) {
  Tensor2 w(n, 2);
  for (std::size_t i = 0; i < n; ++i) w(i, 0) = step * static_cast<double>(i + 1);
  return Trajectory(w, 0.5);
}

ConstraintAnchor anchor_of(const Trajectory& t, const scenario::Scene& s) {
  ConstraintAnchor a;
  a.trajectory = t;
  a.score = scenario::constraint_eval(t, s);
  return a;
}

// Quartic double well in every coordinate.
RefinementField double_well() {
  return {[](const Tensor2& x, double) { return Tensor2(x.rows, x.cols); },
          [](const Tensor2& x) {
            double e = 0.0;
            for (double v : x.data) e += (v * v - 1.0) * (v * v - 1.0);
            return e;
          },
          [](const Tensor2& x) {
            Tensor2 g = x;
            for (double& v : g.data) v = 4.0 * v * (v * v - 1.0);
            return g;
          }};
}

}  // namespace

TEST(Epsilon, ScheduleExamples) {
  EXPECT_EQ(epsilon_schedule(0.4, 0.8, 0.5), 0.0);
  EXPECT_EQ(epsilon_schedule(1.0, 0.8, 0.5), 0.5);
  EXPECT_NEAR(epsilon_schedule(0.9, 0.8, 0.5), 0.25, 1e-12);
  EXPECT_EQ(epsilon_schedule(1.7, 0.8, 0.5), 0.5);
}

TEST(Epsilon, ContinuousAndNondecreasing) {
  double prev = 0.0;
  for (double t = 0.0; t <= 2.0; t += 1e-4) {
    const double e = epsilon_schedule(t, 0.8, 0.5);
    EXPECT_GE(e, prev);
    EXPECT_LE(e - prev, 0.5 / 0.2 * 1e-4 + 1e-12);
    prev = e;
  }
}

TEST(Cvf, OrthogonalUnchanged) {
  const Tensor2 v(1, 2, {0.0, 3.0}), vc(1, 2, {2.0, 0.0});
  EXPECT_EQ(cvf_correct(v, vc, 0.1).velocity, v);
}

TEST(Cvf, FullRemovalAtHalf) {
  const Tensor2 v(1, 3, {1.0, -2.0, 0.5});
  for (double x : cvf_correct(v, v, 0.5).velocity.data) EXPECT_NEAR(x, 0.0, 1e-15);
}

TEST(Cvf, HandExample) {
  const auto r = cvf_correct(Tensor2(1, 2, {1.0, 0.0}), Tensor2(1, 2, {1.0, 0.0}), 0.1);
  EXPECT_NEAR(r.velocity.data[0], 0.8, 1e-15);
  EXPECT_EQ(r.velocity.data[1], 0.0);
  EXPECT_FALSE(r.skipped);
}

TEST(Cvf, TinyReferenceSkipped) {
  const Tensor2 v(1, 2, {1.0, 2.0});
  const auto r = cvf_correct(v, Tensor2(1, 2, {1e-12, 0.0}), 0.1);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.velocity, v);
}

TEST(Cvf, MagnitudeIdentity) {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor2 v(8, 2), vc(8, 2);
    for (double& x : v.data) x = rng.normal() * 5.0;
    for (double& x : vc.data) x = rng.normal() * 5.0;
    const double lambda = rng.uniform(0.0, 1.0);
    const auto out = cvf_correct(v, vc, lambda).velocity;
    const double proj = diff::dot(v.data, vc.data) / std::sqrt(diff::squared_norm(vc.data));
    const double expect = diff::squared_norm(v.data) - 4.0 * lambda * (1.0 - lambda) * proj * proj;
    EXPECT_NEAR(diff::squared_norm(out.data), expect, 1e-9 * std::max(1.0, diff::squared_norm(v.data)));
  }
}

TEST(Cvf, AttractMovesTowardReference) {
  const Tensor2 v(1, 2, {1.0, 1.0}), vc(1, 2, {2.0, 0.0});
  const auto out = cvf_correct(v, vc, 0.1, CvfSign::attract).velocity;
  // coef = 2 * 0.1 * 2 / 4 = 0.1
  EXPECT_NEAR(out.data[0], 1.1, 1e-15);
  EXPECT_NEAR(out.data[1], 0.9, 1e-15);
}

TEST(CvfReference, Examples) {
  const auto s = road();
  const Trajectory a = straight(4, 2.0);
  for (double x : cvf_reference(a.waypoints, anchor_of(a, s)).data) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(cvf_reference(Tensor2(4, 2), anchor_of(a, s)), a.waypoints);
  Rng rng(2);
  Tensor2 x0(4, 2);
  for (double& v : x0.data) v = rng.normal();
  const Tensor2 r1 = cvf_reference(x0, anchor_of(a, s));
  Trajectory far = a;
  for (std::size_t i = 0; i < far.waypoints.size(); ++i) far.waypoints.data[i] = x0.data[i] + 2.0 * r1.data[i];
  const Tensor2 r2 = cvf_reference(x0, anchor_of(far, s));
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_NEAR(r2.data[i], 2.0 * r1.data[i], 1e-12);
}

TEST(Sample, ZeroInitReturnsInitialNoise) {
  VelocityModel m(small_model());
  SamplerConfig cfg;
  cfg.seed = 9;
  const auto scene = road();
  const auto res = sample(m, scene, anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.5), std::nullopt, cfg);
  EXPECT_EQ(res.trajectory.waypoints, res.path.states.front());
  EXPECT_EQ(res.path.states.size(), cfg.steps + 1);
  Rng rng(9);
  EXPECT_EQ(res.path.states.front(), flownet::draw_noise(m.config(), rng));
}

TEST(Sample, TruncationStateIsAnchorExactly) {
  const VelocityModel m = trained_stand_in(1);
  const auto scene = road();
  const Trajectory a = straight(4, 2.5);
  SamplerConfig cfg;
  cfg.cf_enabled = true;
  cfg.truncation_step = 37;
  const auto res = sample(m, scene, anchor_conditions(ConditionType::anchor, a, 0.5), anchor_of(a, scene), cfg);
  ASSERT_TRUE(res.path.truncation.has_value());
  EXPECT_EQ(res.path.truncation->step, 37u);
  EXPECT_EQ(res.path.states[37], a.waypoints);
}

// Independent transport loop: x0 from the sampler's seed, then plain Euler on the guided field.
TEST(Sample, MatchesReferenceEulerLoop) {
  const VelocityModel m = trained_stand_in(2);
  const auto scene = road();
  const auto tokens = scenario::scene_tokens(scene);
  const auto cache = flownet::make_scene_cache(m, tokens);
  const auto cond = anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.7);
  SamplerConfig cfg;
  cfg.steps = 40;
  cfg.truncation_step = 20;
  cfg.seed = 123;
  const auto res = sample(m, scene, cond, std::nullopt, cfg);

  Rng rng(123);
  Tensor2 x(4, 2);
  for (double& v : x.data) v = 16.0 * rng.normal();
  for (int k = 0; k < 40; ++k) {
    const Tensor2 v = flownet::cfg_velocity(m, x, k * (1.0 / 40.0), cache, cond, 1.5);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = x.data[i] + v.data[i] * (1.0 / 40.0);
    EXPECT_EQ(res.path.states[k + 1], x) << k;
  }
  EXPECT_EQ(res.trajectory.waypoints, x);
}

TEST(Sample, PreconditionsChecked) {
  const VelocityModel m = trained_stand_in(3);
  const auto scene = road();
  const auto cond = anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.5);
  SamplerConfig cfg;
  cfg.cf_enabled = true;
  EXPECT_THROW(sample(m, scene, cond, std::nullopt, cfg), ConfigError);
  ConstraintAnchor bad = anchor_of(straight(4, 2.5), scene);
  bad.infeasible_best = true;
  EXPECT_THROW(sample(m, scene, cond, bad, cfg), ConfigError);
  cfg.cf_enabled = false;
  cfg.truncation_step = cfg.steps;
  EXPECT_THROW(sample(m, scene, cond, std::nullopt, cfg), ConfigError);
  cfg.truncation_step = 50;
  cfg.lambda = 1.0;
  EXPECT_THROW(sample(m, scene, cond, std::nullopt, cfg), ConfigError);
}

TEST(Sample, RefinementExtendsPath) {
  const VelocityModel m = trained_stand_in(4);
  const auto scene = road();
  SamplerConfig cfg;
  cfg.steps = 20;
  cfg.truncation_step = 10;
  cfg.rfe_enabled = true;
  cfg.refine_steps = 5;
  const auto res = sample(m, scene, anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.5), std::nullopt, cfg);
  ASSERT_EQ(res.path.states.size(), 26u);
  EXPECT_NEAR(res.path.times.back(), 1.25, 1e-12);
  cfg.refine_steps = 0;
  EXPECT_EQ(sample(m, scene, anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.5), std::nullopt, cfg)
                .path.states.size(),
            21u);
}

TEST(Refine, StationaryPointIsFixed) {
  SamplerConfig cfg;
  cfg.eta_scale = 50.0;
  Tensor2 x(2, 2);
  x.fill(1.0);  // every coordinate at a minimum of the double well
  EXPECT_EQ(refine_only(double_well(), x, 10, cfg, 0.8, 0.5), x);
  x.fill(0.0);  // the saddle: gradient zero as well
  EXPECT_EQ(refine_only(double_well(), x, 10, cfg, 0.8, 0.5), x);
}

TEST(Refine, EnergyNeverIncreases) {
  const auto f = double_well();
  Rng rng(7);
  for (double scale : {1.0, 100.0, 1e5}) {
    SamplerConfig cfg;
    cfg.eta_scale = scale;
    Tensor2 x(3, 2);
    for (double& v : x.data) v = 2.0 * rng.normal();
    double prev = f.energy(x);
    for (int k = 0; k < 30; ++k) {
      x = refine_step(f, x, 1.0 + k * 0.01, 0.01, cfg, 0.8, 0.5, nullptr);
      const double e = f.energy(x);
      EXPECT_LE(e, prev);
      prev = e;
    }
  }
  SamplerConfig cfg;
  EXPECT_THROW(refine_only(f, Tensor2(1, 1), 0, cfg, 0.8, 0.5), ConfigError);
}

TEST(Refine, ModelFieldDescent) {
  const VelocityModel m = trained_stand_in(5);
  const auto scene = road();
  const auto cache = flownet::make_scene_cache(m, scenario::scene_tokens(scene));
  const auto cond = anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.5);
  SamplerConfig cfg;
  cfg.eta_scale = 1e3;
  const auto f = model_field(m, cache, cond, scene, cfg);
  Rng rng(3);
  Tensor2 x = straight(4, 2.5).waypoints;
  for (double& v : x.data) v += rng.normal();
  for (int k = 0; k < 10; ++k) {
    const double t = 1.0 + k * 0.01;
    const Tensor2 v = f.velocity(x, t);
    Tensor2 moved = x;
    for (std::size_t i = 0; i < x.size(); ++i) moved.data[i] += v.data[i] * 0.01;
    x = refine_step(f, x, t, 0.01, cfg, 0.8, 0.5, nullptr);
    EXPECT_LE(f.energy(x), f.energy(moved));
  }
}

TEST(Multimodal, OnePerAnchorAndDeterministic) {
  const VelocityModel m = trained_stand_in(6);
  const auto scene = road();
  std::vector<Trajectory> trajs;
  for (int i = 0; i < 40; ++i) {
    Trajectory t = straight(4, 1.0 + 0.1 * i);
    for (std::size_t k = 0; k < 4; ++k) t.waypoints(k, 1) = 0.05 * (i % 7) * static_cast<double>(k);
    trajs.push_back(t);
  }
  const auto vocab = vocab::fps_build(trajs, 32);
  SamplerConfig cfg;
  cfg.steps = 10;
  cfg.truncation_step = 5;
  cfg.seed = 77;
  const auto a = sample_multimodal(m, scene, vocab, cfg, 0.5);
  const auto b = sample_multimodal(m, scene, vocab, cfg, 0.5);
  ASSERT_EQ(a.size(), 32u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].anchor_index, i);
    EXPECT_EQ(a[i].trajectory.waypoints, b[i].trajectory.waypoints);
  }
  EXPECT_NE(a[0].trajectory.waypoints, a[1].trajectory.waypoints);
  EXPECT_THROW(sample_multimodal(m, scene, vocab::AnchorVocab{}, cfg), ConfigError);
}

TEST(PathExport, RoundTripIsLossless) {
  const VelocityModel m = trained_stand_in(7);
  SamplerConfig cfg;
  cfg.steps = 12;
  cfg.truncation_step = 6;
  const auto res = sample(m, road(), anchor_conditions(ConditionType::anchor, straight(4, 2.5), 0.5), std::nullopt, cfg);
  const auto recs = decode_path(encode_path(res.path));
  ASSERT_EQ(recs.size(), 13u);
  for (std::size_t k = 0; k < recs.size(); ++k) {
    EXPECT_EQ(recs[k].step, k);
    EXPECT_EQ(recs[k].t, res.path.times[k]);
    EXPECT_EQ(recs[k].waypoints, res.path.states[k].data);
  }
}

TEST(PathExport, MalformedInputRejected) {
  EXPECT_THROW(decode_path(""), ParseError);
  EXPECT_THROW(decode_path("{\"step\":0,\"t\":0,\"waypoints\":[1,2,3]}\n"), ParseError);
  try {
    decode_path("{\"step\":0,\"t\":0,\"waypoints\":[1,2]}\nnope\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}
