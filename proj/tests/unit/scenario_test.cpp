#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "../support/printers.hpp"
#include "cfmplan/scenario/dataset.hpp"
#include "cfmplan/scenario/tokens.hpp"
#include "../support/fd_oracle.hpp"

using namespace cfmplan;
using namespace cfmplan::scenario;
using diff::Tensor2;

namespace {

Scene straight_road(double speed, double length = 120.0) {
  Scene s;
  s.kind = ScenarioKind::straight;
  s.lanes.push_back({{{-10.0, 0.0}, {length, 0.0}}, 1.75});
  s.ego.speed = speed;
  return s;
}

Trajectory along_x(double speed, std::size_t steps = 8, double dt = 0.5) {
  Tensor2 w(steps, 2);
  for (std::size_t i = 0; i < steps; ++i) w(i, 0) = speed * dt * static_cast<double>(i + 1);
  return Trajectory(w, dt);
}

}  // namespace

TEST(Generate, DeterministicForKindAndSeed) {
  for (auto kind : kAllKinds) {
    const Scene a = generate_scene(kind, 7);
    const Scene b = generate_scene(kind, 7);
    EXPECT_EQ(scene_to_json(a).dump(), scene_to_json(b).dump()) << to_string(kind);
  }
}

TEST(Generate, ForkHasTwoLanesSharingAStem) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene s = generate_scene(ScenarioKind::fork, seed);
    ASSERT_EQ(s.lanes.size(), 2u);
    const auto& a = s.lanes[0].centerline;
    const auto& b = s.lanes[1].centerline;
    EXPECT_LT(norm(a.front() - b.front()), 1e-9);
    EXPECT_GT(norm(a.back() - b.back()), 3.0);
  }
}

TEST(Generate, ObstacleAvoidBlocksTheEgoLane) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene s = generate_scene(ScenarioKind::obstacle_avoid, seed);
    bool blocking = false;
    for (const auto& o : s.obstacles)
      for (const auto& lane : s.lanes) blocking = blocking || project(lane.centerline, o.position).distance < o.radius;
    EXPECT_TRUE(blocking) << "seed " << seed;
  }
}

TEST(Generate, SceneInvariants) {
  for (auto kind : kAllKinds) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const Scene s = generate_scene(kind, seed);
      ASSERT_GE(s.lanes.size(), 1u);
      double nearest = 1e9;
      for (const auto& lane : s.lanes) {
        ASSERT_GE(lane.centerline.size(), 2u);
        for (std::size_t i = 1; i < lane.centerline.size(); ++i)
          EXPECT_GT(norm(lane.centerline[i] - lane.centerline[i - 1]), 0.0);
        nearest = std::min(nearest, project(lane.centerline, s.ego.position).distance);
      }
      EXPECT_LE(nearest, 0.5);
      EXPECT_GT(s.ego.heading, -std::numbers::pi);
      EXPECT_LE(s.ego.heading, std::numbers::pi);
      EXPECT_GE(s.ego.speed, 0.0);
      for (std::size_t i = 0; i < s.obstacles.size(); ++i) {
        const auto& o = s.obstacles[i];
        EXPECT_GT(o.radius, 0.0);
        EXPECT_LE(o.radius, 5.0);
        EXPECT_LE(norm(o.velocity), 20.0);
        for (std::size_t j = 0; j < i; ++j)
          EXPECT_GT(norm(o.position - s.obstacles[j].position), o.radius + s.obstacles[j].radius);
      }
    }
  }
}

TEST(Experts, StraightRoadConstantSpeedRollout) {
  const Scene s = straight_road(5.0);
  const auto ex = expert_trajectories(s);
  ASSERT_EQ(ex.size(), 1u);
  const auto& t = ex[0].trajectory;
  Vec2 prev = s.ego.position;
  for (std::size_t i = 0; i < t.steps(); ++i) {
    EXPECT_NEAR(t.point(i).y, 0.0, 1e-9);
    EXPECT_NEAR(norm(t.point(i) - prev), 2.5, 0.25);
    prev = t.point(i);
  }
}

TEST(Experts, ForkModesEndFarApart) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ex = expert_trajectories(generate_scene(ScenarioKind::fork, seed));
    ASSERT_EQ(ex.size(), 2u);
    EXPECT_NE(ex[0].mode, ex[1].mode);
    EXPECT_GT(norm(ex[0].trajectory.final_point() - ex[1].trajectory.final_point()), 3.0);
  }
}

TEST(Experts, LeadStopBrakesToZero) {
  Scene s = straight_road(5.0);
  s.kind = ScenarioKind::lead_stop;
  s.obstacles.push_back({{6.0, 0.0}, {0.0, 0.0}, 1.0});
  const auto ex = expert_trajectories(s);
  ASSERT_EQ(ex.size(), 1u);
  const auto& t = ex[0].trajectory;
  const double last_step = norm(t.point(t.steps() - 1) - t.point(t.steps() - 2));
  EXPECT_LT(last_step / t.dt, 1e-9);
  EXPECT_EQ(constraint_eval(t, s).collision, 0.0);
}

TEST(Experts, AllPenaltiesZeroAndSpeedBounded) {
  for (auto kind : kAllKinds) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const Scene s = generate_scene(kind, seed);
      for (const auto& e : expert_trajectories(s)) {
        const auto c = constraint_eval(e.trajectory, s);
        EXPECT_EQ(c.collision, 0.0);
        EXPECT_EQ(c.road_departure, 0.0);
        EXPECT_EQ(c.kinematic, 0.0);
        Vec2 prev = s.ego.position;
        for (std::size_t i = 0; i < e.trajectory.steps(); ++i) {
          EXPECT_LE(norm(e.trajectory.point(i) - prev), 20.0 * e.trajectory.dt + 1e-9);
          prev = e.trajectory.point(i);
        }
      }
    }
  }
}

TEST(Experts, InfeasibleSceneRaisesGenerationError) {
  Scene s = straight_road(8.0);
  s.lanes[0].half_width = 1.0;
  s.obstacles.push_back({{12.0, 0.0}, {0.0, 0.0}, 4.0});
  EXPECT_THROW(expert_trajectories(s), GenerationError);
}

TEST(Tokens, OneAgentTokenPerObstacle) {
  Scene s = straight_road(5.0);
  for (int i = 0; i < 3; ++i) s.obstacles.push_back({{10.0 + 10.0 * i, 3.0}, {0.0, 0.0}, 1.0});
  const auto tk = scene_tokens(s);
  EXPECT_EQ(tk.agents.rows, 3u);
  EXPECT_FALSE(tk.null_agent);
}

TEST(Tokens, EmptySceneYieldsNullAgentToken) {
  const auto tk = scene_tokens(straight_road(5.0));
  EXPECT_EQ(tk.agents.rows, 1u);
  EXPECT_TRUE(tk.null_agent);
}

TEST(Tokens, TwentyMeterLaneGivesElevenMapTokens) {
  Scene s;
  s.lanes.push_back({{{0.0, 0.0}, {20.0, 0.0}}, 1.75});
  const auto tk = scene_tokens(s);
  EXPECT_EQ(tk.map.rows, 11u);
  EXPECT_EQ(tk.map.cols, kTokenFeatures);
}

TEST(Constraints, ExpertOnEmptyRoadIsFeasible) {
  const Scene s = straight_road(6.0);
  const auto c = constraint_eval(expert_trajectories(s)[0].trajectory, s);
  EXPECT_NEAR(c.total(), 0.0, 1e-6);
}

TEST(Constraints, WaypointAtObstacleCenter) {
  Scene s = straight_road(5.0);
  s.obstacles.push_back({{2.5, 0.0}, {0.0, 0.0}, 1.5});
  const auto c = constraint_eval(along_x(5.0), s);
  // Penetration depth r_o + r_ego = 2.5 is past the transition width, so the term equals it.
  EXPECT_GE(c.collision, 2.5);
  EXPECT_GT(c.collision, 1.0);
}

TEST(Constraints, MovingObstacleMatchedInTime) {
  Scene s = straight_road(5.0);
  // Reaches (5, 0) at t = 1 s, exactly where waypoint 1 sits.
  s.obstacles.push_back({{5.0, -10.0}, {0.0, 10.0}, 1.0});
  EXPECT_TRUE(hard_collision(along_x(5.0), s, 2));
  EXPECT_FALSE(hard_collision(along_x(5.0), s, 1));
}

TEST(Constraints, OffRoadRaisesDepartureOnly) {
  const Scene s = straight_road(5.0);
  const Trajectory on = along_x(5.0);
  Trajectory off = on;
  for (std::size_t i = 0; i < off.steps(); ++i) off.waypoints(i, 1) += 100.0;
  const auto a = constraint_eval(on, s);
  const auto b = constraint_eval(off, s);
  EXPECT_GT(b.road_departure, 0.0);
  EXPECT_EQ(a.collision, b.collision);
}

TEST(Constraints, NonNegativeAndContinuous) {
  Rng rng(17);
  const Scene s = generate_scene(ScenarioKind::obstacle_avoid, 3);
  for (int trial = 0; trial < 30; ++trial) {
    Trajectory t = along_x(rng.uniform(2.0, 25.0));
    for (double& v : t.waypoints.data) v += rng.normal() * 2.0;
    const auto c0 = constraint_eval(t, s);
    EXPECT_GE(c0.collision, 0.0);
    EXPECT_GE(c0.road_departure, 0.0);
    EXPECT_GE(c0.kinematic, 0.0);
    for (double delta : {1e-3, 1e-5}) {
      Trajectory u = t;
      u.waypoints.data[rng.index(u.waypoints.size())] += delta;
      const auto c1 = constraint_eval(u, s);
      // Lipschitz bound: curvature terms scale with 1/kappa_max and the regularized denominator.
      EXPECT_LE(std::abs(c1.collision - c0.collision), 10.0 * delta);
      EXPECT_LE(std::abs(c1.road_departure - c0.road_departure), 10.0 * delta);
      EXPECT_LE(std::abs(c1.kinematic - c0.kinematic), 200.0 * delta);
    }
  }
}

TEST(Constraints, GradientMatchesFiniteDifferences) {
  Rng rng(23);
  for (auto kind : {ScenarioKind::obstacle_avoid, ScenarioKind::turn, ScenarioKind::lead_stop}) {
    const Scene s = generate_scene(kind, 5);
    for (int trial = 0; trial < 5; ++trial) {
      Trajectory t = along_x(rng.uniform(8.0, 24.0));
      for (double& v : t.waypoints.data) v += rng.normal() * 1.5;
      const Tensor2 weights = fdcheck::random_tensor(1, 3, rng);
      diff::ParamStore none;
      fdcheck::Graph g = [&](diff::Tape& tp, diff::ParamStore&, std::vector<diff::Var>& in) {
        return diff::sum(tp, diff::mul(tp, constraint_vector(tp, in[0], s, 0.5), tp.constant(weights)));
      };
      const auto rep = fdcheck::check(none, {t.waypoints}, g, 1e-6);
      EXPECT_LT(rep.worst, 1e-4) << to_string(kind) << " " << rep.where;
    }
  }
}

TEST(Reward, StationaryIsZero) {
  const Scene s = straight_road(5.0);
  EXPECT_EQ(ep_reward(Trajectory(Tensor2(8, 2), 0.5), s), 0.0);
}

TEST(Reward, FullSpeedIsOne) { EXPECT_NEAR(ep_reward(along_x(20.0), straight_road(20.0)), 1.0, 1e-12); }

TEST(Reward, HalfSpeedIsHalf) { EXPECT_NEAR(ep_reward(along_x(10.0), straight_road(10.0)), 0.5, 1e-6); }

TEST(Reward, MonotoneInProgress) {
  const Scene s = straight_road(10.0);
  double prev = -1.0;
  for (double v = 0.0; v <= 30.0; v += 1.5) {
    const double ep = ep_reward(along_x(v), s);
    EXPECT_GE(ep, prev);
    EXPECT_GE(ep, 0.0);
    EXPECT_LE(ep, 1.0);
    prev = ep;
  }
}

TEST(Dataset, ForkCountDoublesRecords) {
  DatasetConfig cfg;
  cfg.counts[ScenarioKind::fork] = 10;
  EXPECT_EQ(build_records(cfg).size(), 20u);
}

TEST(Dataset, SameSeedByteIdenticalFiles) {
  DatasetConfig cfg;
  cfg.counts[ScenarioKind::straight] = 3;
  cfg.counts[ScenarioKind::lead_stop] = 2;
  cfg.master_seed = 42;
  const auto dir = std::filesystem::temp_directory_path() / "cfmplan_dataset_test";
  dataset_build(cfg, dir / "a.jsonl");
  dataset_build(cfg, dir / "b.jsonl");
  EXPECT_EQ(diff::read_file(dir / "a.jsonl"), diff::read_file(dir / "b.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST(Dataset, ZeroScenesIsConfigError) {
  DatasetConfig cfg;
  cfg.counts[ScenarioKind::fork] = 0;
  EXPECT_THROW(build_records(cfg), ConfigError);
}

TEST(Dataset, RoundTripKeepsNineDigits) {
  DatasetConfig cfg;
  cfg.counts[ScenarioKind::turn] = 2;
  cfg.counts[ScenarioKind::obstacle_avoid] = 2;
  const auto recs = build_records(cfg);
  const auto text = encode_dataset(recs);
  const auto dir = std::filesystem::temp_directory_path() / "cfmplan_dataset_rt";
  diff::write_file(dir / "d.jsonl", text);
  const auto back = read_dataset(dir / "d.jsonl");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].mode, recs[i].mode);
    for (std::size_t k = 0; k < recs[i].trajectory.waypoints.size(); ++k) {
      const double a = recs[i].trajectory.waypoints.data[k], b = back[i].trajectory.waypoints.data[k];
      EXPECT_LE(std::abs(a - b), 1e-8 * std::max(1.0, std::abs(a)));
    }
  }
  EXPECT_EQ(encode_dataset(back), text);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, MalformedLineReportsLineNumber) {
  const auto dir = std::filesystem::temp_directory_path() / "cfmplan_dataset_bad";
  DatasetConfig cfg;
  cfg.counts[ScenarioKind::straight] = 1;
  diff::write_file(dir / "d.jsonl", encode_dataset(build_records(cfg)) + "{not json\n");
  try {
    read_dataset(dir / "d.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dataset(dir / "missing.jsonl"), IoError);
  std::filesystem::remove_all(dir);
}
