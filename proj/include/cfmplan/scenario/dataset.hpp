#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmplan/diffcore/checkpoint.hpp"
#include "cfmplan/scenario/generator.hpp"
#include "cfmplan/scenario/reward.hpp"

namespace cfmplan::scenario {

inline constexpr int kDatasetVersion = 1;

/// One (scene, expert trajectory) pair.
struct Record {
  Scene scene;
  Trajectory trajectory;
  std::size_t mode = 0;
  double ep = 0.0;
};

struct DatasetConfig {
  std::map<ScenarioKind, std::size_t> counts;
  std::uint64_t master_seed = 0;
};

inline std::uint64_t scene_seed(std::uint64_t master, ScenarioKind kind, std::size_t i) {
  return derive_seed(derive_seed(master, SeedStream::dataset),
                     (static_cast<std::uint64_t>(kind) << 32) | static_cast<std::uint64_t>(i));
}

/// Scenes in kind order, then index order; one record per expert mode.
inline std::vector<Record> build_records(const DatasetConfig& cfg, const Limits& lim = default_limits()) {
  std::size_t total = 0;
  for (const auto& [_, n] : cfg.counts) total += n;
  if (total == 0) throw ConfigError("dataset: total scene count is zero");
  std::vector<Record> out;
  for (const auto& [kind, n] : cfg.counts) {
    for (std::size_t i = 0; i < n; ++i) {
      Scene scene = generate_scene(kind, scene_seed(cfg.master_seed, kind, i), lim);
      for (auto& e : expert_trajectories(scene, lim)) {
        const double ep = ep_reward(e.trajectory, scene, lim);
        out.push_back({scene, std::move(e.trajectory), e.mode, ep});
      }
    }
  }
  return out;
}

namespace detail {

/// Round to 9 significant decimal digits; the JSON writer then emits at most 9.
inline double sig9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return std::strtod(buf, nullptr);
}

inline nlohmann::json points_json(const std::vector<Vec2>& pts) {
  auto a = nlohmann::json::array();
  for (Vec2 p : pts) a.push_back({sig9(p.x), sig9(p.y)});
  return a;
}

inline std::vector<Vec2> points_from(const nlohmann::json& a) {
  std::vector<Vec2> pts;
  for (const auto& p : a) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return pts;
}

}  // namespace detail

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(s.kind));
  j["seed"] = s.seed;
  j["ego"] = {{"x", detail::sig9(s.ego.position.x)},
              {"y", detail::sig9(s.ego.position.y)},
              {"heading", detail::sig9(s.ego.heading)},
              {"speed", detail::sig9(s.ego.speed)}};
  j["lanes"] = nlohmann::json::array();
  for (const Lane& l : s.lanes) {
    j["lanes"].push_back({{"half_width", detail::sig9(l.half_width)}, {"centerline", detail::points_json(l.centerline)}});
  }
  j["obstacles"] = nlohmann::json::array();
  for (const Obstacle& o : s.obstacles) {
    j["obstacles"].push_back({{"x", detail::sig9(o.position.x)},
                              {"y", detail::sig9(o.position.y)},
                              {"vx", detail::sig9(o.velocity.x)},
                              {"vy", detail::sig9(o.velocity.y)},
                              {"radius", detail::sig9(o.radius)}});
  }
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  auto kind = kind_from_string(j.at("kind").get<std::string>());
  if (!kind) throw ParseError("unknown scenario kind '" + j.at("kind").get<std::string>() + "'");
  s.kind = *kind;
  s.seed = j.at("seed").get<std::uint64_t>();
  const auto& e = j.at("ego");
  s.ego = {{e.at("x").get<double>(), e.at("y").get<double>()}, e.at("heading").get<double>(), e.at("speed").get<double>()};
  for (const auto& l : j.at("lanes")) s.lanes.push_back({detail::points_from(l.at("centerline")), l.at("half_width").get<double>()});
  for (const auto& o : j.at("obstacles")) {
    s.obstacles.push_back({{o.at("x").get<double>(), o.at("y").get<double>()},
                           {o.at("vx").get<double>(), o.at("vy").get<double>()},
                           o.at("radius").get<double>()});
  }
  return s;
}

inline nlohmann::json trajectory_json(const Trajectory& t) {
  auto a = nlohmann::json::array();
  for (std::size_t i = 0; i < t.steps(); ++i) a.push_back({detail::sig9(t.waypoints(i, 0)), detail::sig9(t.waypoints(i, 1))});
  return a;
}

inline Trajectory trajectory_from(const nlohmann::json& a, double dt) {
  diff::Tensor2 w(a.size(), 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    w(i, 0) = a.at(i).at(0).get<double>();
    w(i, 1) = a.at(i).at(1).get<double>();
  }
  return Trajectory(std::move(w), dt);
}

inline std::string encode_record(const Record& r, std::size_t index) {
  nlohmann::json j;
  j["version"] = kDatasetVersion;
  j["index"] = index;
  j["scene"] = scene_to_json(r.scene);
  j["mode"] = r.mode;
  j["ep"] = detail::sig9(r.ep);
  j["dt"] = detail::sig9(r.trajectory.dt);
  j["trajectory"] = trajectory_json(r.trajectory);
  return j.dump();
}

inline Record decode_record(const std::string& line, std::size_t line_number) {
  try {
    const auto j = nlohmann::json::parse(line);
    if (j.at("version").get<int>() != kDatasetVersion) {
      throw ParseError("unsupported dataset version " + std::to_string(j.at("version").get<int>()));
    }
    Record r;
    r.scene = scene_from_json(j.at("scene"));
    r.mode = j.at("mode").get<std::size_t>();
    r.ep = j.at("ep").get<double>();
    r.trajectory = trajectory_from(j.at("trajectory"), j.at("dt").get<double>());
    return r;
  } catch (const std::exception& e) {
    throw ParseError("dataset line " + std::to_string(line_number) + ": " + e.what());
  }
}

inline std::string encode_dataset(const std::vector<Record>& records) {
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out += encode_record(records[i], i);
    out += '\n';
  }
  return out;
}

/// Generate and write the dataset file; returns the record count.
inline std::size_t dataset_build(const DatasetConfig& cfg, const std::filesystem::path& path,
                                 const Limits& lim = default_limits()) {
  const auto records = build_records(cfg, lim);
  diff::write_file(path, encode_dataset(records));
  return records.size();
}

inline std::vector<Record> read_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError(path.string() + ": dataset not found");
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open dataset");
  std::vector<Record> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    out.push_back(decode_record(line, n));
  }
  return out;
}

/// Records sharing a scene, in file order.
struct SceneGroup {
  Scene scene;
  std::vector<Record> experts;
};

inline std::vector<SceneGroup> group_by_scene(const std::vector<Record>& records) {
  std::vector<SceneGroup> out;
  for (const Record& r : records) {
    if (out.empty() || out.back().scene.seed != r.scene.seed || out.back().scene.kind != r.scene.kind) {
      out.push_back({r.scene, {}});
    }
    out.back().experts.push_back(r);
  }
  return out;
}

}  // namespace cfmplan::scenario
