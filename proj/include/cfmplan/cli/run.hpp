#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfmplan/cli/config.hpp"

namespace cfmplan::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> c{"gen-data", "build-vocab", "train", "sample", "eval", "ablate", "export-path"};
  return c;
}

/// Usage problems: bad flags, missing or invalid config. Exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::string command;
  fs::path config;
  fs::path out = ".";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::optional<std::string> modules;
};

/// "cvf,cf,rfe,ras" subset; an empty string turns every module off.
inline harness::ModuleToggles parse_modules(const std::string& list) {
  harness::ModuleToggles t;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item == "none") continue;
    if (item == "cvf") t.cvf = true;
    else if (item == "cf") t.cf = true;
    else if (item == "rfe") t.rfe = true;
    else if (item == "ras") t.ras = true;
    else throw UsageError("--modules: unknown module '" + item + "' (cvf, cf, rfe, ras)");
  }
  return t;
}

namespace detail {

inline fs::path resolve(const fs::path& out, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : out / q;
}

inline std::string sig9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

/// Collects input hashes and staged outputs; nothing touches disk until commit().
class Session {
 public:
  Session(const RunOptions& o, const RunSettings& s, std::ostream& err)
      : opts_(o), settings_(s), err_(err), start_(std::chrono::steady_clock::now()) {}

  std::string read_input(const fs::path& p) {
    if (!fs::exists(p)) throw IoError(p.string() + ": not found");
    std::string bytes = diff::read_file(p);
    inputs_[p.string()] = git_blob_hash(bytes);
    return bytes;
  }
  void note_input(const fs::path& p) {
    if (!fs::exists(p)) throw IoError(p.string() + ": not found");
    inputs_[p.string()] = git_blob_hash(diff::read_file(p));
  }

  void stage(const fs::path& p, std::string bytes) { outputs_.emplace_back(p, std::move(bytes)); }

  void log(const std::string& line) const {
    if (!opts_.quiet) err_ << line << '\n';
  }

  void commit(std::ostream& out) {
    fs::create_directories(opts_.out);
    nlohmann::json outputs = nlohmann::json::object();
    for (const auto& [p, bytes] : outputs_) {
      diff::write_file(p, bytes);
      outputs[p.string()] = git_blob_hash(bytes);
      if (!opts_.quiet) out << p.string() << '\n';
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    nlohmann::json m;
    m["command"] = opts_.command;
    m["seed"] = settings_.spec.seed;
    m["config"] = spec_echo();
    m["config_file"] = opts_.config.string();
    m["inputs"] = inputs_;
    m["outputs"] = outputs;
    m["wall_time_s"] = wall;
    diff::write_file(opts_.out / ("manifest_" + opts_.command + ".json"), m.dump(2) + "\n");
  }

  [[nodiscard]] nlohmann::json spec_echo() const {
    auto j = harness::spec_json(settings_.spec);
    const auto& p = settings_.paths;
    j["paths"] = {{"dataset", p.dataset}, {"eval_dataset", p.eval_dataset}, {"vocab", p.vocab},
                  {"checkpoint", p.checkpoint}, {"rfe_checkpoint", p.rfe_checkpoint}, {"path", p.path}};
    j["export"] = {{"format", settings_.export_format == ExportFormat::csv ? "csv" : "jsonl"}};
    j["sample"] = {{"scenes", settings_.sample_scenes}};
    return j;
  }

 private:
  const RunOptions& opts_;
  const RunSettings& settings_;
  std::ostream& err_;
  std::chrono::steady_clock::time_point start_;
  nlohmann::json inputs_ = nlohmann::json::object();
  std::vector<std::pair<fs::path, std::string>> outputs_;
};

inline std::vector<scenario::Record> load_records(Session& s, const fs::path& p) {
  s.note_input(p);
  return scenario::read_dataset(p);
}

inline flownet::VelocityModel load_checkpoint(Session& s, const fs::path& p) {
  s.note_input(p);
  s.note_input(flownet::sidecar_path(p));
  return flownet::load_model(p);
}

inline vocab::AnchorVocab load_vocab(Session& s, const fs::path& p) {
  s.note_input(p);
  return vocab::read_vocab(p);
}

inline std::string trajectories_jsonl(const std::vector<scenario::SceneGroup>& scenes,
                                      const std::vector<std::vector<scenario::Trajectory>>& samples) {
  std::string out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t i = 0; i < samples[s].size(); ++i) {
      nlohmann::json j;
      j["scene"] = s;
      j["scene_seed"] = scenes[s].scene.seed;
      j["kind"] = std::string(scenario::to_string(scenes[s].scene.kind));
      j["sample"] = i;
      j["waypoints"] = samples[s][i].waypoints.data;
      out += j.dump() + '\n';
    }
  }
  return out;
}

inline std::string train_log_csv(const std::vector<harness::EpochLog>& log) {
  std::string out = "epoch,rf_loss,rfe_loss\n";
  for (const auto& e : log) out += std::to_string(e.epoch) + ',' + sig9(e.rf_loss) + ',' + sig9(e.rfe_loss) + '\n';
  return out;
}

/// Flat (step, t, waypoint, x, y) table of a flow path.
inline std::string export_path_text(const std::vector<sampler::PathRecord>& path, ExportFormat format) {
  std::string out;
  if (format == ExportFormat::csv) out = "step,t,waypoint,x,y\n";
  for (const auto& r : path) {
    for (std::size_t i = 0; i < r.waypoints.size() / 2; ++i) {
      const double x = r.waypoints[2 * i], y = r.waypoints[2 * i + 1];
      if (format == ExportFormat::csv) {
        out += std::to_string(r.step) + ',' + sig9(r.t) + ',' + std::to_string(i) + ',' + sig9(x) + ',' + sig9(y) + '\n';
      } else {
        nlohmann::json j{{"step", r.step}, {"t", r.t}, {"waypoint", i}, {"x", x}, {"y", y}};
        out += j.dump() + '\n';
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands. Each one reads and validates everything first, then stages outputs.

inline void cmd_gen_data(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto& spec = rs.spec;
  if (spec.train_scenes.empty()) throw ConfigError("dataset: no scene counts configured");
  const auto train = scenario::build_records(spec.train_dataset());
  const auto eval = scenario::build_records(spec.eval_dataset());
  s.log("gen-data: " + std::to_string(train.size()) + " train records, " + std::to_string(eval.size()) + " eval records");
  s.stage(resolve(out, rs.paths.dataset), scenario::encode_dataset(train));
  s.stage(resolve(out, rs.paths.eval_dataset), scenario::encode_dataset(eval));
}

inline void cmd_build_vocab(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto records = load_records(s, resolve(out, rs.paths.dataset));
  std::vector<scenario::Trajectory> ts;
  ts.reserve(records.size());
  for (const auto& r : records) ts.push_back(r.trajectory);
  const auto v = vocab::fps_build(ts, rs.spec.vocab_size);
  s.log("build-vocab: " + std::to_string(v.size()) + " anchors from " + std::to_string(ts.size()) + " trajectories");
  s.stage(resolve(out, rs.paths.vocab), diff::encode_blocks(vocab::vocab_blocks(v)));
}

inline void stage_model(Session& s, const fs::path& p, const flownet::VelocityModel& m, const std::string& vocab_ref) {
  s.stage(p, diff::encode_blocks(diff::snapshot(m.params())));
  auto j = flownet::config_json(m.config());
  j["vocab"] = vocab_ref;
  s.stage(flownet::sidecar_path(p), j.dump(2) + "\n");
}

inline void cmd_train(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto records = load_records(s, resolve(out, rs.paths.dataset));
  const auto vpath = resolve(out, rs.paths.vocab);
  const auto v = load_vocab(s, vpath);
  const std::string vref = git_blob_hash(diff::read_file(vpath));
  auto progress = [&](const char* tag) {
    return [&s, tag](const harness::EpochLog& e) {
      s.log(std::string(tag) + " epoch " + std::to_string(e.epoch) + " rf_loss " + sig9(e.rf_loss) + " rfe_loss " +
            sig9(e.rfe_loss));
    };
  };
  auto tc = rs.spec.train;
  tc.rfe = false;
  auto rf = harness::train(rs.spec.model, records, v, tc, rs.spec.seed, progress("rf"));
  stage_model(s, resolve(out, rs.paths.checkpoint), rf.model, vref);
  s.stage(out / "train_log.csv", train_log_csv(rf.log));
  if (rs.spec.train.rfe) {
    tc.rfe = true;
    auto rfe = harness::train(rs.spec.model, records, v, tc, rs.spec.seed, progress("rfe"));
    stage_model(s, resolve(out, rs.paths.rfe_checkpoint), rfe.model, vref);
    s.stage(out / "train_log_rfe.csv", train_log_csv(rfe.log));
  }
}

/// Checkpoint for the module toggles: the RFE-trained one when RFE is on.
inline flownet::VelocityModel eval_model(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto& p = rs.spec.modules.rfe ? rs.paths.rfe_checkpoint : rs.paths.checkpoint;
  return load_checkpoint(s, resolve(out, p));
}

inline void cmd_sample(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto m = eval_model(s, rs, out);
  const auto v = load_vocab(s, resolve(out, rs.paths.vocab));
  auto groups = scenario::group_by_scene(load_records(s, resolve(out, rs.paths.eval_dataset)));
  if (groups.empty()) throw ConfigError("sample: eval dataset is empty");
  if (groups.size() > rs.sample_scenes) groups.resize(rs.sample_scenes);
  const auto e = rs.spec.eval_config();
  const auto samples = harness::plan_scenes(m, groups, v, e);

  // Full flow path of one intent-masked draw on the first scene.
  auto sc = e.sampler;
  const auto& scene = groups.front().scene;
  std::optional<vocab::ConstraintAnchor> anchor;
  if (sc.cvf_enabled || sc.cf_enabled) {
    anchor = vocab::select_constraint_anchor(v, scene);
    if (anchor->infeasible_best) sc.cvf_enabled = sc.cf_enabled = false;
  }
  flownet::ConditionSet c;
  c.intent_mask = true;
  c.reward = e.reward;
  c.reward_mask = !e.reward.has_value();
  const auto r = sampler::sample(m, scene, c, anchor, sc);
  s.log("sample: " + std::to_string(groups.size()) + " scenes, path of " + std::to_string(r.path.states.size()) +
        " states");
  s.stage(out / "samples.jsonl", trajectories_jsonl(groups, samples));
  s.stage(resolve(out, rs.paths.path), sampler::encode_path(r.path));
}

inline std::vector<scenario::SceneGroup> eval_groups(Session& s, const RunSettings& rs, const fs::path& out) {
  auto groups = scenario::group_by_scene(load_records(s, resolve(out, rs.paths.eval_dataset)));
  if (groups.empty()) throw ConfigError("eval dataset is empty");
  return groups;
}

inline void cmd_eval(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto m = eval_model(s, rs, out);
  const auto v = load_vocab(s, resolve(out, rs.paths.vocab));
  const auto groups = eval_groups(s, rs, out);
  const auto metrics = harness::evaluate(m, groups, v, rs.spec.eval_config());
  harness::AblationRow row{"eval", rs.spec.modules, rs.spec.eval_config().sampler, metrics};
  s.log("eval: composite " + sig9(metrics.composite) + " collision_avg " + sig9(metrics.collision_avg) + " road " +
        sig9(metrics.road_compliance) + " ep " + sig9(metrics.ep_mean));
  const std::string base = "eval_" + harness::spec_hash(rs.spec);
  s.stage(out / (base + ".csv"), harness::results_csv({row}));
  s.stage(out / (base + ".json"), harness::results_json(rs.spec, {row}).dump(2) + "\n");
}

inline void cmd_ablate(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto rf = load_checkpoint(s, resolve(out, rs.paths.checkpoint));
  std::optional<flownet::VelocityModel> rfe;
  const auto rfe_path = resolve(out, rs.paths.rfe_checkpoint);
  if (fs::exists(rfe_path)) {
    rfe = load_checkpoint(s, rfe_path);
  } else {
    s.log("ablate: " + rfe_path.string() + " missing; RFE rows reuse the base checkpoint");
  }
  const auto v = load_vocab(s, resolve(out, rs.paths.vocab));
  const auto groups = eval_groups(s, rs, out);
  harness::AblationModels models{&rf, rfe ? &*rfe : nullptr};
  const auto rows = harness::ablation_suite(rs.spec, models, groups, v);
  s.log("ablate: " + std::to_string(rows.size()) + " rows");
  const std::string base = "ablation_" + harness::spec_hash(rs.spec);
  s.stage(out / (base + ".csv"), harness::results_csv(rows));
  s.stage(out / (base + ".json"), harness::results_json(rs.spec, rows).dump(2) + "\n");
}

inline void cmd_export_path(Session& s, const RunSettings& rs, const fs::path& out) {
  const auto in = resolve(out, rs.paths.path);
  const auto path = sampler::decode_path(s.read_input(in));
  const bool csv = rs.export_format == ExportFormat::csv;
  s.stage(out / (csv ? "path_export.csv" : "path_export.jsonl"), export_path_text(path, rs.export_format));
}

}  // namespace detail

/// Entry point. args excludes the program name. 0 ok, 1 domain error, 2 usage error.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  auto list = [] {
    std::string s;
    for (const auto& c : command_names()) s += (s.empty() ? "" : ", ") + c;
    return s;
  };
  CLI::App app{"Constrained flow-matching trajectory planner", "cfmplan"};
  app.require_subcommand(0, 1);
  RunOptions o;
  std::string seed_text;
  std::string modules_text;
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", o.config, "TOML config file")->required();
    sub->add_option("--out", o.out, "output directory (default: .)");
    sub->add_option("--seed", seed_text, "master seed override (u64)");
    sub->add_flag("-q,--quiet", o.quiet, "suppress progress");
    if (name == "eval" || name == "ablate") sub->add_option("--modules", modules_text, "cvf,cf,rfe,ras");
    subs[name] = sub;
  }

  if (args.empty()) {
    err << "usage: cfmplan <command> --config <path> [--out <dir>] [--seed <u64>] [-q]\ncommands: " << list() << '\n';
    return 2;
  }
  if (args.front().rfind('-', 0) != 0 && !subs.count(args.front())) {
    err << "unknown command '" << args.front() << "'\ncommands: " << list() << '\n';
    return 2;
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return e.get_exit_code() == 0 ? 0 : 2;
  }
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) o.command = name;
  if (o.command.empty()) {
    err << "no command given\ncommands: " << list() << '\n';
    return 2;
  }

  RunSettings rs;
  try {
    if (!seed_text.empty()) {
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(seed_text, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != seed_text.size() || seed_text.front() == '-') throw UsageError("--seed: expected an unsigned integer, got '" + seed_text + "'");
      o.seed = v;
    }
    if (!fs::exists(o.config)) throw UsageError("config file not found: " + o.config.string());
    rs = load_config(o.config);
    if (o.seed) rs.spec.seed = *o.seed;
    if (!rs.sampler_seed_set) rs.spec.eval.sampler.seed = derive_seed(rs.spec.seed, SeedStream::sampler);
    auto* sub = app.get_subcommand(o.command);
    if (sub->get_option_no_throw("--modules") && sub->count("--modules") > 0) {
      rs.spec.modules = parse_modules(modules_text);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << o.config.string() << ": " << e.what() << '\n';
    return 2;
  }

  try {
    detail::Session s(o, rs, err);
    static const std::map<std::string, std::function<void(detail::Session&, const RunSettings&, const fs::path&)>>
        table{{"gen-data", detail::cmd_gen_data}, {"build-vocab", detail::cmd_build_vocab},
              {"train", detail::cmd_train},       {"sample", detail::cmd_sample},
              {"eval", detail::cmd_eval},         {"ablate", detail::cmd_ablate},
              {"export-path", detail::cmd_export_path}};
    table.at(o.command)(s, rs, o.out);
    s.commit(out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace cfmplan::cli
