#include "cmreg/evalcli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cmreg/config.hpp"

namespace cmreg {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::vector<ScenePair> load_dataset(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".bin")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw std::runtime_error("no .bin sample files found in '" + dir + "'");
  std::vector<ScenePair> scenes;
  scenes.reserve(files.size());
  for (const auto& f : files) scenes.push_back(load_sample(f));
  return scenes;
}

Agent make_agent(const FullConfig& cfg, const ScenePair& scene, uint64_t seed) {
  return Agent(cfg.agent, scene.intrinsics.height, scene.intrinsics.width, seed);
}

}  // namespace

void RecallSpec::validate() const {
  if (tau_r_deg <= 0.0 || tau_t_m <= 0.0)
    throw std::invalid_argument("recall spec: thresholds must be positive");
}

double registration_recall(const std::vector<PoseError>& errors, const RecallSpec& spec) {
  spec.validate();
  if (errors.empty())
    throw std::invalid_argument("registration recall: empty error list");
  int hits = 0;
  for (const auto& e : errors)
    if (e.rre_deg < spec.tau_r_deg && e.rte_m < spec.tau_t_m) ++hits;
  return static_cast<double>(hits) / errors.size();
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "iteration,rte_mean,rte_std,rre_mean,rre_std,rr,mean_time_ms\n";
  for (const auto& r : rows)
    out << r.iteration << ',' << r.rte_mean << ',' << r.rte_std << ',' << r.rre_mean
        << ',' << r.rre_std << ',' << r.recall << ',' << r.mean_time_ms << '\n';
  return out.str();
}

std::vector<double> EvalReport::recall_series() const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.recall);
  return out;
}

EvalReport evaluate(const Agent& agent, EncoderSet& encoders,
                    const std::vector<ScenePair>& scenes, int iterations,
                    const RecallSpec& spec, const PerturbSpec& perturb, uint64_t seed,
                    EvalPolicy policy, bool measure_time) {
  spec.validate();
  if (iterations < 1) throw std::invalid_argument("evaluate: iterations must be >= 1");
  if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");

  // errors[k][s]: error after iteration k+1 on scene s
  std::vector<std::vector<PoseError>> errors(iterations);
  std::vector<double> time_ms(iterations, 0.0);

  for (size_t s = 0; s < scenes.size(); ++s) {
    const ScenePair& scene = scenes[s];
    std::optional<EpisodeContext> ctx;
    if (policy == EvalPolicy::kAgent) {
      auto feats =
          compute_point_features(scene.points, scene.intensities, encoders.cfg.knn_k);
      ctx = make_episode_context(scene, encoders, agent.enc2d, feats);
    }
    PerturbSpec p = perturb;
    p.seed = mix_seed(seed, s);
    Se3Pose pose = perturb_pose(scene.gt_pose, p);

    for (int k = 0; k < iterations; ++k) {
      const auto t0 = Clock::now();
      std::vector<int> indices;
      if (policy == EvalPolicy::kAgent) {
        ad::Graph g(false);
        auto built = build_hybrid_state(g, *ctx, agent.enc2d, agent.enc3d, pose);
        const PolicyOutput out = agent.policy.infer(built.state->val);
        std::mt19937_64 unused(0);
        indices = select_actions(out, SelectMode::kGreedy, unused).indices;
      } else {
        indices = expert_actions(pose_residual(scene.gt_pose, pose), agent.cfg.actions);
      }
      pose = compose_disentangled(actions_to_transform(indices, agent.cfg.actions), pose);
      if (measure_time)
        time_ms[k] += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      errors[k].push_back(pose_error(pose, scene.gt_pose));
    }
  }

  EvalReport report;
  for (int k = 0; k < iterations; ++k) {
    EvalRow row;
    row.iteration = k + 1;
    const auto& errs = errors[k];
    for (const auto& e : errs) {
      row.rte_mean += e.rte_m;
      row.rre_mean += e.rre_deg;
    }
    row.rte_mean /= errs.size();
    row.rre_mean /= errs.size();
    for (const auto& e : errs) {
      row.rte_std += (e.rte_m - row.rte_mean) * (e.rte_m - row.rte_mean);
      row.rre_std += (e.rre_deg - row.rre_mean) * (e.rre_deg - row.rre_mean);
    }
    row.rte_std = std::sqrt(row.rte_std / errs.size());
    row.rre_std = std::sqrt(row.rre_std / errs.size());
    row.recall = registration_recall(errs, spec);
    row.mean_time_ms = measure_time ? time_ms[k] / scenes.size() : 0.0;
    report.rows.push_back(row);
  }
  return report;
}

void render_overlay(const ScenePair& scene, const Se3Pose& pose, const std::string& path) {
  if (!pose.is_valid(1e-6)) throw std::invalid_argument("render overlay: invalid pose");
  const int w = scene.intrinsics.width, h = scene.intrinsics.height;
  const DepthMap dm = render_depth_map(scene.points, scene.intrinsics, pose);

  std::vector<uint8_t> pixels(static_cast<size_t>(w) * h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const size_t px = static_cast<size_t>(v) * w + u;
      double value = scene.image[px];
      if (dm.filled(u, v)) {
        // nearer points blend brighter
        const double shade = 1.0 - std::clamp(dm.at(u, v) / scene.intrinsics.far, 0.0, 1.0);
        value = 0.5 * value + 0.5 * shade;
      }
      pixels[px] = static_cast<uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
    }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("render overlay: cannot open '" + path + "'");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw std::runtime_error("render overlay: write failed for '" + path + "'");
}

int cli_main(int argc, char** argv) {
  CLI::App app{"iterative image-to-point-cloud registration pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the verb

  std::string config_path, out_path = ".", data_path, encoders_path, agent_path;
  uint64_t seed = 0;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--seed", seed, "base random seed");
  app.add_option("--out", out_path, "output file or directory");

  auto* gen = app.add_subcommand("gen", "generate a synthetic scene dataset");
  int gen_count = 10;
  gen->add_option("--count", gen_count, "number of scenes");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the one-shot encoders");
  pretrain->add_option("--data", data_path, "sample directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train the registration agent");
  train_cmd->add_option("--data", data_path, "sample directory")->required();
  train_cmd->add_option("--encoders", encoders_path,
                        "pretrained encoder checkpoint (skips phase 1)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate over an iteration sweep");
  eval_cmd->add_option("--data", data_path, "sample directory")->required();
  eval_cmd->add_option("--encoders", encoders_path, "encoder checkpoint");
  eval_cmd->add_option("--agent", agent_path, "agent checkpoint");
  bool eval_expert = false, eval_no_time = false;
  int eval_iterations = 0;
  eval_cmd->add_flag("--expert", eval_expert, "substitute the greedy expert policy");
  eval_cmd->add_flag("--no-time", eval_no_time, "zero the timing column");
  eval_cmd->add_option("--iterations", eval_iterations, "override iteration count");

  auto* demo = app.add_subcommand("demo", "render per-iteration overlay frames");
  demo->add_option("--data", data_path, "one sample file")->required();
  demo->add_option("--encoders", encoders_path, "encoder checkpoint");
  demo->add_option("--agent", agent_path, "agent checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n' << app.help();
    return 1;
  }

  try {
    FullConfig cfg = config_path.empty() ? FullConfig{} : load_config(config_path);

    if (gen->parsed()) {
      fs::create_directories(out_path);
      for (int i = 0; i < gen_count; ++i) {
        SceneConfig sc = cfg.scene;
        sc.seed = mix_seed(seed, i);
        std::ostringstream name;
        name << out_path << "/sample_" << std::setw(4) << std::setfill('0') << i << ".bin";
        save_sample(generate_scene(sc), name.str());
      }
      return 0;
    }

    if (pretrain->parsed()) {
      fs::create_directories(out_path);
      auto scenes = load_dataset(data_path);
      EncoderSet encoders(cfg.embed, mix_seed(seed, 11));
      pretrain_encoders(encoders, scenes, cfg.train.pretrain_epochs, cfg.train.pretrain_lr,
                        seed, out_path + "/pretrain_metrics.csv");
      encoders.save(out_path + "/encoders.ckpt");
      return 0;
    }

    if (train_cmd->parsed()) {
      fs::create_directories(out_path);
      auto scenes = load_dataset(data_path);
      EncoderSet encoders(cfg.embed, mix_seed(seed, 11));
      TrainConfig tc = cfg.train;
      if (!encoders_path.empty()) {
        encoders.load(encoders_path);
        tc.pretrain_epochs = 0;
      }
      Agent agent = make_agent(cfg, scenes.front(), mix_seed(seed, 13));
      train(agent, encoders, scenes, tc, seed, out_path);
      return 0;
    }

    if (eval_cmd->parsed()) {
      auto scenes = load_dataset(data_path);
      EncoderSet encoders(cfg.embed, mix_seed(seed, 11));
      Agent agent = make_agent(cfg, scenes.front(), mix_seed(seed, 13));
      if (!encoders_path.empty()) encoders.load(encoders_path);
      if (!agent_path.empty()) agent.load(agent_path);
      RecallSpec spec{cfg.eval_tau_r_deg, cfg.eval_tau_t_m};
      const int iters = eval_iterations > 0 ? eval_iterations : cfg.eval_iterations;
      EvalReport report = evaluate(agent, encoders, scenes, iters, spec, cfg.perturb,
                                   seed, eval_expert ? EvalPolicy::kExpert : EvalPolicy::kAgent,
                                   !eval_no_time);
      std::ofstream out(out_path, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot open '" + out_path + "' for writing");
      out << report.to_csv();
      return 0;
    }

    if (demo->parsed()) {
      fs::create_directories(out_path);
      const ScenePair scene = load_sample(data_path);
      EncoderSet encoders(cfg.embed, mix_seed(seed, 11));
      Agent agent = make_agent(cfg, scene, mix_seed(seed, 13));
      if (!encoders_path.empty()) encoders.load(encoders_path);
      if (!agent_path.empty()) agent.load(agent_path);

      auto feats = compute_point_features(scene.points, scene.intensities,
                                          encoders.cfg.knn_k);
      auto rollout = rollout_episode(scene, feats, encoders, agent, SelectMode::kGreedy,
                                     seed, cfg.eval_iterations, cfg.perturb);
      for (size_t k = 0; k < rollout.poses.size(); ++k) {
        std::ostringstream name;
        name << out_path << "/frame_" << std::setw(2) << std::setfill('0') << k << ".pgm";
        render_overlay(scene, rollout.poses[k], name.str());
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace cmreg
