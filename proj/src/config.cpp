#include "cmreg/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cmreg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  size_t used = 0;
  double d;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: value '" + v + "' for '" + key +
                                "' is not a number");
  }
  if (used != v.size())
    throw std::invalid_argument("config: trailing characters in value for '" + key + "'");
  return d;
}

int to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  const int i = static_cast<int>(d);
  if (d != i)
    throw std::invalid_argument("config: value for '" + key + "' must be an integer");
  return i;
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty())
    throw std::invalid_argument("config: empty list for '" + key + "'");
  return out;
}

}  // namespace

void apply_config_entry(FullConfig& cfg, const std::string& key, const std::string& value) {
  auto d = [&] { return to_double(key, value); };
  auto i = [&] { return to_int(key, value); };
  auto f = [&] { return static_cast<float>(to_double(key, value)); };

  // scene
  if (key == "scene.n_points") cfg.scene.n_points = i();
  else if (key == "scene.width") cfg.scene.width = i();
  else if (key == "scene.height") cfg.scene.height = i();
  else if (key == "scene.ground_extent") cfg.scene.ground_extent = d();
  else if (key == "scene.ground_fraction") cfg.scene.ground_fraction = d();
  else if (key == "scene.min_boxes") cfg.scene.min_boxes = i();
  else if (key == "scene.max_boxes") cfg.scene.max_boxes = i();
  else if (key == "scene.min_box_size") cfg.scene.min_box_size = d();
  else if (key == "scene.max_box_size") cfg.scene.max_box_size = d();
  else if (key == "scene.min_walls") cfg.scene.min_walls = i();
  else if (key == "scene.max_walls") cfg.scene.max_walls = i();
  else if (key == "scene.min_wall_length") cfg.scene.min_wall_length = d();
  else if (key == "scene.max_wall_length") cfg.scene.max_wall_length = d();
  else if (key == "scene.min_wall_height") cfg.scene.min_wall_height = d();
  else if (key == "scene.max_wall_height") cfg.scene.max_wall_height = d();
  else if (key == "scene.object_spread") cfg.scene.object_spread = d();
  else if (key == "scene.fx") cfg.scene.fx = d();
  else if (key == "scene.fy") cfg.scene.fy = d();
  else if (key == "scene.near") cfg.scene.near = d();
  else if (key == "scene.far") cfg.scene.far = d();
  else if (key == "scene.min_camera_radius") cfg.scene.min_camera_radius = d();
  else if (key == "scene.max_camera_radius") cfg.scene.max_camera_radius = d();
  else if (key == "scene.min_camera_height") cfg.scene.min_camera_height = d();
  else if (key == "scene.max_camera_height") cfg.scene.max_camera_height = d();
  else if (key == "scene.lookat_jitter") cfg.scene.lookat_jitter = d();
  // perturbation
  else if (key == "perturb.max_yaw_deg") {
    cfg.perturb.max_yaw_deg = d();
    cfg.train.perturb.max_yaw_deg = cfg.perturb.max_yaw_deg;
  } else if (key == "perturb.max_planar_m") {
    cfg.perturb.max_planar_m = d();
    cfg.train.perturb.max_planar_m = cfg.perturb.max_planar_m;
  }
  // embeddings
  else if (key == "embed.f") {
    cfg.embed.f = i();
    cfg.agent.state.f = cfg.embed.f;
  } else if (key == "embed.positive_radius_px") cfg.embed.positive_radius_px = d();
  else if (key == "embed.lambda") cfg.embed.lambda = f();
  else if (key == "embed.delta_pos") cfg.embed.delta_pos = f();
  else if (key == "embed.delta_neg") cfg.embed.delta_neg = f();
  else if (key == "embed.n_anchors") cfg.embed.n_anchors = i();
  else if (key == "embed.knn_k") cfg.embed.knn_k = i();
  // hybrid state
  else if (key == "state.f_prime") cfg.agent.state.f_prime = i();
  else if (key == "state.conv1_channels") cfg.agent.state.conv1_channels = i();
  else if (key == "state.conv2_channels") cfg.agent.state.conv2_channels = i();
  else if (key == "state.mlp2d_hidden") cfg.agent.state.mlp2d_hidden = i();
  else if (key == "state.mlp3d_h1") cfg.agent.state.mlp3d_h1 = i();
  else if (key == "state.mlp3d_h2") cfg.agent.state.mlp3d_h2 = i();
  else if (key == "state.mlp3d_h3") cfg.agent.state.mlp3d_h3 = i();
  // agent
  else if (key == "agent.n_rotation") cfg.agent.actions.n_rotation = i();
  else if (key == "agent.n_translation") cfg.agent.actions.n_translation = i();
  else if (key == "agent.rotation_deg") cfg.agent.actions.rotation_deg = to_list(key, value);
  else if (key == "agent.translation_m") cfg.agent.actions.translation_m = to_list(key, value);
  else if (key == "agent.trunk_hidden") cfg.agent.trunk_hidden = i();
  // training
  else if (key == "train.pretrain_epochs") cfg.train.pretrain_epochs = i();
  else if (key == "train.pretrain_lr") cfg.train.pretrain_lr = f();
  else if (key == "train.bc_epochs") cfg.train.bc_epochs = i();
  else if (key == "train.bc_lr") cfg.train.bc_lr = f();
  else if (key == "train.joint_epochs") cfg.train.joint_epochs = i();
  else if (key == "train.joint_lr") cfg.train.joint_lr = f();
  else if (key == "train.episodes_per_epoch") cfg.train.episodes_per_epoch = i();
  else if (key == "train.val_scenes") cfg.train.val_scenes = i();
  else if (key == "train.gamma") cfg.train.gae.gamma = f();
  else if (key == "train.lambda_gae") cfg.train.gae.lambda = f();
  else if (key == "train.clip") cfg.train.ppo.clip = f();
  else if (key == "train.value_coef") cfg.train.ppo.value_coef = f();
  else if (key == "train.entropy_coef") cfg.train.ppo.entropy_coef = f();
  else if (key == "train.bc_coef") cfg.train.ppo.bc_coef = f();
  else if (key == "train.epochs_per_batch") cfg.train.ppo.epochs_per_batch = i();
  else if (key == "train.minibatch") cfg.train.ppo.minibatch = i();
  else if (key == "train.episode_length") cfg.train.ppo.episode_length = i();
  // evaluation
  else if (key == "eval.tau_r_deg") cfg.eval_tau_r_deg = d();
  else if (key == "eval.tau_t_m") cfg.eval_tau_t_m = d();
  else if (key == "eval.iterations") cfg.eval_iterations = i();
  else
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

FullConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  FullConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " has no '='");
    apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace cmreg
