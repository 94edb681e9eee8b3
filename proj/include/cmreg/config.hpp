#pragma once

#include "cmreg/train.hpp"

namespace cmreg {

// Every tunable default in one place; populated from `key = value` files.
struct FullConfig {
  SceneConfig scene;
  PerturbSpec perturb;
  EmbedConfig embed;
  AgentConfig agent;
  TrainConfig train;
  double eval_tau_r_deg = 10.0;
  double eval_tau_t_m = 5.0;
  int eval_iterations = 10;
};

// Applies one namespaced key (e.g. "train.gamma", "agent.rotation_deg").
// Throws std::invalid_argument on unknown keys or malformed values.
void apply_config_entry(FullConfig& cfg, const std::string& key,
                        const std::string& value);

// Plain-text config: one `key = value` per line, `#` starts a comment,
// blank lines ignored.
FullConfig load_config(const std::string& path);

}  // namespace cmreg
