#pragma once

#include "cmreg/state.hpp"

namespace cmreg {

// Discrete per-subspace action candidates, ordered by magnitude so that a
// first-strictly-greater argmax breaks ties toward the smaller move.
struct ActionSpec {
  int n_rotation = 1;     // yaw (about +Y); the planar protocol uses 1
  int n_translation = 2;  // camera-frame x and z
  std::vector<double> rotation_deg = {0.0,   0.1,  -0.1,  0.5,  -0.5, 2.5,
                                      -2.5, 12.5, -12.5, 62.5, -62.5};
  std::vector<double> translation_m = {0.0,  0.1, -0.1, 0.3, -0.3, 0.9,
                                       -0.9, 2.7, -2.7, 8.1, -8.1};

  int candidates() const { return static_cast<int>(rotation_deg.size()); }
  int subspaces() const { return n_rotation + n_translation; }
  bool is_rotation(int subspace) const { return subspace < n_rotation; }
  const std::vector<double>& candidates_of(int subspace) const {
    return is_rotation(subspace) ? rotation_deg : translation_m;
  }
  void validate() const;
};

// Raw policy outputs for one state, detached from any graph.
struct PolicyOutput {
  int subspaces = 0, candidates = 0;
  std::vector<float> logits;  // {subspaces, candidates}
  float value = 0.0f;
};

enum class SelectMode { kGreedy, kSample };

struct ActionSelection {
  std::vector<int> indices;     // one candidate index per subspace
  std::vector<float> log_probs;  // log pi(a|s) per subspace
};

class PolicyNet {
 public:
  PolicyNet(ad::ParameterStore& ps, int state_dim, const ActionSpec& spec, int hidden,
            std::mt19937& rng);

  struct Out {
    ad::Var logits;  // {subspaces, candidates}
    ad::Var value;   // {1, 1}
  };
  Out forward(ad::Graph& g, const ad::Var& state) const;  // state {1, state_dim}
  PolicyOutput infer(const std::vector<float>& state) const;

 private:
  int subspaces_, candidates_;
  ad::Linear t1_, t2_, policy_, value_;
};

ActionSelection select_actions(const PolicyOutput& out, SelectMode mode,
                               std::mt19937_64& rng);

// Pose increment of one joint action, applied via disentangled composition.
Se3Pose actions_to_transform(const std::vector<int>& indices, const ActionSpec& spec);

// Residual gt ∘ current⁻¹ still to be applied by future actions.
Se3Pose pose_residual(const Se3Pose& gt, const Se3Pose& current);

// Nearest candidate per subspace to the residual's yaw / planar components;
// ties prefer the smaller magnitude. Residual rotation outside pure yaw is
// projected onto its nearest yaw.
std::vector<int> expert_actions(const Se3Pose& residual, const ActionSpec& spec);

// Mean cross-entropy between per-subspace logits {S, Na} and expert labels.
ad::Var bc_loss(ad::Graph& g, const ad::Var& logits, const std::vector<int>& labels);

// Trainable registration agent: hybrid-state encoders plus the policy trunk.
struct AgentConfig {
  StateConfig state;
  ActionSpec actions;
  int trunk_hidden = 256;
};

struct Agent {
  AgentConfig cfg;
  ad::ParameterStore store;
  std::mt19937 init_rng;
  StateEncoder2d enc2d;
  StateEncoder3d enc3d;
  PolicyNet policy;

  Agent(const AgentConfig& cfg, int height, int width, uint64_t seed);
  void save(const std::string& path) const { store.save(path); }
  void load(const std::string& path) { store.load(path); }
};

}  // namespace cmreg
