#pragma once

#include "cmreg/agent.hpp"

namespace cmreg {

// Fixed per-episode reward geometry: the gt in-frustum points and their
// reconstruction through ground-truth projection + back-projection.
struct RewardContext {
  PointCloud frustum_points;  // world frame, the gt-visible subset
  PointCloud reconstructed;   // camera frame, row-aligned with frustum_points
  double reward_negative = -0.5;
  double reward_pause = 0.0;
  double reward_positive = 0.5;
  double pause_tolerance = 1e-6;  // meters

  void validate() const;
};

RewardContext build_reward_context(const ScenePair& scene);

// Mean distance between the reconstruction and the frustum points mapped
// through the candidate pose.
double p2p_distance(const RewardContext& ctx, const Se3Pose& pose);

// Three-branch step reward: positive when the distance shrank by more than
// the pause tolerance, pause-zero within it, negative otherwise.
double step_reward(double d_before, double d_after, const RewardContext& ctx);

struct Transition {
  std::vector<float> state;
  std::vector<int> actions;
  std::vector<float> log_probs;
  float reward = 0.0f;
  float value = 0.0f;
  std::vector<int> expert_labels;
  bool done = false;
};

struct GaeConfig {
  float gamma = 0.99f;
  float lambda = 0.95f;
  void validate() const;
};

struct PpoConfig {
  float clip = 0.2f;
  float value_coef = 0.5f;
  float entropy_coef = 0.01f;
  float bc_coef = 1.0f;
  int epochs_per_batch = 4;
  int minibatch = 64;
  int episode_length = 10;
  void validate() const;
};

struct RolloutResult {
  std::vector<Transition> transitions;
  std::vector<Se3Pose> poses;  // pose before each step, length transitions+1
  std::vector<PoseError> per_iteration;  // error after each step
  int expert_matches = 0;  // greedy-argmax vs expert agreements, per subspace
  int expert_slots = 0;
};

// One full episode: one-shot embeddings, then iterate state -> policy ->
// action -> disentangled pose update, recording transitions and expert labels.
// Deterministic per seed.
RolloutResult rollout_episode(const ScenePair& scene, const ad::Var& point_feats,
                              EncoderSet& encoders, const Agent& agent, SelectMode mode,
                              uint64_t seed, int length, const PerturbSpec& perturb);

// Variant that also hands back the episode context (for training passes that
// rebuild states along the visited poses without re-embedding).
RolloutResult rollout_episode(const ScenePair& scene, const ad::Var& point_feats,
                              EncoderSet& encoders, const Agent& agent, SelectMode mode,
                              uint64_t seed, int length, const PerturbSpec& perturb,
                              EpisodeContext* ctx_out);

// Standard GAE with terminal bootstrap value 0; returns = advantages + values.
std::pair<std::vector<float>, std::vector<float>> compute_gae(
    const std::vector<float>& rewards, const std::vector<float>& values,
    const GaeConfig& cfg);

struct PpoBatchItem {
  const Transition* tr = nullptr;
  float advantage = 0.0f;  // already normalized over the batch
  float ret = 0.0f;
  PolicyNet::Out out;  // fresh recorded forward on tr->state
};

struct PpoLossParts {
  ad::Var policy, value, entropy, bc, total;
};

// Clipped-surrogate policy loss, squared-error value loss, mean per-subspace
// entropy, behavioral-cloning cross-entropy;
// total = policy + value_coef*value - entropy_coef*entropy + bc_coef*bc.
PpoLossParts ppo_losses(ad::Graph& g, const std::vector<PpoBatchItem>& batch,
                        const PpoConfig& cfg);

struct TrainConfig {
  // phase 1: encoder pretraining (circle loss + weighted BCE)
  int pretrain_epochs = 6;
  float pretrain_lr = 1e-3f;
  // phase 2a: behavioral cloning on states visited by the stochastic policy
  int bc_epochs = 12;
  float bc_lr = 1e-3f;
  // phase 2b: joint PPO + BC over the replay buffer (trunk and heads only)
  int joint_epochs = 0;
  float joint_lr = 3e-4f;

  int episodes_per_epoch = 24;
  int val_scenes = 8;  // taken from the tail of the dataset
  double val_tau_r_deg = 10.0;
  double val_tau_t_m = 5.0;
  PerturbSpec perturb;
  GaeConfig gae;
  PpoConfig ppo;

  void validate() const;
};

// Phase 1 only; also usable standalone via the `pretrain` CLI verb. Writes
// per-epoch rows "epoch,circle_loss,bce_loss" when metrics_path is non-empty.
void pretrain_encoders(EncoderSet& encoders, const std::vector<ScenePair>& scenes,
                       int epochs, float lr, uint64_t seed,
                       const std::string& metrics_path);

// Full training: pretrain encoders, freeze them, then behavioral cloning and
// joint PPO+BC. Writes <out_dir>/metrics.csv, encoders.ckpt, and agent.ckpt.
// Throws with a diagnostics message if any loss becomes non-finite.
void train(Agent& agent, EncoderSet& encoders, const std::vector<ScenePair>& dataset,
           const TrainConfig& cfg, uint64_t seed, const std::string& out_dir);

}  // namespace cmreg
