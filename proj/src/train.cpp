#include "cmreg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cmreg {

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v))
    throw std::runtime_error("training aborted: non-finite " + what +
                             " (value = " + std::to_string(v) + ")");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

// Greedy per-subspace argmax over raw logits; first maximum wins so ties
// resolve to the smaller candidate magnitude.
std::vector<int> greedy_indices(const PolicyOutput& out) {
  std::vector<int> picks(out.subspaces, 0);
  for (int s = 0; s < out.subspaces; ++s) {
    const float* row = out.logits.data() + static_cast<size_t>(s) * out.candidates;
    for (int c = 1; c < out.candidates; ++c)
      if (row[c] > row[picks[s]]) picks[s] = c;
  }
  return picks;
}

struct ValMetrics {
  double rre = 0.0, rte = 0.0, rr = 0.0;
};

ValMetrics validate_agent(const Agent& agent, EncoderSet& encoders,
                          const std::vector<const ScenePair*>& scenes,
                          const std::vector<ad::Var>& feats, const TrainConfig& cfg,
                          uint64_t seed) {
  ValMetrics m;
  if (scenes.empty()) return m;
  int hits = 0;
  for (size_t i = 0; i < scenes.size(); ++i) {
    auto rr = rollout_episode(*scenes[i], feats[i], encoders, agent, SelectMode::kGreedy,
                              mix_seed(seed, i), cfg.ppo.episode_length, cfg.perturb);
    const PoseError err = rr.per_iteration.back();
    m.rre += err.rre_deg;
    m.rte += err.rte_m;
    if (err.rre_deg < cfg.val_tau_r_deg && err.rte_m < cfg.val_tau_t_m) ++hits;
  }
  m.rre /= scenes.size();
  m.rte /= scenes.size();
  m.rr = static_cast<double>(hits) / scenes.size();
  return m;
}

}  // namespace

void RewardContext::validate() const {
  if (reward_negative > 0.0 || reward_pause > 0.0 || reward_positive <= 0.0)
    throw std::invalid_argument("reward context: need eps- <= 0, eps0 <= 0, eps+ > 0");
  if (frustum_points.size() != reconstructed.size())
    throw std::invalid_argument("reward context: point rows misaligned");
  if (pause_tolerance < 0.0)
    throw std::invalid_argument("reward context: tolerance must be non-negative");
}

RewardContext build_reward_context(const ScenePair& scene) {
  RewardContext ctx;
  for (size_t i = 0; i < scene.points.size(); ++i) {
    if (!scene.gt_frustum_labels[i]) continue;
    const auto pd = project_point(scene.points[i], scene.intrinsics, scene.gt_pose);
    if (!pd) continue;  // border cases between label pass and re-projection
    ctx.frustum_points.push_back(scene.points[i]);
    ctx.reconstructed.push_back(
        back_project(pd->pixel, pd->depth, scene.intrinsics, Se3Pose::identity()));
  }
  if (ctx.frustum_points.empty())
    throw std::runtime_error("reward context: no points in the ground-truth frustum");
  return ctx;
}

double p2p_distance(const RewardContext& ctx, const Se3Pose& pose) {
  if (ctx.frustum_points.empty())
    throw std::runtime_error("p2p distance: empty frustum point set");
  double total = 0.0;
  for (size_t i = 0; i < ctx.frustum_points.size(); ++i)
    total += (ctx.reconstructed[i] - pose.apply(ctx.frustum_points[i])).norm();
  return total / ctx.frustum_points.size();
}

double step_reward(double d_before, double d_after, const RewardContext& ctx) {
  if (d_before < 0.0 || d_after < 0.0)
    throw std::invalid_argument("step reward: distances must be non-negative");
  if (d_after < d_before - ctx.pause_tolerance) return ctx.reward_positive;
  if (d_after > d_before + ctx.pause_tolerance) return ctx.reward_negative;
  return ctx.reward_pause;
}

RolloutResult rollout_episode(const ScenePair& scene, const ad::Var& point_feats,
                              EncoderSet& encoders, const Agent& agent, SelectMode mode,
                              uint64_t seed, int length, const PerturbSpec& perturb,
                              EpisodeContext* ctx_out) {
  if (length < 1) throw std::invalid_argument("rollout: length must be >= 1");
  EpisodeContext ctx = make_episode_context(scene, encoders, agent.enc2d, point_feats);
  const RewardContext reward_ctx = build_reward_context(scene);

  PerturbSpec p = perturb;
  p.seed = mix_seed(seed, 0xC0);
  Se3Pose pose = perturb_pose(scene.gt_pose, p);
  std::mt19937_64 rng(mix_seed(seed, 0xA1));

  RolloutResult result;
  result.poses.push_back(pose);
  double d_before = p2p_distance(reward_ctx, pose);

  for (int k = 0; k < length; ++k) {
    ad::Graph g(false);
    const BuiltState built = build_hybrid_state(g, ctx, agent.enc2d, agent.enc3d, pose);
    const PolicyOutput out = agent.policy.infer(built.state->val);
    const ActionSelection sel = select_actions(out, mode, rng);
    const std::vector<int> expert =
        expert_actions(pose_residual(scene.gt_pose, pose), agent.cfg.actions);

    const std::vector<int> greedy = greedy_indices(out);
    for (size_t s = 0; s < expert.size(); ++s) {
      ++result.expert_slots;
      if (greedy[s] == expert[s]) ++result.expert_matches;
    }

    const Se3Pose increment = actions_to_transform(sel.indices, agent.cfg.actions);
    pose = compose_disentangled(increment, pose);
    const double d_after = p2p_distance(reward_ctx, pose);

    Transition tr;
    tr.state = built.state->val;
    tr.actions = sel.indices;
    tr.log_probs = sel.log_probs;
    tr.value = out.value;
    tr.reward = static_cast<float>(step_reward(d_before, d_after, reward_ctx));
    tr.expert_labels = expert;
    tr.done = (k == length - 1);
    result.transitions.push_back(std::move(tr));
    result.poses.push_back(pose);
    result.per_iteration.push_back(pose_error(pose, scene.gt_pose));
    d_before = d_after;
  }
  if (ctx_out) *ctx_out = std::move(ctx);
  return result;
}

RolloutResult rollout_episode(const ScenePair& scene, const ad::Var& point_feats,
                              EncoderSet& encoders, const Agent& agent, SelectMode mode,
                              uint64_t seed, int length, const PerturbSpec& perturb) {
  return rollout_episode(scene, point_feats, encoders, agent, mode, seed, length, perturb,
                         nullptr);
}

void GaeConfig::validate() const {
  if (gamma < 0.0f || gamma > 1.0f || lambda < 0.0f || lambda > 1.0f)
    throw std::invalid_argument("gae config: gamma and lambda must be in [0,1]");
}

void PpoConfig::validate() const {
  if (clip <= 0.0f || clip >= 1.0f)
    throw std::invalid_argument("ppo config: clip must be in (0,1)");
  if (value_coef <= 0.0f || entropy_coef <= 0.0f || bc_coef < 0.0f)
    throw std::invalid_argument("ppo config: coefficients must be positive");
  if (epochs_per_batch <= 0 || minibatch <= 0 || episode_length <= 0)
    throw std::invalid_argument("ppo config: sizes must be positive");
}

std::pair<std::vector<float>, std::vector<float>> compute_gae(
    const std::vector<float>& rewards, const std::vector<float>& values,
    const GaeConfig& cfg) {
  cfg.validate();
  if (rewards.size() != values.size())
    throw std::invalid_argument("gae: rewards and values must have equal length");
  const int n = static_cast<int>(rewards.size());
  std::vector<float> adv(n, 0.0f), ret(n, 0.0f);
  float carry = 0.0f;
  for (int t = n - 1; t >= 0; --t) {
    const float next_v = (t + 1 < n) ? values[t + 1] : 0.0f;  // terminal bootstrap 0
    const float delta = rewards[t] + cfg.gamma * next_v - values[t];
    carry = delta + cfg.gamma * cfg.lambda * carry;
    adv[t] = carry;
    ret[t] = adv[t] + values[t];
  }
  return {std::move(adv), std::move(ret)};
}

PpoLossParts ppo_losses(ad::Graph& g, const std::vector<PpoBatchItem>& batch,
                        const PpoConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("ppo losses: empty batch");
  const float inv_n = 1.0f / static_cast<float>(batch.size());

  ad::Var policy_sum, value_sum, entropy_sum, bc_sum;
  for (const auto& item : batch) {
    const Transition& tr = *item.tr;
    const int s = item.out.logits->shape[0];
    const float inv_s = 1.0f / static_cast<float>(s);

    auto lsm = g.log_softmax_rows(item.out.logits);
    auto new_lp = g.gather_rows(lsm, tr.actions);  // {S}
    auto old_lp = ad::make_var({s}, tr.log_probs);
    auto ratio = g.exp(g.sub(new_lp, old_lp));
    auto surr = g.min_elem(g.scale(ratio, item.advantage),
                           g.scale(g.clamp(ratio, 1.0f - cfg.clip, 1.0f + cfg.clip),
                                   item.advantage));
    auto policy_i = g.scale(g.sum_all(surr), -inv_s);

    auto v_err = g.add_const(item.out.value, -item.ret);
    auto value_i = g.sum_all(g.mul(v_err, v_err));

    auto probs = g.exp(lsm);
    auto entropy_i = g.scale(g.sum_all(g.mul(probs, lsm)), -inv_s);

    auto bc_i = bc_loss(g, item.out.logits, tr.expert_labels);

    policy_sum = policy_sum ? g.add(policy_sum, policy_i) : policy_i;
    value_sum = value_sum ? g.add(value_sum, value_i) : value_i;
    entropy_sum = entropy_sum ? g.add(entropy_sum, entropy_i) : entropy_i;
    bc_sum = bc_sum ? g.add(bc_sum, bc_i) : bc_i;
  }

  PpoLossParts parts;
  parts.policy = g.scale(policy_sum, inv_n);
  parts.value = g.scale(value_sum, inv_n);
  parts.entropy = g.scale(entropy_sum, inv_n);
  parts.bc = g.scale(bc_sum, inv_n);
  parts.total = g.add(g.add(parts.policy, g.scale(parts.value, cfg.value_coef)),
                      g.add(g.scale(parts.entropy, -cfg.entropy_coef),
                            g.scale(parts.bc, cfg.bc_coef)));
  return parts;
}

void TrainConfig::validate() const {
  if (pretrain_epochs < 0 || bc_epochs < 0 || joint_epochs < 0)
    throw std::invalid_argument("train config: epoch counts must be non-negative");
  if (pretrain_lr <= 0.0f || bc_lr <= 0.0f || joint_lr <= 0.0f)
    throw std::invalid_argument("train config: learning rates must be positive");
  if (episodes_per_epoch <= 0)
    throw std::invalid_argument("train config: episodes per epoch must be positive");
  if (val_scenes < 0) throw std::invalid_argument("train config: val_scenes must be >= 0");
  perturb.validate();
  gae.validate();
  ppo.validate();
}

void pretrain_encoders(EncoderSet& encoders, const std::vector<ScenePair>& scenes,
                       int epochs, float lr, uint64_t seed,
                       const std::string& metrics_path) {
  if (scenes.empty()) throw std::invalid_argument("pretrain: empty scene list");
  const EmbedConfig& cfg = encoders.cfg;

  std::vector<ad::Var> feats;
  std::vector<ad::Var> images;
  feats.reserve(scenes.size());
  for (const auto& scene : scenes) {
    feats.push_back(compute_point_features(scene.points, scene.intensities, cfg.knn_k));
    images.push_back(make_image_var(scene));
  }

  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics = open_out(metrics_path);
    metrics << "epoch,circle_loss,bce_loss\n";
  }

  for (int epoch = 0; epoch < epochs; ++epoch) {
    double circle_total = 0.0, bce_total = 0.0;
    for (size_t si = 0; si < scenes.size(); ++si) {
      const ScenePair& scene = scenes[si];
      ad::Graph g(true);
      auto pe = encoders.point_encoder.forward(g, feats[si]);
      auto ie = encoders.image_encoder.forward(g, images[si]);

      // anchor batch: in-frustum points paired with their gt pixels
      const auto anchor_idx =
          sample_frustum_points(scene, cfg.n_anchors, mix_seed(seed, epoch * 7919 + si));
      std::vector<int> pixel_idx;
      std::vector<Eigen::Vector2d> pixel_coords;
      pixel_idx.reserve(anchor_idx.size());
      for (int idx : anchor_idx) {
        const auto pd = project_point(scene.points[idx], scene.intrinsics, scene.gt_pose);
        if (!pd) throw std::runtime_error("pretrain: sampled anchor left the frustum");
        pixel_coords.push_back(pd->pixel);
        pixel_idx.push_back(static_cast<int>(std::floor(pd->pixel.y())) *
                                scene.intrinsics.width +
                            static_cast<int>(std::floor(pd->pixel.x())));
      }
      auto anchors = g.take_rows(pe, anchor_idx);
      auto pixels = g.take_rows(ie, pixel_idx);
      auto closs = circle_loss(g, anchors, pixels, pixel_coords, cfg);

      auto prob = encoders.frustum_head.forward(g, pe, ie);
      auto bce = weighted_bce(g, prob, scene.gt_frustum_labels);

      auto loss = g.add(closs, bce);
      check_finite(loss->val[0], "pretraining loss");
      circle_total += closs->val[0];
      bce_total += bce->val[0];

      g.backward(loss);
      encoders.store.adam_step(lr);
      encoders.store.zero_grad();
    }
    if (metrics.is_open())
      metrics << epoch << ',' << circle_total / scenes.size() << ','
              << bce_total / scenes.size() << '\n';
  }
}

void train(Agent& agent, EncoderSet& encoders, const std::vector<ScenePair>& dataset,
           const TrainConfig& cfg, uint64_t seed, const std::string& out_dir) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  std::filesystem::create_directories(out_dir);

  const int n_val = std::min<int>(cfg.val_scenes, static_cast<int>(dataset.size()) - 1);
  const int n_train = static_cast<int>(dataset.size()) - std::max(n_val, 0);

  std::vector<const ScenePair*> train_scenes, val_scenes;
  for (int i = 0; i < n_train; ++i) train_scenes.push_back(&dataset[i]);
  for (int i = n_train; i < static_cast<int>(dataset.size()); ++i)
    val_scenes.push_back(&dataset[i]);

  // phase 1: encoder pretraining on the training split
  {
    std::vector<ScenePair> copy;  // pretrain_encoders owns feature computation
    copy.reserve(train_scenes.size());
    for (const auto* s : train_scenes) copy.push_back(*s);
    pretrain_encoders(encoders, copy, cfg.pretrain_epochs, cfg.pretrain_lr,
                      mix_seed(seed, 1), out_dir + "/pretrain_metrics.csv");
  }

  std::vector<ad::Var> train_feats, val_feats;
  for (const auto* s : train_scenes)
    train_feats.push_back(compute_point_features(s->points, s->intensities,
                                                 encoders.cfg.knn_k));
  for (const auto* s : val_scenes)
    val_feats.push_back(compute_point_features(s->points, s->intensities,
                                               encoders.cfg.knn_k));

  auto metrics = open_out(out_dir + "/metrics.csv");
  metrics << "epoch,policy_loss,value_loss,entropy,bc_loss,mean_reward,"
             "expert_agreement,val_rre,val_rte,val_rr\n";

  std::mt19937_64 rng(mix_seed(seed, 2));
  uint64_t episode_counter = 0;
  int epoch_row = 0;

  auto write_row = [&](double pl, double vl, double ent, double bl, double mr, double ea,
                       const ValMetrics& vm) {
    metrics << epoch_row++ << ',' << pl << ',' << vl << ',' << ent << ',' << bl << ','
            << mr << ',' << ea << ',' << vm.rre << ',' << vm.rte << ',' << vm.rr << '\n';
    metrics.flush();
  };

  // phase 2a: behavioral cloning on the states the stochastic policy visits;
  // gradients reach the state encoders through freshly rebuilt states
  for (int epoch = 0; epoch < cfg.bc_epochs; ++epoch) {
    double bc_total = 0.0, reward_total = 0.0;
    long reward_count = 0, match = 0, slots = 0;
    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      const size_t si = rng() % train_scenes.size();
      EpisodeContext ctx;
      auto rollout = rollout_episode(*train_scenes[si], train_feats[si], encoders, agent,
                                     SelectMode::kSample, mix_seed(seed, 100 + episode_counter),
                                     cfg.ppo.episode_length, cfg.perturb, &ctx);
      ++episode_counter;
      for (const auto& tr : rollout.transitions) reward_total += tr.reward;
      reward_count += static_cast<long>(rollout.transitions.size());
      match += rollout.expert_matches;
      slots += rollout.expert_slots;

      ad::Graph g(true);
      ad::Var loss;
      for (size_t k = 0; k < rollout.transitions.size(); ++k) {
        auto built = build_hybrid_state(g, ctx, agent.enc2d, agent.enc3d, rollout.poses[k]);
        auto out = agent.policy.forward(g, built.state);
        auto bl = bc_loss(g, out.logits, rollout.transitions[k].expert_labels);
        loss = loss ? g.add(loss, bl) : bl;
      }
      loss = g.scale(loss, 1.0f / static_cast<float>(rollout.transitions.size()));
      check_finite(loss->val[0], "behavioral cloning loss (epoch " +
                                     std::to_string(epoch) + ")");
      bc_total += loss->val[0];
      g.backward(loss);
      agent.store.adam_step(cfg.bc_lr);
      agent.store.zero_grad();
    }
    const ValMetrics vm = validate_agent(agent, encoders, val_scenes, val_feats, cfg,
                                         mix_seed(seed, 3));
    write_row(0.0, 0.0, 0.0, bc_total / cfg.episodes_per_epoch,
              reward_count ? reward_total / reward_count : 0.0,
              slots ? static_cast<double>(match) / slots : 0.0, vm);
  }

  // phase 2b: joint PPO + BC over the replay buffer (policy trunk and heads)
  for (int epoch = 0; epoch < cfg.joint_epochs; ++epoch) {
    std::vector<Transition> buffer;
    std::vector<float> advantages, returns;
    double reward_total = 0.0;
    long match = 0, slots = 0;

    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      const size_t si = rng() % train_scenes.size();
      auto rollout = rollout_episode(*train_scenes[si], train_feats[si], encoders, agent,
                                     SelectMode::kSample,
                                     mix_seed(seed, 100 + episode_counter),
                                     cfg.ppo.episode_length, cfg.perturb);
      ++episode_counter;
      std::vector<float> rewards, values;
      for (const auto& tr : rollout.transitions) {
        rewards.push_back(tr.reward);
        values.push_back(tr.value);
        reward_total += tr.reward;
      }
      auto [adv, ret] = compute_gae(rewards, values, cfg.gae);
      for (size_t k = 0; k < rollout.transitions.size(); ++k) {
        buffer.push_back(std::move(rollout.transitions[k]));
        advantages.push_back(adv[k]);
        returns.push_back(ret[k]);
      }
      match += rollout.expert_matches;
      slots += rollout.expert_slots;
    }

    // normalize advantages over the whole batch
    double mean = std::accumulate(advantages.begin(), advantages.end(), 0.0) /
                  advantages.size();
    double var = 0.0;
    for (float a : advantages) var += (a - mean) * (a - mean);
    const double stdev = std::max(std::sqrt(var / advantages.size()), 1e-8);
    for (float& a : advantages) a = static_cast<float>((a - mean) / stdev);

    double pl = 0.0, vl = 0.0, ent = 0.0, bl = 0.0;
    long updates = 0;
    std::vector<int> order(buffer.size());
    std::iota(order.begin(), order.end(), 0);
    for (int pass = 0; pass < cfg.ppo.epochs_per_batch; ++pass) {
      std::shuffle(order.begin(), order.end(), rng);
      for (size_t start = 0; start < order.size(); start += cfg.ppo.minibatch) {
        const size_t stop = std::min(order.size(), start + cfg.ppo.minibatch);
        ad::Graph g(true);
        std::vector<PpoBatchItem> batch;
        for (size_t i = start; i < stop; ++i) {
          const Transition& tr = buffer[order[i]];
          PpoBatchItem item;
          item.tr = &tr;
          item.advantage = advantages[order[i]];
          item.ret = returns[order[i]];
          auto sv = ad::make_var({1, static_cast<int>(tr.state.size())}, tr.state);
          item.out = agent.policy.forward(g, sv);
          batch.push_back(std::move(item));
        }
        auto parts = ppo_losses(g, batch, cfg.ppo);
        check_finite(parts.total->val[0], "ppo total loss (epoch " +
                                              std::to_string(epoch) + ")");
        pl += parts.policy->val[0];
        vl += parts.value->val[0];
        ent += parts.entropy->val[0];
        bl += parts.bc->val[0];
        ++updates;
        g.backward(parts.total);
        agent.store.adam_step(cfg.joint_lr,
                              [](const std::string& n) { return n.rfind("policy.", 0) == 0; });
        agent.store.zero_grad();
      }
    }
    const ValMetrics vm = validate_agent(agent, encoders, val_scenes, val_feats, cfg,
                                         mix_seed(seed, 3));
    write_row(pl / updates, vl / updates, ent / updates, bl / updates,
              reward_total / buffer.size(),
              slots ? static_cast<double>(match) / slots : 0.0, vm);
  }

  encoders.save(out_dir + "/encoders.ckpt");
  agent.save(out_dir + "/agent.ckpt");
}

}  // namespace cmreg
