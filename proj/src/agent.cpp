#include "cmreg/agent.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>

namespace cmreg {

namespace {

constexpr double kDegToRad = M_PI / 180.0;

void validate_candidates(const std::vector<double>& c, const char* which) {
  const std::string name(which);
  if (c.empty() || c[0] != 0.0)
    throw std::invalid_argument("action spec: " + name + " candidates must start at 0");
  if (c.size() % 2 == 0)
    throw std::invalid_argument("action spec: " + name + " candidates must pair +/-");
  for (size_t i = 1; i < c.size(); i += 2) {
    if (c[i] <= 0.0 || c[i + 1] != -c[i])
      throw std::invalid_argument("action spec: " + name +
                                  " candidates must come in +x,-x pairs");
    if (i > 1 && c[i] <= c[i - 2])
      throw std::invalid_argument("action spec: " + name +
                                  " magnitudes must strictly increase");
  }
}

// rotation subspaces turn about these axes, translations move along them
const Eigen::Vector3d kRotationAxes[3] = {{0, 1, 0}, {1, 0, 0}, {0, 0, 1}};
const Eigen::Vector3d kTranslationAxes[3] = {{1, 0, 0}, {0, 0, 1}, {0, 1, 0}};

int nearest_candidate(const std::vector<double>& candidates, double target) {
  // magnitude order + strict inequality: ties resolve to the smaller move
  int best = 0;
  double best_err = std::abs(target - candidates[0]);
  for (int i = 1; i < static_cast<int>(candidates.size()); ++i) {
    const double err = std::abs(target - candidates[i]);
    if (err < best_err) {
      best = i;
      best_err = err;
    }
  }
  return best;
}

}  // namespace

void ActionSpec::validate() const {
  if (n_rotation < 0 || n_rotation > 3 || n_translation < 0 || n_translation > 3)
    throw std::invalid_argument("action spec: subspace counts must be in [0,3]");
  if (subspaces() == 0) throw std::invalid_argument("action spec: no subspaces");
  if (rotation_deg.size() != translation_m.size())
    throw std::invalid_argument("action spec: candidate lists must have equal length");
  validate_candidates(rotation_deg, "rotation");
  validate_candidates(translation_m, "translation");
}

PolicyNet::PolicyNet(ad::ParameterStore& ps, int state_dim, const ActionSpec& spec,
                     int hidden, std::mt19937& rng)
    : subspaces_(spec.subspaces()), candidates_(spec.candidates()),
      t1_(ad::Linear::create(ps, "policy.t1", state_dim, hidden, rng)),
      t2_(ad::Linear::create(ps, "policy.t2", hidden, hidden, rng)),
      policy_(ad::Linear::create(ps, "policy.logits", hidden, subspaces_ * candidates_, rng)),
      value_(ad::Linear::create(ps, "policy.value", hidden, 1, rng)) {}

PolicyNet::Out PolicyNet::forward(ad::Graph& g, const ad::Var& state) const {
  auto h = g.relu(t1_.forward(g, state));
  h = g.relu(t2_.forward(g, h));
  return {g.reshape(policy_.forward(g, h), {subspaces_, candidates_}),
          value_.forward(g, h)};
}

PolicyOutput PolicyNet::infer(const std::vector<float>& state) const {
  ad::Graph g(false);
  auto s = ad::make_var({1, static_cast<int>(state.size())}, state);
  auto out = forward(g, s);
  return {subspaces_, candidates_, out.logits->val, out.value->val[0]};
}

ActionSelection select_actions(const PolicyOutput& out, SelectMode mode,
                               std::mt19937_64& rng) {
  ActionSelection sel;
  sel.indices.resize(out.subspaces);
  sel.log_probs.resize(out.subspaces);
  for (int s = 0; s < out.subspaces; ++s) {
    const float* row = out.logits.data() + static_cast<size_t>(s) * out.candidates;
    // stable per-row log-softmax
    float mx = row[0];
    for (int c = 1; c < out.candidates; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < out.candidates; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    const double log_z = std::log(z) + mx;

    int pick = 0;
    if (mode == SelectMode::kGreedy) {
      for (int c = 1; c < out.candidates; ++c)
        if (row[c] > row[pick]) pick = c;
    } else {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      double u = unit(rng), acc = 0.0;
      pick = out.candidates - 1;
      for (int c = 0; c < out.candidates; ++c) {
        acc += std::exp(static_cast<double>(row[c]) - log_z);
        if (u <= acc) {
          pick = c;
          break;
        }
      }
    }
    sel.indices[s] = pick;
    sel.log_probs[s] = static_cast<float>(row[pick] - log_z);
  }
  return sel;
}

Se3Pose actions_to_transform(const std::vector<int>& indices, const ActionSpec& spec) {
  if (static_cast<int>(indices.size()) != spec.subspaces())
    throw std::invalid_argument("actions: expected one index per subspace");
  Se3Pose t = Se3Pose::identity();
  for (int s = 0; s < spec.subspaces(); ++s) {
    const auto& cands = spec.candidates_of(s);
    const int idx = indices[s];
    if (idx < 0 || idx >= static_cast<int>(cands.size()))
      throw std::out_of_range("actions: candidate index out of range");
    if (spec.is_rotation(s)) {
      const double rad = cands[idx] * kDegToRad;
      t.rotation = (Eigen::AngleAxisd(rad, kRotationAxes[s]) * t.rotation).eval();
    } else {
      t.translation += cands[idx] * kTranslationAxes[s - spec.n_rotation];
    }
  }
  return t;
}

Se3Pose pose_residual(const Se3Pose& gt, const Se3Pose& current) {
  return gt.compose(current.inverse());
}

std::vector<int> expert_actions(const Se3Pose& residual, const ActionSpec& spec) {
  std::vector<int> out(spec.subspaces(), 0);
  for (int s = 0; s < spec.n_rotation; ++s) {
    double angle_deg = 0.0;
    if (s == 0) {
      // nearest pure yaw of the residual rotation
      angle_deg = std::atan2(residual.rotation(0, 2), residual.rotation(0, 0)) / kDegToRad;
    }
    out[s] = nearest_candidate(spec.rotation_deg, angle_deg);
  }
  for (int s = 0; s < spec.n_translation; ++s) {
    const double target = residual.translation.dot(kTranslationAxes[s]);
    out[spec.n_rotation + s] = nearest_candidate(spec.translation_m, target);
  }
  return out;
}

ad::Var bc_loss(ad::Graph& g, const ad::Var& logits, const std::vector<int>& labels) {
  if (logits->shape.size() != 2 ||
      logits->shape[0] != static_cast<int>(labels.size()))
    throw std::invalid_argument("bc loss: logits " + ad::shape_str(logits->shape) +
                                " do not match " + std::to_string(labels.size()) + " labels");
  auto picked = g.gather_rows(g.log_softmax_rows(logits), labels);
  return g.scale(g.sum_all(picked), -1.0f / static_cast<float>(labels.size()));
}

Agent::Agent(const AgentConfig& config, int height, int width, uint64_t seed)
    : cfg(config),
      store(),
      init_rng(static_cast<std::mt19937::result_type>(seed)),
      enc2d(store, cfg.state, height, width, init_rng),
      enc3d(store, cfg.state, init_rng),
      policy(store, 2 * cfg.state.f_prime, cfg.actions, cfg.trunk_hidden, init_rng) {
  cfg.actions.validate();
}

}  // namespace cmreg
