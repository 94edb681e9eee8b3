#include "cmreg/nn.hpp"

#include <cmath>

namespace cmreg::ad {

void init_normal(const Var& t, std::mt19937& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t->val) v = dist(rng);
}

void init_he(const Var& t, std::mt19937& rng, int fan_in) {
  init_normal(t, rng, std::sqrt(2.0f / static_cast<float>(fan_in)));
}

Linear Linear::create(ParameterStore& ps, const std::string& prefix, int in, int out,
                      std::mt19937& rng) {
  Linear l;
  l.w = ps.create(prefix + ".w", {in, out});
  l.b = ps.create(prefix + ".b", {out});
  init_he(l.w, rng, in);
  // small bias noise keeps feature vectors away from exact zero, which the
  // downstream per-row normalization cannot rescale
  init_normal(l.b, rng, 0.01f);
  return l;
}

Linear Linear::from_store(const ParameterStore& ps, const std::string& prefix) {
  return {ps.get(prefix + ".w"), ps.get(prefix + ".b")};
}

Var Linear::forward(Graph& g, const Var& x) const {
  return g.add(g.matmul(x, w), b);
}

Conv3x3 Conv3x3::create(ParameterStore& ps, const std::string& prefix, int in, int out,
                        int stride, std::mt19937& rng) {
  Conv3x3 c;
  c.w = ps.create(prefix + ".w", {out, in, 3, 3});
  c.b = ps.create(prefix + ".b", {out});
  c.stride = stride;
  init_he(c.w, rng, in * 9);
  init_normal(c.b, rng, 0.01f);
  return c;
}

Conv3x3 Conv3x3::from_store(const ParameterStore& ps, const std::string& prefix, int stride) {
  return {ps.get(prefix + ".w"), ps.get(prefix + ".b"), stride};
}

Var Conv3x3::forward(Graph& g, const Var& x) const {
  return g.conv2d_3x3(x, w, b, stride);
}

}  // namespace cmreg::ad
