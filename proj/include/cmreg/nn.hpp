#pragma once

#include <random>
#include <string>

#include "cmreg/tensor.hpp"

namespace cmreg::ad {

void init_normal(const Var& t, std::mt19937& rng, float stddev);
void init_he(const Var& t, std::mt19937& rng, int fan_in);

struct Linear {
  Var w;  // {in, out}
  Var b;  // {out}

  static Linear create(ParameterStore& ps, const std::string& prefix, int in, int out,
                       std::mt19937& rng);
  static Linear from_store(const ParameterStore& ps, const std::string& prefix);
  Var forward(Graph& g, const Var& x) const;  // {R,in} -> {R,out}
};

struct Conv3x3 {
  Var w;  // {out, in, 3, 3}
  Var b;  // {out}
  int stride = 1;

  static Conv3x3 create(ParameterStore& ps, const std::string& prefix, int in, int out,
                        int stride, std::mt19937& rng);
  static Conv3x3 from_store(const ParameterStore& ps, const std::string& prefix, int stride);
  Var forward(Graph& g, const Var& x) const;  // {in,H,W} -> {out,H',W'}
};

}  // namespace cmreg::ad
