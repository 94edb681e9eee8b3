#pragma once

#include "cmreg/train.hpp"

namespace cmreg {

struct RecallSpec {
  double tau_r_deg = 10.0;
  double tau_t_m = 5.0;
  void validate() const;
};

// Fraction of cases with rre < tau_r and rte < tau_t. Throws on empty input.
double registration_recall(const std::vector<PoseError>& errors, const RecallSpec& spec);

struct EvalRow {
  int iteration = 0;  // 1-based, contiguous
  double rte_mean = 0.0, rte_std = 0.0;
  double rre_mean = 0.0, rre_std = 0.0;
  double recall = 0.0;        // fraction in [0,1]
  double mean_time_ms = 0.0;  // state build + policy forward + pose update
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string to_csv() const;
  std::vector<double> recall_series() const;  // for trend assertions
};

enum class EvalPolicy { kAgent, kExpert };

// Iteration sweep: perturb each scene, roll the greedy policy, and record the
// pose error after every iteration. EvalPolicy::kExpert substitutes the
// greedy expert for the agent. measure_time=false zeroes the timing column so
// fixed seeds produce byte-identical reports.
EvalReport evaluate(const Agent& agent, EncoderSet& encoders,
                    const std::vector<ScenePair>& scenes, int iterations,
                    const RecallSpec& spec, const PerturbSpec& perturb, uint64_t seed,
                    EvalPolicy policy = EvalPolicy::kAgent, bool measure_time = true);

// Binary PGM (P5) of the scene image with projected point depths
// alpha-blended on top; bit-exact for identical inputs.
void render_overlay(const ScenePair& scene, const Se3Pose& pose, const std::string& path);

// Verbs: gen, pretrain, train, eval, demo. Exit 0 = success, 1 = usage error,
// 2 = runtime error.
int cli_main(int argc, char** argv);

}  // namespace cmreg
