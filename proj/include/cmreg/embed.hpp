#pragma once

#include <random>

#include "cmreg/nn.hpp"
#include "cmreg/synth.hpp"

namespace cmreg {

struct EmbedConfig {
  int f = 64;                      // embedding dimension
  double positive_radius_px = 1.0; // pixel radius of the positive set
  float lambda = 10.0f;            // circle-loss scale
  float delta_pos = 0.1f;          // positive margin
  float delta_neg = 1.4f;          // negative margin
  int n_anchors = 512;             // sampled in-frustum anchors
  int knn_k = 8;

  void validate() const;
};

// Per-point encoder input: centered/scaled coordinates (3), intensity (1),
// k-nearest-neighbor statistics (mean dist, max dist, centroid offset).
constexpr int kPointFeatureDim = 9;
ad::Var compute_point_features(const PointCloud& points,
                               const std::vector<double>& intensities, int knn_k);

ad::Var make_image_var(const ScenePair& scene);  // {1,H,W}

// Shared 4-layer perceptron over per-point features, unit-norm rows.
class PointEncoder {
 public:
  PointEncoder(ad::ParameterStore& ps, const EmbedConfig& cfg, std::mt19937& rng);
  ad::Var forward(ad::Graph& g, const ad::Var& feats) const;  // {N,9} -> {N,f}
  mutable long eval_count = 0;

 private:
  ad::Linear l1_, l2_, l3_, l4_;
};

// Four 3x3 convolutions at full resolution, unit-norm per pixel.
class ImageEncoder {
 public:
  ImageEncoder(ad::ParameterStore& ps, const EmbedConfig& cfg, std::mt19937& rng);
  ad::Var forward(ad::Graph& g, const ad::Var& image) const;  // {1,H,W} -> {H*W,f}
  mutable long eval_count = 0;

 private:
  ad::Conv3x3 c1_, c2_, c3_, c4_;
};

// Two-layer head over (point feature, pooled image features) -> sigmoid.
class FrustumHead {
 public:
  FrustumHead(ad::ParameterStore& ps, const EmbedConfig& cfg, std::mt19937& rng);
  // point_emb {N,f}, image_emb {HW,f} -> probabilities {N,1}
  ad::Var forward(ad::Graph& g, const ad::Var& point_emb, const ad::Var& image_emb) const;

 private:
  ad::Linear l1_, l2_;
};

// One-shot embedding backbone plus the frustum classification head.
struct EncoderSet {
  EmbedConfig cfg;
  ad::ParameterStore store;
  std::mt19937 init_rng;  // consumed during construction; ordered before the encoders
  PointEncoder point_encoder;
  ImageEncoder image_encoder;
  FrustumHead frustum_head;

  EncoderSet(const EmbedConfig& cfg, uint64_t seed);
  void save(const std::string& path) const { store.save(path); }
  void load(const std::string& path) { store.load(path); }

  // whole-scene entry points
  ad::Var embed_points(ad::Graph& g, const PointCloud& points,
                       const std::vector<double>& intensities) {
    return point_encoder.forward(g, compute_point_features(points, intensities, cfg.knn_k));
  }
  ad::Var embed_image(ad::Graph& g, const ScenePair& scene) {
    return image_encoder.forward(g, make_image_var(scene));
  }
  ad::Var classify_frustum(ad::Graph& g, const ad::Var& point_emb, const ad::Var& image_emb) {
    return frustum_head.forward(g, point_emb, image_emb);
  }
};

// Bidirectional circle loss over one n x n anchor/pixel batch. Positive sets
// are pixel neighborhoods of radius cfg.positive_radius_px; adaptive weights
// are clamped at zero and detached. Anchors with an empty positive set are
// excluded from the mean.
ad::Var circle_loss(ad::Graph& g, const ad::Var& anchor_feats,
                    const ad::Var& pixel_feats,
                    const std::vector<Eigen::Vector2d>& pixel_coords,
                    const EmbedConfig& cfg);

// Class-balanced binary cross-entropy (weights N/(2N+), N/(2N-); unweighted
// fallback when one class is empty). Probabilities clamped to [1e-7, 1-1e-7].
ad::Var weighted_bce(ad::Graph& g, const ad::Var& probs,
                     const std::vector<uint8_t>& labels);

}  // namespace cmreg
