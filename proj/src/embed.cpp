#include "cmreg/embed.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cmreg {

namespace {

using MatXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapXf = Eigen::Map<MatXf>;
using ConstMapXf = Eigen::Map<const MatXf>;

// internal channel widths of the image encoder
constexpr int kImgC1 = 8;
constexpr int kImgC2 = 16;
constexpr int kImgC3 = 32;

}  // namespace

void EmbedConfig::validate() const {
  if (f <= 0) throw std::invalid_argument("embed config: f must be positive");
  if (positive_radius_px <= 0.0)
    throw std::invalid_argument("embed config: positive radius must be positive");
  if (!(0.0f < delta_pos && delta_pos < delta_neg))
    throw std::invalid_argument("embed config: need 0 < delta_pos < delta_neg");
  if (lambda <= 0.0f) throw std::invalid_argument("embed config: lambda must be positive");
  if (n_anchors <= 0) throw std::invalid_argument("embed config: n_anchors must be positive");
  if (knn_k <= 0) throw std::invalid_argument("embed config: knn_k must be positive");
}

namespace {

// Uniform-grid k-nearest-neighbor search; exact (ring expansion continues
// until the k-th best distance is covered by the searched radius).
class KnnGrid {
 public:
  explicit KnnGrid(const PointCloud& points, double cell)
      : points_(points), cell_(cell) {
    lo_ = points.front();
    for (const auto& p : points) lo_ = lo_.cwiseMin(p);
    for (size_t i = 0; i < points.size(); ++i)
      cells_[key_of(points[i])].push_back(static_cast<int>(i));
  }

  // indices of the k nearest points to points_[i], excluding i itself
  std::vector<int> query(int i, int k) const {
    const Eigen::Vector3d& q = points_[i];
    const Eigen::Vector3i c = cell_of(q);
    std::vector<std::pair<double, int>> found;
    for (int r = 1;; ++r) {
      found.clear();
      for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
          for (int dz = -r; dz <= r; ++dz) {
            const auto it = cells_.find(pack(c.x() + dx, c.y() + dy, c.z() + dz));
            if (it == cells_.end()) continue;
            for (int j : it->second)
              if (j != i) found.emplace_back((points_[j] - q).squaredNorm(), j);
          }
      const int have = static_cast<int>(found.size());
      if (have >= k) {
        std::nth_element(found.begin(), found.begin() + (k - 1), found.end());
        const double covered = (r - 0) * cell_;  // guaranteed search radius
        if (found[k - 1].first <= covered * covered ||
            have == static_cast<int>(points_.size()) - 1) {
          found.resize(k);
          std::vector<int> idx(k);
          for (int t = 0; t < k; ++t) idx[t] = found[t].second;
          return idx;
        }
      } else if (have == static_cast<int>(points_.size()) - 1) {
        std::sort(found.begin(), found.end());
        std::vector<int> idx(have);
        for (int t = 0; t < have; ++t) idx[t] = found[t].second;
        return idx;
      }
    }
  }

 private:
  Eigen::Vector3i cell_of(const Eigen::Vector3d& p) const {
    return ((p - lo_) / cell_).array().floor().cast<int>();
  }
  int64_t key_of(const Eigen::Vector3d& p) const {
    const Eigen::Vector3i c = cell_of(p);
    return pack(c.x(), c.y(), c.z());
  }
  static int64_t pack(int x, int y, int z) {
    return (static_cast<int64_t>(x) << 42) ^ (static_cast<int64_t>(y) << 21) ^
           static_cast<int64_t>(z);
  }

  const PointCloud& points_;
  double cell_;
  Eigen::Vector3d lo_;
  std::unordered_map<int64_t, std::vector<int>> cells_;
};

}  // namespace

ad::Var compute_point_features(const PointCloud& points,
                               const std::vector<double>& intensities, int knn_k) {
  const int n = static_cast<int>(points.size());
  if (n == 0) throw std::invalid_argument("point features: empty point cloud");
  if (intensities.size() != points.size())
    throw std::invalid_argument("point features: intensity count mismatch");
  const int k = std::min(knn_k, n - 1);

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : points) mean += p;
  mean /= n;
  double var = 0.0;
  for (const auto& p : points) var += (p - mean).squaredNorm();
  const double scale = std::max(std::sqrt(var / n), 1e-9);

  std::optional<KnnGrid> grid;
  if (k > 0) grid.emplace(points, 1.5);

  auto out = ad::make_var({n, kPointFeatureDim});
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d c = (points[i] - mean) / scale;
    float* row = out->val.data() + static_cast<size_t>(i) * kPointFeatureDim;
    row[0] = static_cast<float>(c.x());
    row[1] = static_cast<float>(c.y());
    row[2] = static_cast<float>(c.z());
    row[3] = static_cast<float>(intensities[i]);

    double mean_d = 0.0, max_d = 0.0;
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    if (k > 0) {
      const auto nb = grid->query(i, k);
      for (int j : nb) {
        const double d = (points[j] - points[i]).norm();
        mean_d += d;
        max_d = std::max(max_d, d);
        centroid += points[j];
      }
      mean_d /= nb.size();
      centroid = centroid / static_cast<double>(nb.size()) - points[i];
    }
    row[4] = static_cast<float>(mean_d / scale);
    row[5] = static_cast<float>(max_d / scale);
    row[6] = static_cast<float>(centroid.x() / scale);
    row[7] = static_cast<float>(centroid.y() / scale);
    row[8] = static_cast<float>(centroid.z() / scale);
  }
  return out;
}

ad::Var make_image_var(const ScenePair& scene) {
  const int h = scene.intrinsics.height, w = scene.intrinsics.width;
  if (scene.image.size() != static_cast<size_t>(h) * w)
    throw std::invalid_argument("image var: image size does not match intrinsics");
  auto out = ad::make_var({1, h, w});
  for (size_t i = 0; i < scene.image.size(); ++i)
    out->val[i] = static_cast<float>(scene.image[i]);
  return out;
}

PointEncoder::PointEncoder(ad::ParameterStore& ps, const EmbedConfig& cfg, std::mt19937& rng)
    : l1_(ad::Linear::create(ps, "point_enc.l1", kPointFeatureDim, cfg.f, rng)),
      l2_(ad::Linear::create(ps, "point_enc.l2", cfg.f, cfg.f, rng)),
      l3_(ad::Linear::create(ps, "point_enc.l3", cfg.f, cfg.f, rng)),
      l4_(ad::Linear::create(ps, "point_enc.l4", cfg.f, cfg.f, rng)) {}

ad::Var PointEncoder::forward(ad::Graph& g, const ad::Var& feats) const {
  ++eval_count;
  auto h = g.relu(l1_.forward(g, feats));
  h = g.relu(l2_.forward(g, h));
  h = g.relu(l3_.forward(g, h));
  return g.l2_normalize_rows(l4_.forward(g, h));
}

ImageEncoder::ImageEncoder(ad::ParameterStore& ps, const EmbedConfig& cfg, std::mt19937& rng)
    : c1_(ad::Conv3x3::create(ps, "image_enc.c1", 1, kImgC1, 1, rng)),
      c2_(ad::Conv3x3::create(ps, "image_enc.c2", kImgC1, kImgC2, 1, rng)),
      c3_(ad::Conv3x3::create(ps, "image_enc.c3", kImgC2, kImgC3, 1, rng)),
      c4_(ad::Conv3x3::create(ps, "image_enc.c4", kImgC3, cfg.f, 1, rng)) {}

ad::Var ImageEncoder::forward(ad::Graph& g, const ad::Var& image) const {
  ++eval_count;
  auto h = g.relu(c1_.forward(g, image));
  h = g.relu(c2_.forward(g, h));
  h = g.relu(c3_.forward(g, h));
  h = c4_.forward(g, h);
  return g.l2_normalize_rows(g.chw_to_nc(h));
}

FrustumHead::FrustumHead(ad::ParameterStore& ps, const EmbedConfig& cfg, std::mt19937& rng)
    : l1_(ad::Linear::create(ps, "frustum_head.l1", 3 * cfg.f, cfg.f, rng)),
      l2_(ad::Linear::create(ps, "frustum_head.l2", cfg.f, 1, rng)) {}

ad::Var FrustumHead::forward(ad::Graph& g, const ad::Var& point_emb,
                             const ad::Var& image_emb) const {
  const int n = point_emb->shape[0];
  const int f = point_emb->shape[1];
  auto pooled = g.concat_vec(g.col_max(image_emb), g.col_mean(image_emb));
  auto pooled_row = g.reshape(pooled, {1, 2 * f});
  auto ones = ad::make_var({n, 1}, std::vector<float>(n, 1.0f));
  auto tiled = g.matmul(ones, pooled_row);  // broadcast the pooled context
  auto x = g.concat_cols(point_emb, tiled);
  return g.sigmoid(l2_.forward(g, g.relu(l1_.forward(g, x))));
}

EncoderSet::EncoderSet(const EmbedConfig& config, uint64_t seed)
    : cfg(config),
      store(),
      init_rng(static_cast<std::mt19937::result_type>(seed)),
      point_encoder(store, cfg, init_rng),
      image_encoder(store, cfg, init_rng),
      frustum_head(store, cfg, init_rng) {
  cfg.validate();
}

ad::Var circle_loss(ad::Graph& g, const ad::Var& anchor_feats, const ad::Var& pixel_feats,
                    const std::vector<Eigen::Vector2d>& pixel_coords, const EmbedConfig& cfg) {
  const int n = anchor_feats->shape[0];
  const int f = anchor_feats->shape[1];
  if (anchor_feats->shape.size() != 2 || pixel_feats->shape.size() != 2 ||
      pixel_feats->shape[0] != n || pixel_feats->shape[1] != f)
    throw std::invalid_argument("circle loss: feature shape mismatch " +
                                ad::shape_str(anchor_feats->shape) + " vs " +
                                ad::shape_str(pixel_feats->shape));
  if (static_cast<int>(pixel_coords.size()) != n)
    throw std::invalid_argument("circle loss: pixel coordinate count mismatch");

  // pairwise feature distances D and the pixel-space positive mask
  auto dist = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * n);
  auto positive = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n) * n);
  {
    // fixed-order scalar computation: vectorized kernels peel a prologue that
    // depends on the buffer's alignment, which would make the last-ulp bits
    // vary between allocations
    const float* a = anchor_feats->val.data();
    const float* p = pixel_feats->val.data();
    for (int i = 0; i < n; ++i) {
      const float* ai = a + static_cast<size_t>(i) * f;
      for (int j = 0; j < n; ++j) {
        const float* pj = p + static_cast<size_t>(j) * f;
        float s = 0.0f;
        for (int c = 0; c < f; ++c) {
          const float diff = ai[c] - pj[c];
          s += diff * diff;
        }
        (*dist)[static_cast<size_t>(i) * n + j] = std::sqrt(s);
      }
    }
  }
  const double r2 = cfg.positive_radius_px * cfg.positive_radius_px;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      (*positive)[static_cast<size_t>(i) * n + j] =
          (pixel_coords[i] - pixel_coords[j]).squaredNorm() <= r2 ? 1 : 0;

  const double lambda = cfg.lambda, dp = cfg.delta_pos, dn = cfg.delta_neg;

  // One direction of the loss: for each anchor row (transpose=false) or pixel
  // column (transpose=true), log(1 + sum_pos e^{..} * sum_neg e^{..}).
  // Returns the summed loss and anchor count; fills sp/sn per anchor.
  auto direction = [&](bool transpose, std::vector<double>& sp, std::vector<double>& sn,
                       int& count) -> double {
    sp.assign(n, 0.0);
    sn.assign(n, 0.0);
    count = 0;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      bool has_pos = false;
      for (int j = 0; j < n; ++j) {
        const size_t idx = transpose ? static_cast<size_t>(j) * n + i
                                     : static_cast<size_t>(i) * n + j;
        const double d = (*dist)[idx];
        if ((*positive)[idx]) {
          has_pos = true;
          const double w = std::max(lambda * (d - dp), 0.0);
          sp[i] += std::exp(w * (d - dp));
        } else {
          const double w = std::max(lambda * (dn - d), 0.0);
          sn[i] += std::exp(w * (dn - d));
        }
      }
      if (!has_pos) {
        sp[i] = -1.0;  // marks an excluded anchor
        continue;
      }
      ++count;
      total += std::log1p(sp[i] * sn[i]);
    }
    return total;
  };

  auto sp3 = std::make_shared<std::vector<double>>();
  auto sn3 = std::make_shared<std::vector<double>>();
  auto sp2 = std::make_shared<std::vector<double>>();
  auto sn2 = std::make_shared<std::vector<double>>();
  int count3 = 0, count2 = 0;
  const double sum3 = direction(false, *sp3, *sn3, count3);
  const double sum2 = direction(true, *sp2, *sn2, count2);

  auto out = ad::make_var({1});
  out->val[0] = static_cast<float>((count3 > 0 ? sum3 / count3 : 0.0) +
                                   (count2 > 0 ? sum2 / count2 : 0.0));

  if (g.recording()) {
    g.track_output(out);
    auto af = anchor_feats, pf = pixel_feats;
    g.record_backward([=]() {
      if (out->grad.empty()) return;
      const double gy = out->grad[0];
      std::vector<double> gd(static_cast<size_t>(n) * n, 0.0);

      auto accumulate = [&](bool transpose, const std::vector<double>& sp,
                            const std::vector<double>& sn, int count) {
        if (count == 0) return;
        const double inv = gy / count;
        for (int i = 0; i < n; ++i) {
          if (sp[i] < 0.0) continue;  // excluded anchor
          const double denom = 1.0 + sp[i] * sn[i];
          for (int j = 0; j < n; ++j) {
            const size_t idx = transpose ? static_cast<size_t>(j) * n + i
                                         : static_cast<size_t>(i) * n + j;
            const double d = (*dist)[idx];
            double dl;
            if ((*positive)[idx]) {
              const double w = std::max(lambda * (d - dp), 0.0);
              dl = sn[i] * std::exp(w * (d - dp)) * w / denom;
            } else {
              const double w = std::max(lambda * (dn - d), 0.0);
              dl = -sp[i] * std::exp(w * (dn - d)) * w / denom;
            }
            gd[idx] += inv * dl;
          }
        }
      };
      accumulate(false, *sp3, *sn3, count3);
      accumulate(true, *sp2, *sn2, count2);

      // chain through D_ij = |a_i - p_j|: scale each pair by gd / D, then
      // d loss / d a_i = sum_j w_ij (a_i - p_j) and symmetrically for p_j.
      // fixed-order scalar loops keep the accumulation bit-reproducible
      af->ensure_grad();
      pf->ensure_grad();
      const float* a = af->val.data();
      const float* p = pf->val.data();
      float* ga = af->grad.data();
      float* gp = pf->grad.data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const size_t idx = static_cast<size_t>(i) * n + j;
          const float d = (*dist)[idx];
          const float wij = d > 1e-12f ? static_cast<float>(gd[idx]) / d : 0.0f;
          if (wij == 0.0f) continue;
          const float* ai = a + static_cast<size_t>(i) * f;
          const float* pj = p + static_cast<size_t>(j) * f;
          float* gai = ga + static_cast<size_t>(i) * f;
          float* gpj = gp + static_cast<size_t>(j) * f;
          for (int c = 0; c < f; ++c) {
            const float diff = wij * (ai[c] - pj[c]);
            gai[c] += diff;
            gpj[c] -= diff;
          }
        }
    });
  }
  return out;
}

ad::Var weighted_bce(ad::Graph& g, const ad::Var& probs, const std::vector<uint8_t>& labels) {
  const int n = static_cast<int>(labels.size());
  if (probs->size() != n)
    throw std::invalid_argument("weighted bce: got " + std::to_string(probs->size()) +
                                " probabilities for " + std::to_string(n) + " labels");
  constexpr float kLo = 1e-7f, kHi = 1.0f - 1e-7f;

  int n_pos = 0;
  for (uint8_t l : labels) n_pos += l ? 1 : 0;
  const int n_neg = n - n_pos;
  const bool balanced = n_pos > 0 && n_neg > 0;
  const double w_pos = balanced ? n / (2.0 * n_pos) : 1.0;
  const double w_neg = balanced ? n / (2.0 * n_neg) : 1.0;

  auto out = ad::make_var({1});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = std::clamp(probs->val[i], kLo, kHi);
    total += labels[i] ? -w_pos * std::log(p) : -w_neg * std::log1p(-p);
  }
  out->val[0] = static_cast<float>(total / n);

  if (g.recording()) {
    g.track_output(out);
    auto pv = probs;
    g.record_backward([=]() {
      if (out->grad.empty()) return;
      pv->ensure_grad();
      const double gy = out->grad[0] / n;
      for (int i = 0; i < n; ++i) {
        const float raw = pv->val[i];
        if (raw <= kLo || raw >= kHi) continue;  // clamped: zero gradient
        const double p = raw;
        const double d = labels[i] ? -w_pos / p : w_neg / (1.0 - p);
        pv->grad[i] += static_cast<float>(gy * d);
      }
    });
  }
  return out;
}

}  // namespace cmreg
