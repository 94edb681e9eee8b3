#include "cmreg/state.hpp"

#include <cmath>
#include <stdexcept>

namespace cmreg {

namespace {

constexpr float kCoordScale = 1.0f / 40.0f;  // meters -> roughly unit input range

int strided(int extent, int stride) { return (extent - 1) / stride + 1; }

}  // namespace

void StateConfig::validate() const {
  if (f <= 0 || f_prime <= 0)
    throw std::invalid_argument("state config: widths must be positive");
  if (conv1_channels <= 0 || conv2_channels <= 0 || mlp2d_hidden <= 0)
    throw std::invalid_argument("state config: 2d branch widths must be positive");
  if (mlp3d_h1 <= 0 || mlp3d_h2 <= 0 || mlp3d_h3 <= 0)
    throw std::invalid_argument("state config: 3d branch widths must be positive");
}

ScatterResult scatter_point_features(const PointCloud& transformed_points,
                                     const std::vector<float>& point_emb, int f,
                                     const CameraIntrinsics& intr) {
  const int n = static_cast<int>(transformed_points.size());
  if (point_emb.size() != static_cast<size_t>(n) * f)
    throw std::invalid_argument("scatter: embedding buffer size mismatch");
  const int h = intr.height, w = intr.width;
  const size_t hw = static_cast<size_t>(h) * w;
  static const Se3Pose kIdentity = Se3Pose::identity();

  ScatterResult out;
  out.features.assign(static_cast<size_t>(f) * hw, 0.0f);
  out.depth.width = w;
  out.depth.height = h;
  out.depth.depth.assign(hw, DepthMap::kEmpty);
  std::vector<uint32_t> counts(hw, 0);

  for (int i = 0; i < n; ++i) {
    const auto pd = project_point(transformed_points[i], intr, kIdentity);
    if (!pd) continue;
    const int u = static_cast<int>(std::floor(pd->pixel.x()));
    const int v = static_cast<int>(std::floor(pd->pixel.y()));
    const size_t px = static_cast<size_t>(v) * w + u;
    if (counts[px] == 0) out.occupied.push_back(static_cast<int>(px));
    ++counts[px];
    if (out.depth.depth[px] == DepthMap::kEmpty || pd->depth < out.depth.depth[px])
      out.depth.depth[px] = pd->depth;
    const float* emb = point_emb.data() + static_cast<size_t>(i) * f;
    for (int c = 0; c < f; ++c) out.features[c * hw + px] += emb[c];
  }
  for (int px : out.occupied) {
    if (counts[px] <= 1) continue;
    const float inv = 1.0f / counts[px];
    for (int c = 0; c < f; ++c) out.features[c * hw + px] *= inv;
  }
  return out;
}

std::vector<uint8_t> current_frustum_labels(const PointCloud& transformed_points,
                                            const CameraIntrinsics& intr) {
  return frustum_mask(transformed_points, intr, Se3Pose::identity());
}

StateEncoder2d::StateEncoder2d(ad::ParameterStore& ps, const StateConfig& cfg, int height,
                               int width, std::mt19937& rng)
    : cfg_(cfg), height_(height), width_(width),
      conv1_img_(ad::Conv3x3::create(ps, "state2d.conv1_img", cfg.f, cfg.conv1_channels,
                                     2, rng)),
      conv1_pt_(ad::Conv3x3::create(ps, "state2d.conv1_pt", cfg.f, cfg.conv1_channels,
                                    2, rng)),
      conv2_(ad::Conv3x3::create(ps, "state2d.conv2", cfg.conv1_channels,
                                 cfg.conv2_channels, 2, rng)),
      l1_(ad::Linear::create(ps, "state2d.l1", cfg.conv2_channels, cfg.mlp2d_hidden, rng)),
      l2_(ad::Linear::create(ps, "state2d.l2", cfg.mlp2d_hidden, cfg.f_prime, rng)) {
  cfg.validate();
}

ad::Var StateEncoder2d::finish_(ad::Graph& g, const ad::Var& conv1_out) const {
  auto h = g.relu(conv2_.forward(g, g.relu(conv1_out)));
  auto pooled = g.reshape(g.col_mean(g.chw_to_nc(h)), {1, cfg_.conv2_channels});
  return l2_.forward(g, g.relu(l1_.forward(g, pooled)));
}

ad::Var StateEncoder2d::forward(ad::Graph& g, const ad::Var& image_map,
                                const ad::Var& point_map) const {
  auto conv1 = g.add(conv1_img_.forward(g, image_map), conv1_pt_.forward(g, point_map));
  return finish_(g, conv1);
}

std::vector<float> StateEncoder2d::image_half_response(
    const std::vector<float>& image_emb_chw) const {
  if (image_emb_chw.size() != static_cast<size_t>(cfg_.f) * height_ * width_)
    throw std::invalid_argument("state 2d: image embedding size mismatch");
  ad::Graph g(false);
  auto img = ad::make_var({cfg_.f, height_, width_}, image_emb_chw);
  return conv1_img_.forward(g, img)->val;
}

ad::Var StateEncoder2d::forward_cached(ad::Graph& g, const std::vector<float>& image_half,
                                       const ad::Var& point_map) const {
  const int ho = strided(height_, 2), wo = strided(width_, 2);
  auto cached = ad::make_var({cfg_.conv1_channels, ho, wo}, image_half);
  auto conv1 = g.add(cached, conv1_pt_.forward(g, point_map));
  return finish_(g, conv1);
}

ad::Var StateEncoder2d::forward_sparse(ad::Graph& g, const std::vector<float>& image_half,
                                       const ScatterResult& scatter) const {
  const int f = cfg_.f, c1 = cfg_.conv1_channels;
  const int ho = strided(height_, 2), wo = strided(width_, 2);
  const size_t hw = static_cast<size_t>(height_) * width_;
  auto conv1 = ad::make_var({c1, ho, wo}, image_half);

  // weights reordered to {f, 9*c1} so one GEMM yields, for every occupied
  // pixel, its contribution to each of the nine kernel offsets
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& wsrc = conv1_pt_.w->val;  // {c1, f, 3, 3}
  RowMat wk(f, 9 * c1);
  for (int c = 0; c < c1; ++c)
    for (int ch = 0; ch < f; ++ch)
      for (int k = 0; k < 9; ++k)
        wk(ch, k * c1 + c) = wsrc[(static_cast<size_t>(c) * f + ch) * 9 + k];

  const int n_occ = static_cast<int>(scatter.occupied.size());
  RowMat feats(n_occ, f);
  for (int i = 0; i < n_occ; ++i) {
    const int px = scatter.occupied[i];
    for (int c = 0; c < f; ++c) feats(i, c) = scatter.features[c * hw + px];
  }
  RowMat contrib = feats * wk;  // {n_occ, 9*c1}

  for (int i = 0; i < n_occ; ++i) {
    const int px = scatter.occupied[i];
    const int v = px / width_, u = px % width_;
    // output pixels whose 3x3 window (pad 1, stride 2) covers (v, u)
    for (int dv = 0; dv < 3; ++dv) {
      const int vv = v + 1 - dv;
      if (vv < 0 || vv % 2 != 0 || vv / 2 >= ho) continue;
      const int vo = vv / 2;
      for (int du = 0; du < 3; ++du) {
        const int uu = u + 1 - du;
        if (uu < 0 || uu % 2 != 0 || uu / 2 >= wo) continue;
        const int uo = uu / 2;
        const float* src = contrib.data() + (static_cast<size_t>(i) * 9 + dv * 3 + du) * c1;
        for (int c = 0; c < c1; ++c)
          conv1->val[(static_cast<size_t>(c) * ho + vo) * wo + uo] += src[c];
      }
    }
  }
  // conv1_pt's bias applies everywhere, occupied or not
  for (int c = 0; c < c1; ++c) {
    const float b = conv1_pt_.b->val[c];
    float* plane = conv1->val.data() + static_cast<size_t>(c) * ho * wo;
    for (int i = 0; i < ho * wo; ++i) plane[i] += b;
  }
  return finish_(g, conv1);
}

StateEncoder3d::StateEncoder3d(ad::ParameterStore& ps, const StateConfig& cfg,
                               std::mt19937& rng)
    : l1_(ad::Linear::create(ps, "state3d.l1", 5, cfg.mlp3d_h1, rng)),
      l2_(ad::Linear::create(ps, "state3d.l2", cfg.mlp3d_h1, cfg.mlp3d_h2, rng)),
      l3_(ad::Linear::create(ps, "state3d.l3", cfg.mlp3d_h2, cfg.mlp3d_h3, rng)),
      out_(ad::Linear::create(ps, "state3d.out", cfg.mlp3d_h3, cfg.f_prime, rng)) {}

ad::Var StateEncoder3d::forward(ad::Graph& g, const ad::Var& s3d) const {
  if (s3d->shape.size() != 2 || s3d->shape[1] != 5)
    throw std::invalid_argument("state 3d: expected {N,5}, got " + ad::shape_str(s3d->shape));
  const int n = s3d->shape[0];
  // fixed input normalization; coordinate columns are meters
  std::vector<float> sv(static_cast<size_t>(n) * 5);
  for (int i = 0; i < n; ++i) {
    float* row = sv.data() + static_cast<size_t>(i) * 5;
    row[0] = row[1] = row[2] = kCoordScale;
    row[3] = row[4] = 1.0f;
  }
  auto scaled = g.mul(s3d, ad::make_var({n, 5}, std::move(sv)));
  auto h = g.relu(l1_.forward(g, scaled));
  h = g.relu(l2_.forward(g, h));
  h = g.relu(l3_.forward(g, h));
  auto pooled = g.reshape(g.col_max(h), {1, h->shape[1]});
  return out_.forward(g, pooled);
}

EpisodeContext make_episode_context(const ScenePair& scene, EncoderSet& encoders,
                                    const StateEncoder2d& enc2d,
                                    const ad::Var& point_feats) {
  const int n = static_cast<int>(scene.points.size());
  const int f = encoders.cfg.f;
  const int h = scene.intrinsics.height, w = scene.intrinsics.width;

  EpisodeContext ctx;
  ctx.scene = &scene;
  ad::Graph g(false);

  auto pe = encoders.point_encoder.forward(g, point_feats);
  ctx.point_emb = pe->val;

  auto ie = encoders.image_encoder.forward(g, make_image_var(scene));  // {H*W, f}
  ctx.image_emb_chw.resize(static_cast<size_t>(f) * h * w);
  for (int px = 0; px < h * w; ++px)
    for (int c = 0; c < f; ++c)
      ctx.image_emb_chw[static_cast<size_t>(c) * h * w + px] =
          ie->val[static_cast<size_t>(px) * f + c];

  auto prob = encoders.frustum_head.forward(g, pe, ie);
  ctx.frustum_prob = prob->val;

  ctx.s3d_base.resize(static_cast<size_t>(n) * 5);
  for (int i = 0; i < n; ++i) {
    float* row = ctx.s3d_base.data() + static_cast<size_t>(i) * 5;
    row[0] = static_cast<float>(scene.points[i].x());
    row[1] = static_cast<float>(scene.points[i].y());
    row[2] = static_cast<float>(scene.points[i].z());
    row[3] = ctx.frustum_prob[i];
    row[4] = 0.0f;
  }

  ctx.conv1_image_half = enc2d.image_half_response(ctx.image_emb_chw);
  ctx.embed_calls = 1;
  return ctx;
}

BuiltState build_hybrid_state(ad::Graph& g, const EpisodeContext& ctx,
                              const StateEncoder2d& enc2d, const StateEncoder3d& enc3d,
                              const Se3Pose& current_pose) {
  const ScenePair& scene = *ctx.scene;
  const int n = static_cast<int>(scene.points.size());
  const int f = n > 0 ? static_cast<int>(ctx.point_emb.size()) / n : 0;

  PointCloud transformed(n);
  for (int i = 0; i < n; ++i) transformed[i] = current_pose.apply(scene.points[i]);

  BuiltState out;
  out.current_labels = current_frustum_labels(transformed, scene.intrinsics);

  auto scatter =
      scatter_point_features(transformed, ctx.point_emb, f, scene.intrinsics);
  out.occupied_pixels = static_cast<int>(scatter.occupied.size());

  std::vector<float> s3dv = ctx.s3d_base;
  for (int i = 0; i < n; ++i)
    s3dv[static_cast<size_t>(i) * 5 + 4] = out.current_labels[i] ? 1.0f : 0.0f;
  auto s3d = ad::make_var({n, 5}, std::move(s3dv));

  ad::Var v2d;
  if (g.recording()) {
    auto point_map = ad::make_var({f, scene.intrinsics.height, scene.intrinsics.width},
                                  std::move(scatter.features));
    v2d = enc2d.forward_cached(g, ctx.conv1_image_half, point_map);
  } else {
    v2d = enc2d.forward_sparse(g, ctx.conv1_image_half, scatter);
  }
  auto v3d = enc3d.forward(g, s3d);
  out.state = g.concat_cols(v2d, v3d);
  return out;
}

}  // namespace cmreg
