#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cmreg/agent.hpp"
#include "cmreg/state.hpp"

using namespace cmreg;

namespace {

ScenePair test_scene(uint64_t seed) {
  SceneConfig cfg;
  cfg.n_points = 1024;
  cfg.seed = seed;
  return generate_scene(cfg);
}

PointCloud transform_cloud(const PointCloud& pts, const Se3Pose& T) {
  PointCloud out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(T.apply(p));
  return out;
}

// a pose looking straight up: the desk-scale scenes have nothing overhead
Se3Pose skyward_pose() {
  Se3Pose T;
  T.rotation << 1, 0, 0, 0, 0, -1, 0, 1, 0;  // camera z = world +Y
  T.translation = Eigen::Vector3d(0.0, 0.0, -200.0);
  return T;
}

}  // namespace

TEST_CASE("state config validation") {
  StateConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.f_prime = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = StateConfig{};
  cfg.conv1_channels = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("scatter_point_features oracles") {
  CameraIntrinsics K;
  const int f = 4;

  SUBCASE("single point lands its feature exactly; everything else is zero") {
    PointCloud pts = {{0.0, 0.0, 5.0}};  // principal ray -> pixel (cx, cy)
    std::vector<float> emb = {1.0f, -2.0f, 3.0f, 0.5f};
    const ScatterResult r = scatter_point_features(pts, emb, f, K);

    const int u = static_cast<int>(K.cx), v = static_cast<int>(K.cy);
    const size_t hw = static_cast<size_t>(K.width) * K.height;
    const size_t pix = static_cast<size_t>(v) * K.width + u;
    REQUIRE(r.features.size() == hw * f);
    for (int c = 0; c < f; ++c) {
      CHECK(r.features[c * hw + pix] == emb[c]);
    }
    double sum = 0.0;
    for (float x : r.features) sum += std::abs(x);
    CHECK(sum == doctest::Approx(1.0 + 2.0 + 3.0 + 0.5));
    CHECK(r.occupied == std::vector<int>{static_cast<int>(pix)});
    CHECK(r.depth.at(u, v) == doctest::Approx(5.0));
  }

  SUBCASE("two points at one pixel average their features") {
    PointCloud pts = {{0.0, 0.0, 5.0}, {0.0, 0.0, 7.0}};
    std::vector<float> emb = {2.0f, 4.0f, 0.0f, 1.0f, 0.0f, -2.0f, 1.0f, 3.0f};
    const ScatterResult r = scatter_point_features(pts, emb, f, K);
    const size_t hw = static_cast<size_t>(K.width) * K.height;
    const size_t pix = static_cast<size_t>(static_cast<int>(K.cy)) * K.width +
                       static_cast<int>(K.cx);
    CHECK(r.features[0 * hw + pix] == doctest::Approx(1.0f));
    CHECK(r.features[1 * hw + pix] == doctest::Approx(1.0f));
    CHECK(r.features[2 * hw + pix] == doctest::Approx(0.5f));
    CHECK(r.features[3 * hw + pix] == doctest::Approx(2.0f));
    // depth map keeps the nearest point
    CHECK(r.depth.at(static_cast<int>(K.cx), static_cast<int>(K.cy)) == doctest::Approx(5.0));
  }

  SUBCASE("brute-force per-pixel grouping on a real scene") {
    const ScenePair s = test_scene(6);
    const PointCloud pts = transform_cloud(s.points, s.gt_pose);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> emb(pts.size() * f);
    for (auto& x : emb) x = u(rng);

    const ScatterResult r = scatter_point_features(pts, emb, f, K);

    const size_t hw = static_cast<size_t>(K.width) * K.height;
    std::vector<double> sums(hw * f, 0.0);
    std::vector<int> counts(hw, 0);
    size_t in_frustum = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
      const auto pd = project_point(pts[i], K, Se3Pose::identity());
      if (!pd) continue;
      ++in_frustum;
      const size_t pix = static_cast<size_t>(std::floor(pd->pixel.y())) * K.width +
                         static_cast<size_t>(std::floor(pd->pixel.x()));
      ++counts[pix];
      for (int c = 0; c < f; ++c) sums[c * hw + pix] += emb[i * f + c];
    }
    size_t occupied = 0, total_grouped = 0;
    for (size_t pix = 0; pix < hw; ++pix) {
      if (counts[pix] == 0) {
        for (int c = 0; c < f; ++c) CHECK(r.features[c * hw + pix] == 0.0f);
        CHECK_FALSE(r.depth.depth[pix] != DepthMap::kEmpty);
        continue;
      }
      ++occupied;
      total_grouped += counts[pix];
      for (int c = 0; c < f; ++c) {
        CHECK(r.features[c * hw + pix] ==
              doctest::Approx(sums[c * hw + pix] / counts[pix]).epsilon(1e-4));
      }
    }
    // group sizes add up to the in-frustum count
    CHECK(total_grouped == in_frustum);
    CHECK(r.occupied.size() == occupied);
    // depth map equals the geometry module's rasterization
    const DepthMap ref = render_depth_map(pts, K, Se3Pose::identity());
    CHECK(r.depth.depth == ref.depth);
  }
}

TEST_CASE("current_frustum_labels agrees with the geometry oracle") {
  const ScenePair s = test_scene(9);
  const CameraIntrinsics& K = s.intrinsics;

  SUBCASE("aligned pose reproduces the ground-truth labels") {
    const PointCloud pts = transform_cloud(s.points, s.gt_pose);
    CHECK(current_frustum_labels(pts, K) == s.gt_frustum_labels);
  }

  SUBCASE("all points behind the camera give all-false") {
    PointCloud behind;
    for (const auto& p : s.points) behind.push_back({p.x(), p.y(), -std::abs(p.z()) - 1.0});
    const auto labels = current_frustum_labels(behind, K);
    for (uint8_t l : labels) CHECK(l == 0);
  }

  SUBCASE("random poses match frustum_mask") {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int t = 0; t < 5; ++t) {
      Se3Pose T = Se3Pose::yaw_about_up(u(rng) * 30.0);
      T.translation = Eigen::Vector3d(u(rng), 0.3 * u(rng), u(rng));
      const Se3Pose pose = T.compose(s.gt_pose);
      const PointCloud pts = transform_cloud(s.points, pose);
      CHECK(current_frustum_labels(pts, K) ==
            frustum_mask(s.points, K, pose));
    }
  }
}

TEST_CASE("2D state encoder: shape, determinism, zero-state constancy") {
  StateConfig cfg;
  cfg.f = 8;
  const int h = 16, w = 32;
  ad::ParameterStore ps;
  std::mt19937 rng(21);
  StateEncoder2d enc(ps, cfg, h, w, rng);

  ad::Var img = ad::make_var({cfg.f, h, w});
  ad::Var pt = ad::make_var({cfg.f, h, w});
  std::mt19937_64 vals(3);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& x : img->val) x = u(vals);
  for (auto& x : pt->val) x = u(vals);

  ad::Graph g(false);
  ad::Var out = enc.forward(g, img, pt);
  REQUIRE(out->shape == std::vector<int>{1, cfg.f_prime});
  for (float x : out->val) CHECK(std::isfinite(x));

  ad::Var out2 = enc.forward(g, img, pt);
  CHECK(out->val == out2->val);

  // all-zero state: a fixed vector determined by the biases
  ad::Var z1 = ad::make_var({cfg.f, h, w});
  ad::Var z2 = ad::make_var({cfg.f, h, w});
  ad::Var zero_out = enc.forward(g, z1, z2);
  ad::Var zero_out2 = enc.forward(g, z1, z2);
  CHECK(zero_out->val == zero_out2->val);
  CHECK(zero_out->val != out->val);
}

TEST_CASE("3D state encoder: shape, permutation and duplication invariance") {
  StateConfig cfg;
  ad::ParameterStore ps;
  std::mt19937 rng(22);
  StateEncoder3d enc(ps, cfg, rng);

  const int n = 200;
  ad::Var s3d = ad::make_var({n, 5});
  std::mt19937_64 vals(4);
  std::uniform_real_distribution<float> uc(-20.0f, 20.0f), up(0.0f, 1.0f);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) s3d->val[i * 5 + j] = uc(vals);
    s3d->val[i * 5 + 3] = up(vals);
    s3d->val[i * 5 + 4] = (i % 3 == 0) ? 1.0f : 0.0f;
  }

  ad::Graph g(false);
  ad::Var out = enc.forward(g, s3d);
  REQUIRE(out->shape == std::vector<int>{1, cfg.f_prime});

  // permuted rows
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = (i * 37) % n;
  ad::Var shuffled = ad::make_var({n, 5});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 5; ++j) shuffled->val[i * 5 + j] = s3d->val[perm[i] * 5 + j];
  ad::Var out_p = enc.forward(g, shuffled);
  for (int j = 0; j < cfg.f_prime; ++j) {
    CHECK(out_p->val[j] == doctest::Approx(out->val[j]).epsilon(1e-6));
  }

  // duplicated rows leave the max-pool unchanged
  ad::Var doubled = ad::make_var({2 * n, 5});
  std::copy(s3d->val.begin(), s3d->val.end(), doubled->val.begin());
  std::copy(s3d->val.begin(), s3d->val.end(), doubled->val.begin() + n * 5);
  ad::Var out_d = enc.forward(g, doubled);
  for (int j = 0; j < cfg.f_prime; ++j) {
    CHECK(out_d->val[j] == doctest::Approx(out->val[j]).epsilon(1e-6));
  }
}

TEST_CASE("hybrid state construction and the one-shot reuse contract") {
  const ScenePair s = test_scene(12);
  EncoderSet encoders(EmbedConfig{}, 31);
  AgentConfig acfg;
  Agent agent(acfg, s.intrinsics.height, s.intrinsics.width, 33);

  const ad::Var feats = compute_point_features(s.points, s.intensities, encoders.cfg.knn_k);
  encoders.point_encoder.eval_count = 0;
  encoders.image_encoder.eval_count = 0;
  EpisodeContext ctx = make_episode_context(s, encoders, agent.enc2d, feats);

  SUBCASE("context holds one-shot artifacts of the right sizes") {
    const size_t n = s.points.size();
    const size_t hw = static_cast<size_t>(s.intrinsics.width) * s.intrinsics.height;
    CHECK(ctx.point_emb.size() == n * encoders.cfg.f);
    CHECK(ctx.image_emb_chw.size() == hw * encoders.cfg.f);
    CHECK(ctx.frustum_prob.size() == n);
    for (float p : ctx.frustum_prob) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
    CHECK(ctx.s3d_base.size() == n * 5);
    // column 3 is the frustum probability; columns 0-2 the untransformed P
    for (size_t i = 0; i < n; i += 97) {
      CHECK(ctx.s3d_base[i * 5 + 0] == doctest::Approx(s.points[i].x()));
      CHECK(ctx.s3d_base[i * 5 + 3] == ctx.frustum_prob[i]);
    }
  }

  SUBCASE("ten steps re-embed nothing") {
    PerturbSpec spec;
    spec.seed = 5;
    Se3Pose pose = perturb_pose(s.gt_pose, spec);
    for (int k = 0; k < 10; ++k) {
      ad::Graph g(false);
      const BuiltState built = build_hybrid_state(g, ctx, agent.enc2d, agent.enc3d, pose);
      REQUIRE(built.state->shape == std::vector<int>{1, 2 * acfg.state.f_prime});
      for (float x : built.state->val) CHECK(std::isfinite(x));
      pose = compose_disentangled(Se3Pose::yaw_about_up(1.0), pose);
    }
    CHECK(encoders.point_encoder.eval_count == 1);
    CHECK(encoders.image_encoder.eval_count == 1);
  }

  SUBCASE("sparse and dense first-convolution paths agree") {
    PerturbSpec spec;
    spec.seed = 17;
    const Se3Pose pose = perturb_pose(s.gt_pose, spec);
    ad::Graph dense(true);   // recording graph uses the dense path
    ad::Graph sparse(false); // inference graph uses the sparse path
    const BuiltState a = build_hybrid_state(dense, ctx, agent.enc2d, agent.enc3d, pose);
    const BuiltState b = build_hybrid_state(sparse, ctx, agent.enc2d, agent.enc3d, pose);
    REQUIRE(a.state->val.size() == b.state->val.size());
    CHECK(a.occupied_pixels == b.occupied_pixels);
    CHECK(a.occupied_pixels > 0);
    for (size_t i = 0; i < a.state->val.size(); ++i) {
      CHECK(a.state->val[i] == doctest::Approx(b.state->val[i]).epsilon(1e-4));
    }
    CHECK(a.current_labels == b.current_labels);
    CHECK(a.current_labels ==
          frustum_mask(s.points, s.intrinsics, pose));
  }

  SUBCASE("neutral poses: empty frustum zeroes the scattered half") {
    const Se3Pose neutral = skyward_pose();
    const auto mask = frustum_mask(s.points, s.intrinsics, neutral);
    size_t in = 0;
    for (uint8_t m : mask) in += m;
    REQUIRE(in == 0);

    ad::Graph g(false);
    const BuiltState built = build_hybrid_state(g, ctx, agent.enc2d, agent.enc3d, neutral);
    CHECK(built.occupied_pixels == 0);
    for (uint8_t l : built.current_labels) CHECK(l == 0);
    for (float x : built.state->val) CHECK(std::isfinite(x));

    // the scattered features themselves are identically zero
    const PointCloud pts = transform_cloud(s.points, neutral);
    const ScatterResult r =
        scatter_point_features(pts, ctx.point_emb, encoders.cfg.f, s.intrinsics);
    for (float x : r.features) CHECK(x == 0.0f);

    // a second neutral pose yields the same all-false y^k and, because the
    // 3D state depends on the pose only through y^k, the same hybrid state
    const Se3Pose neutral2 = compose_disentangled(Se3Pose::yaw_about_up(45.0), neutral);
    const auto mask2 = frustum_mask(s.points, s.intrinsics, neutral2);
    size_t in2 = 0;
    for (uint8_t m : mask2) in2 += m;
    REQUIRE(in2 == 0);
    const BuiltState built2 = build_hybrid_state(g, ctx, agent.enc2d, agent.enc3d, neutral2);
    CHECK(built2.state->val == built.state->val);
  }
}
