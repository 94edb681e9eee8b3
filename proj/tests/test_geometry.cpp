#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "cmreg/geometry.hpp"

using namespace cmreg;

namespace {

CameraIntrinsics default_intrinsics() {
  CameraIntrinsics K;
  K.validate();
  return K;
}

Se3Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Quaterniond q(u(rng), u(rng), u(rng), u(rng));
  while (q.norm() < 1e-3) q = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng));
  q.normalize();
  Se3Pose T;
  T.rotation = q.toRotationMatrix();
  T.translation = Eigen::Vector3d(5.0 * u(rng), 5.0 * u(rng), 5.0 * u(rng));
  return T;
}

}  // namespace

TEST_CASE("pose basics: identity, inverse, compose, apply") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Se3Pose T = random_pose(rng);
    CHECK(T.is_valid());

    const Se3Pose inv = T.inverse();
    const Se3Pose id1 = T.compose(inv);
    const Se3Pose id2 = inv.compose(T);
    CHECK((id1.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(id1.translation.norm() < 1e-12);
    CHECK((id2.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(id2.translation.norm() < 1e-12);

    const Eigen::Vector3d p(0.3, -1.2, 2.5);
    const Eigen::Vector3d q = T.apply(p);
    CHECK((T.rotation * p + T.translation - q).norm() < 1e-15);
    CHECK((inv.apply(q) - p).norm() < 1e-12);

    // camera center maps to the origin of the camera frame
    CHECK(T.apply(T.camera_center()).norm() < 1e-9);
  }
}

TEST_CASE("yaw_about_up matches axis-angle rotation about +Y") {
  for (double deg : {-170.0, -45.0, 0.0, 12.5, 90.0, 179.0}) {
    const Se3Pose T = Se3Pose::yaw_about_up(deg);
    const Eigen::Matrix3d ref =
        Eigen::AngleAxisd(deg * M_PI / 180.0, Eigen::Vector3d::UnitY()).toRotationMatrix();
    CHECK((T.rotation - ref).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(T.translation.norm() == 0.0);
    CHECK(T.is_valid());
    // angle recovery used elsewhere in the codebase
    CHECK(std::atan2(T.rotation(0, 2), T.rotation(0, 0)) * 180.0 / M_PI ==
          doctest::Approx(deg).epsilon(1e-12));
  }
}

TEST_CASE("is_valid rejects non-rotations and non-finite poses") {
  Se3Pose T;
  CHECK(T.is_valid());
  T.rotation(0, 0) = 2.0;
  CHECK_FALSE(T.is_valid());

  Se3Pose reflect;
  reflect.rotation = Eigen::Vector3d(1.0, 1.0, -1.0).asDiagonal();  // det = -1
  CHECK_FALSE(reflect.is_valid());

  Se3Pose nan_pose;
  nan_pose.translation.x() = std::nan("");
  CHECK_FALSE(nan_pose.is_valid());
}

TEST_CASE("intrinsics validation") {
  CameraIntrinsics K = default_intrinsics();
  CHECK_NOTHROW(K.validate());
  K.fx = 0.0;
  CHECK_THROWS_AS(K.validate(), std::invalid_argument);
  K = default_intrinsics();
  K.near = 100.0;  // near >= far
  CHECK_THROWS_AS(K.validate(), std::invalid_argument);
  K = default_intrinsics();
  K.width = 0;
  CHECK_THROWS_AS(K.validate(), std::invalid_argument);
}

TEST_CASE("project_point principal ray and behind-camera cases") {
  CameraIntrinsics K;
  K.cx = 256.0;
  K.cy = 80.0;
  K.width = 512;
  K.height = 160;

  const auto pd = project_point({0.0, 0.0, 5.0}, K, Se3Pose::identity());
  REQUIRE(pd.has_value());
  CHECK(pd->pixel.x() == doctest::Approx(256.0).epsilon(1e-12));
  CHECK(pd->pixel.y() == doctest::Approx(80.0).epsilon(1e-12));
  CHECK(pd->depth == doctest::Approx(5.0).epsilon(1e-12));

  CHECK_FALSE(project_point({0.0, 0.0, -1.0}, K, Se3Pose::identity()).has_value());
}

TEST_CASE("project_point clipping: depth range and image border") {
  const CameraIntrinsics K = default_intrinsics();
  CHECK_FALSE(project_point({0.0, 0.0, 0.25}, K, Se3Pose::identity()).has_value());
  CHECK_FALSE(project_point({0.0, 0.0, 100.0}, K, Se3Pose::identity()).has_value());
  CHECK(project_point({0.0, 0.0, K.near}, K, Se3Pose::identity()).has_value());
  CHECK(project_point({0.0, 0.0, K.far}, K, Se3Pose::identity()).has_value());

  // u = W exactly is outside, u just below W is inside
  const double z = 10.0;
  const double x_border = (K.width - K.cx) * z / K.fx;
  CHECK_FALSE(project_point({x_border, 0.0, z}, K, Se3Pose::identity()).has_value());
  const double x_in = (K.width - 1e-6 - K.cx) * z / K.fx;
  CHECK(project_point({x_in, 0.0, z}, K, Se3Pose::identity()).has_value());
  // v = H exactly is outside
  const double y_border = (K.height - K.cy) * z / K.fy;
  CHECK_FALSE(project_point({0.0, y_border, z}, K, Se3Pose::identity()).has_value());
  // u = 0 exactly is inside
  const double x_left = (0.0 - K.cx) * z / K.fx;
  CHECK(project_point({x_left, 0.0, z}, K, Se3Pose::identity()).has_value());
}

TEST_CASE("back_project principal-ray inverse and error handling") {
  const CameraIntrinsics K = default_intrinsics();
  const Eigen::Vector3d p = back_project({K.cx, K.cy}, 7.0, K, Se3Pose::identity());
  CHECK((p - Eigen::Vector3d(0.0, 0.0, 7.0)).norm() < 1e-12);

  CHECK_THROWS_AS(back_project({K.cx, K.cy}, 0.0, K, Se3Pose::identity()),
                  std::invalid_argument);
  CHECK_THROWS_AS(back_project({K.cx, K.cy}, -1.0, K, Se3Pose::identity()),
                  std::invalid_argument);
}

TEST_CASE("projection round-trip on random in-frustum points") {
  const CameraIntrinsics K = default_intrinsics();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> upix_u(0.0, K.width - 1e-9);
  std::uniform_real_distribution<double> upix_v(0.0, K.height - 1e-9);
  std::uniform_real_distribution<double> uz(K.near, K.far);

  int tested = 0;
  for (int i = 0; i < 10000; ++i) {
    const Se3Pose T = random_pose(rng);
    // construct a guaranteed in-frustum world point from a pixel/depth draw
    const Eigen::Vector2d pix(upix_u(rng), upix_v(rng));
    const double z = uz(rng);
    const Eigen::Vector3d world = back_project(pix, z, K, T);

    const auto pd = project_point(world, K, T);
    REQUIRE(pd.has_value());
    CHECK((pd->pixel - pix).norm() < 1e-9);
    CHECK(pd->depth == doctest::Approx(z).epsilon(1e-12));

    const Eigen::Vector3d rt = back_project(pd->pixel, pd->depth, K, T);
    CHECK((rt - world).norm() < 1e-9);
    ++tested;
  }
  CHECK(tested == 10000);
}

TEST_CASE("render_depth_map: empty frustum, single point, minimum-depth rule") {
  const CameraIntrinsics K = default_intrinsics();

  SUBCASE("no in-frustum points leaves every pixel empty") {
    const PointCloud P = {{0.0, 0.0, -5.0}, {0.0, 0.0, 200.0}};
    const DepthMap d = render_depth_map(P, K, Se3Pose::identity());
    REQUIRE(d.width == K.width);
    REQUIRE(d.height == K.height);
    for (double v : d.depth) CHECK(v == DepthMap::kEmpty);
  }

  SUBCASE("single in-frustum point fills exactly one pixel") {
    const PointCloud P = {{0.5, -0.2, 8.0}};
    const DepthMap d = render_depth_map(P, K, Se3Pose::identity());
    int filled = 0;
    for (double v : d.depth) filled += (v != DepthMap::kEmpty);
    CHECK(filled == 1);
  }

  SUBCASE("pixel collision keeps the nearest depth") {
    // both points on the principal ray: same pixel, depths 4 and 6
    const PointCloud P = {{0.0, 0.0, 6.0}, {0.0, 0.0, 4.0}};
    const DepthMap d = render_depth_map(P, K, Se3Pose::identity());
    CHECK(d.at(static_cast<int>(K.cx), static_cast<int>(K.cy)) ==
          doctest::Approx(4.0).epsilon(1e-12));
  }

  SUBCASE("exhaustive per-pixel minimum oracle on a random cloud") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ux(-10.0, 10.0), uy(-3.0, 3.0), uz(-5.0, 60.0);
    PointCloud P;
    for (int i = 0; i < 2000; ++i) P.push_back({ux(rng), uy(rng), uz(rng)});

    const DepthMap d = render_depth_map(P, K, Se3Pose::identity());
    std::vector<double> oracle(static_cast<size_t>(K.width) * K.height, DepthMap::kEmpty);
    for (const auto& p : P) {
      const auto pd = project_point(p, K, Se3Pose::identity());
      if (!pd) continue;
      const size_t idx = static_cast<size_t>(std::floor(pd->pixel.y())) * K.width +
                         static_cast<size_t>(std::floor(pd->pixel.x()));
      if (oracle[idx] == DepthMap::kEmpty || pd->depth < oracle[idx]) oracle[idx] = pd->depth;
    }
    REQUIRE(d.depth.size() == oracle.size());
    for (size_t i = 0; i < oracle.size(); ++i) CHECK(d.depth[i] == oracle[i]);
  }

  SUBCASE("every filled pixel depth lies in [near, far]") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-40.0, 40.0);
    PointCloud P;
    for (int i = 0; i < 3000; ++i) P.push_back({u(rng), u(rng), u(rng)});
    const DepthMap d = render_depth_map(P, K, Se3Pose::identity());
    for (double v : d.depth) {
      if (v == DepthMap::kEmpty) continue;
      CHECK(v >= K.near);
      CHECK(v <= K.far);
    }
  }
}

TEST_CASE("frustum_mask agrees with per-point projection") {
  const CameraIntrinsics K = default_intrinsics();
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  PointCloud P;
  for (int i = 0; i < 1000; ++i) P.push_back({u(rng), u(rng), u(rng)});
  const Se3Pose T = random_pose(rng);

  const auto mask = frustum_mask(P, K, T);
  REQUIRE(mask.size() == P.size());
  for (size_t i = 0; i < P.size(); ++i) {
    CHECK(static_cast<bool>(mask[i]) == project_point(P[i], K, T).has_value());
  }

  // trivial cases
  CHECK(frustum_mask({{0.0, 0.0, 40.0}}, K, Se3Pose::identity())[0] == 1);
  CHECK(frustum_mask({{0.0, 0.0, -40.0}}, K, Se3Pose::identity())[0] == 0);
}

TEST_CASE("compose_disentangled semantics") {
  std::mt19937_64 rng(19);
  const Se3Pose current = random_pose(rng);

  SUBCASE("identity action is a no-op") {
    const Se3Pose out = compose_disentangled(Se3Pose::identity(), current);
    CHECK((out.rotation - current.rotation).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.translation - current.translation).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("pure rotations leave the translation bit-identical") {
    Se3Pose acc = current;
    for (int i = 0; i < 50; ++i) {
      acc = compose_disentangled(Se3Pose::yaw_about_up(3.7 * (i + 1)), acc);
      CHECK(acc.translation.x() == current.translation.x());
      CHECK(acc.translation.y() == current.translation.y());
      CHECK(acc.translation.z() == current.translation.z());
    }
  }

  SUBCASE("pure translations accumulate additively") {
    Se3Pose t1, t2;
    t1.translation = {1.0, -2.0, 0.5};
    t2.translation = {0.25, 4.0, -1.0};
    const Se3Pose out = compose_disentangled(t2, compose_disentangled(t1, current));
    CHECK((out.translation - (current.translation + t1.translation + t2.translation)).norm() <
          1e-15);
    CHECK((out.rotation - current.rotation).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("pose_error oracles") {
  SUBCASE("estimate equals truth") {
    std::mt19937_64 rng(23);
    const Se3Pose T = random_pose(rng);
    const PoseError e = pose_error(T, T);
    CHECK(e.rre_deg == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(e.rte_m == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("5 degree yaw with a 3-4-0 camera-center offset gives (5, 5)") {
    const Se3Pose truth = Se3Pose::identity();
    Se3Pose est = Se3Pose::yaw_about_up(5.0);
    // displace the camera center by (3, 4, 0): t = -R * center
    est.translation = -(est.rotation * Eigen::Vector3d(3.0, 4.0, 0.0));
    const PoseError e = pose_error(est, truth);
    CHECK(e.rre_deg == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(e.rte_m == doctest::Approx(5.0).epsilon(1e-6));
  }

  SUBCASE("antipodal yaw gives 180 degrees") {
    const PoseError e = pose_error(Se3Pose::yaw_about_up(180.0), Se3Pose::identity());
    CHECK(e.rre_deg == doctest::Approx(180.0).epsilon(1e-9));
  }

  SUBCASE("rotation error is symmetric and in range") {
    std::mt19937_64 rng(29);
    for (int i = 0; i < 100; ++i) {
      const Se3Pose A = random_pose(rng), B = random_pose(rng);
      const PoseError ab = pose_error(A, B), ba = pose_error(B, A);
      CHECK(ab.rre_deg == doctest::Approx(ba.rre_deg).epsilon(1e-9));
      CHECK(ab.rre_deg >= 0.0);
      CHECK(ab.rre_deg <= 180.0);
      CHECK(ab.rte_m >= 0.0);
      CHECK(ab.rte_m == doctest::Approx(ba.rte_m).epsilon(1e-12));
    }
  }

  SUBCASE("rte measures camera-center distance in the world frame") {
    // same camera center expressed under two different rotations -> rte 0
    const Eigen::Vector3d center(2.0, 1.0, -3.0);
    Se3Pose a = Se3Pose::yaw_about_up(30.0);
    a.translation = -(a.rotation * center);
    Se3Pose b = Se3Pose::yaw_about_up(-60.0);
    b.translation = -(b.rotation * center);
    CHECK(pose_error(a, b).rte_m == doctest::Approx(0.0).epsilon(1e-12));
  }
}
