#pragma once

#include <Eigen/Core>
#include <optional>
#include <vector>

namespace cmreg {

using PointCloud = std::vector<Eigen::Vector3d>;

// Rigid transformation mapping world points into the camera frame,
// p_cam = R * p + t.
struct Se3Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Se3Pose identity() { return {}; }
  // Rotation about the camera up-axis (0,1,0), positive angle in degrees.
  static Se3Pose yaw_about_up(double degrees);

  Se3Pose inverse() const;
  // Ordinary composition: (*this) then applied after rhs, i.e. T = this * rhs.
  Se3Pose compose(const Se3Pose& rhs) const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const;
  // Camera position in the world frame, -R^T t.
  Eigen::Vector3d camera_center() const;
  bool is_valid(double tol = 1e-9) const;
};

struct CameraIntrinsics {
  double fx = 128.0;
  double fy = 128.0;
  double cx = 128.0;
  double cy = 40.0;
  int width = 256;
  int height = 80;
  double near = 0.5;
  double far = 80.0;

  void validate() const;  // throws std::invalid_argument on violation
};

struct DepthMap {
  static constexpr double kEmpty = -1.0;

  int width = 0;
  int height = 0;
  std::vector<double> depth;  // row-major H*W, kEmpty where unfilled

  double at(int u, int v) const { return depth[static_cast<size_t>(v) * width + u]; }
  bool filled(int u, int v) const { return at(u, v) != kEmpty; }
};

struct PoseError {
  double rre_deg = 0.0;
  double rte_m = 0.0;
};

struct PixelDepth {
  Eigen::Vector2d pixel;  // continuous coordinates, integer cell = floor
  double depth;
};

// Pinhole projection of a world point. Returns nullopt when the point is
// outside the frustum (depth not in [near, far] or pixel off-grid; points
// exactly on the right/bottom border count as outside).
std::optional<PixelDepth> project_point(const Eigen::Vector3d& p,
                                        const CameraIntrinsics& K,
                                        const Se3Pose& T);

// Rasterizes the cloud into a z-buffered depth map (nearest depth wins).
DepthMap render_depth_map(const PointCloud& points, const CameraIntrinsics& K,
                          const Se3Pose& T);

// Inverse of project_point: reconstructs the camera-frame point from
// (pixel, depth) and maps it back through T^-1. Throws on depth <= 0.
Eigen::Vector3d back_project(const Eigen::Vector2d& pixel, double depth,
                             const CameraIntrinsics& K, const Se3Pose& T);

// Per-point in-frustum flags, flag[i] <=> project_point(p_i) succeeds.
std::vector<uint8_t> frustum_mask(const PointCloud& points,
                                  const CameraIntrinsics& K, const Se3Pose& T);

// Disentangled accumulation: rotation composes, translations add in the
// camera frame, so rotation actions never move the translation component.
Se3Pose compose_disentangled(const Se3Pose& action, const Se3Pose& current);

// RRE from the relative rotation angle (degrees), RTE between the camera
// centers expressed in the world frame (meters).
PoseError pose_error(const Se3Pose& estimate, const Se3Pose& truth);

}  // namespace cmreg
