#include "cmreg/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace cmreg {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Se3Pose Se3Pose::yaw_about_up(double degrees) {
  const double a = degrees * kPi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  Se3Pose out;
  out.rotation << c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c;
  return out;
}

Se3Pose Se3Pose::inverse() const {
  Se3Pose out;
  out.rotation = rotation.transpose();
  out.translation = -(out.rotation * translation);
  return out;
}

Se3Pose Se3Pose::compose(const Se3Pose& rhs) const {
  Se3Pose out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation * rhs.translation + translation;
  return out;
}

Eigen::Vector3d Se3Pose::apply(const Eigen::Vector3d& p) const {
  return rotation * p + translation;
}

Eigen::Vector3d Se3Pose::camera_center() const {
  return -(rotation.transpose() * translation);
}

bool Se3Pose::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(rotation.determinant() - 1.0) <= tol;
}

void CameraIntrinsics::validate() const {
  if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("intrinsics: image size must be positive");
  if (!(0.0 < near && near < far)) throw std::invalid_argument("intrinsics: need 0 < near < far");
}

std::optional<PixelDepth> project_point(const Eigen::Vector3d& p,
                                        const CameraIntrinsics& K,
                                        const Se3Pose& T) {
  const Eigen::Vector3d q = T.apply(p);
  const double z = q.z();
  if (!(z >= K.near && z <= K.far)) return std::nullopt;
  const double u = (K.fx * q.x() + K.cx * z) / z;
  const double v = (K.fy * q.y() + K.cy * z) / z;
  if (!(u >= 0.0 && u < K.width && v >= 0.0 && v < K.height)) return std::nullopt;
  return PixelDepth{{u, v}, z};
}

DepthMap render_depth_map(const PointCloud& points, const CameraIntrinsics& K,
                          const Se3Pose& T) {
  DepthMap d;
  d.width = K.width;
  d.height = K.height;
  d.depth.assign(static_cast<size_t>(K.width) * K.height, DepthMap::kEmpty);
  for (const auto& p : points) {
    const auto pd = project_point(p, K, T);
    if (!pd) continue;
    const int u = static_cast<int>(std::floor(pd->pixel.x()));
    const int v = static_cast<int>(std::floor(pd->pixel.y()));
    double& cell = d.depth[static_cast<size_t>(v) * K.width + u];
    if (cell == DepthMap::kEmpty || pd->depth < cell) cell = pd->depth;
  }
  return d;
}

Eigen::Vector3d back_project(const Eigen::Vector2d& pixel, double depth,
                             const CameraIntrinsics& K, const Se3Pose& T) {
  if (!(depth > 0.0)) throw std::invalid_argument("back_project: depth must be positive");
  const Eigen::Vector3d cam((pixel.x() - K.cx) / K.fx * depth,
                            (pixel.y() - K.cy) / K.fy * depth, depth);
  return T.inverse().apply(cam);
}

std::vector<uint8_t> frustum_mask(const PointCloud& points,
                                  const CameraIntrinsics& K, const Se3Pose& T) {
  std::vector<uint8_t> mask(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    mask[i] = project_point(points[i], K, T).has_value() ? 1 : 0;
  }
  return mask;
}

Se3Pose compose_disentangled(const Se3Pose& action, const Se3Pose& current) {
  Se3Pose out;
  out.rotation = action.rotation * current.rotation;
  out.translation = current.translation + action.translation;
  return out;
}

PoseError pose_error(const Se3Pose& estimate, const Se3Pose& truth) {
  const Eigen::Matrix3d rel = estimate.rotation * truth.rotation.transpose();
  const double c = std::clamp((rel.trace() - 1.0) * 0.5, -1.0, 1.0);
  PoseError e;
  e.rre_deg = std::acos(c) * 180.0 / kPi;
  e.rte_m = (estimate.camera_center() - truth.camera_center()).norm();
  return e;
}

}  // namespace cmreg
