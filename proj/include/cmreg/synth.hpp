#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmreg/geometry.hpp"

namespace cmreg {

struct SceneConfig {
  int n_points = 8192;
  int width = 256;
  int height = 80;
  uint64_t seed = 0;

  // structure parameters
  double ground_extent = 40.0;  // half extent of the ground square, meters
  double ground_fraction = 0.35;
  int min_boxes = 4, max_boxes = 9;
  double min_box_size = 0.8, max_box_size = 4.0;
  int min_walls = 2, max_walls = 5;
  double min_wall_length = 4.0, max_wall_length = 14.0;
  double min_wall_height = 1.5, max_wall_height = 3.5;
  double object_spread = 24.0;  // objects placed within +/- this of origin

  // camera
  double fx = 128.0, fy = 128.0;
  double near = 0.5, far = 80.0;
  double min_camera_radius = 10.0, max_camera_radius = 18.0;
  double min_camera_height = 1.4, max_camera_height = 1.8;
  double lookat_jitter = 5.0;

  void validate() const;
};

struct PerturbSpec {
  double max_yaw_deg = 360.0;
  double max_planar_m = 10.0;
  uint64_t seed = 0;

  void validate() const;
};

struct ScenePair {
  PointCloud points;                       // N x 3, meters
  std::vector<double> intensities;         // per point, in [0,1]
  std::vector<double> image;               // H*W row-major, in [0,1]
  CameraIntrinsics intrinsics;
  Se3Pose gt_pose;                         // world -> camera of the image
  std::vector<uint8_t> gt_frustum_labels;  // frustum_mask(points, K, gt_pose)
};

// Deterministic scene generation: ground plane plus boxes and walls sampled
// as surface points with per-point intensity, an intensity image splatted
// through the gt camera. Retries with derived seeds while fewer than 5% of
// the points land in the gt frustum; throws after 100 attempts.
ScenePair generate_scene(const SceneConfig& config);

// Initial pose: yaw about the up-axis uniform in [0, max_yaw) composed with
// a planar (camera x/z) translation of uniform magnitude and direction,
// left-applied to the gt pose.
Se3Pose perturb_pose(const Se3Pose& gt, const PerturbSpec& spec);

// Uniform draw of in-frustum point indices, without replacement when enough
// points exist, with replacement otherwise. Throws on an empty frustum.
std::vector<int> sample_frustum_points(const ScenePair& scene, int n,
                                       uint64_t seed);

// Versioned little-endian binary sample files (see docs/sample_format.md).
void save_sample(const ScenePair& scene, const std::string& path);
ScenePair load_sample(const std::string& path);

}  // namespace cmreg
