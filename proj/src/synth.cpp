#include "cmreg/synth.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "sample files are little-endian; big-endian hosts unsupported");

namespace cmreg {

namespace {

constexpr double kPi = 3.14159265358979323846;

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct Surface {
  double area = 0.0;
  double albedo = 0.5;
  std::function<Eigen::Vector3d(Rng&)> sample;
};

Eigen::Vector3d yaw_rotate(double angle, const Eigen::Vector3d& p) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x() + s * p.z(), p.y(), -s * p.x() + c * p.z()};
}

void add_box(std::vector<Surface>& surfaces, Rng& rng, const SceneConfig& cfg) {
  const double sx = uniform(rng, cfg.min_box_size, cfg.max_box_size);
  const double sy = uniform(rng, cfg.min_box_size, cfg.max_box_size);
  const double sz = uniform(rng, cfg.min_box_size, cfg.max_box_size);
  const double cx = uniform(rng, -cfg.object_spread, cfg.object_spread);
  const double cz = uniform(rng, -cfg.object_spread, cfg.object_spread);
  const double yaw = uniform(rng, 0.0, 2.0 * kPi);
  const double albedo = uniform(rng, 0.15, 0.95);

  // five faces: +x, -x, +z, -z, top (no bottom)
  struct Face { Eigen::Vector3d origin, a, b; };
  const std::vector<Face> faces = {
      {{sx / 2, 0, -sz / 2}, {0, sy, 0}, {0, 0, sz}},
      {{-sx / 2, 0, -sz / 2}, {0, sy, 0}, {0, 0, sz}},
      {{-sx / 2, 0, sz / 2}, {sx, 0, 0}, {0, sy, 0}},
      {{-sx / 2, 0, -sz / 2}, {sx, 0, 0}, {0, sy, 0}},
      {{-sx / 2, sy, -sz / 2}, {sx, 0, 0}, {0, 0, sz}},
  };
  for (const auto& f : faces) {
    Surface s;
    s.area = f.a.norm() * f.b.norm();
    s.albedo = albedo;
    s.sample = [f, yaw, cx, cz](Rng& r) {
      const Eigen::Vector3d local =
          f.origin + uniform(r, 0.0, 1.0) * f.a + uniform(r, 0.0, 1.0) * f.b;
      Eigen::Vector3d p = yaw_rotate(yaw, local);
      p.x() += cx;
      p.z() += cz;
      return p;
    };
    surfaces.push_back(std::move(s));
  }
}

void add_wall(std::vector<Surface>& surfaces, Rng& rng, const SceneConfig& cfg) {
  const double len = uniform(rng, cfg.min_wall_length, cfg.max_wall_length);
  const double h = uniform(rng, cfg.min_wall_height, cfg.max_wall_height);
  const double cx = uniform(rng, -cfg.object_spread, cfg.object_spread);
  const double cz = uniform(rng, -cfg.object_spread, cfg.object_spread);
  const double yaw = uniform(rng, 0.0, 2.0 * kPi);
  const double albedo = uniform(rng, 0.15, 0.95);

  Surface s;
  s.area = len * h;
  s.albedo = albedo;
  s.sample = [len, h, yaw, cx, cz](Rng& r) {
    const Eigen::Vector3d local(uniform(r, -len / 2, len / 2), uniform(r, 0.0, h), 0.0);
    Eigen::Vector3d p = yaw_rotate(yaw, local);
    p.x() += cx;
    p.z() += cz;
    return p;
  };
  surfaces.push_back(std::move(s));
}

Se3Pose sample_camera_pose(Rng& rng, const SceneConfig& cfg) {
  const double radius = uniform(rng, cfg.min_camera_radius, cfg.max_camera_radius);
  const double angle = uniform(rng, 0.0, 2.0 * kPi);
  const double height = uniform(rng, cfg.min_camera_height, cfg.max_camera_height);
  const Eigen::Vector3d center(radius * std::cos(angle), height, radius * std::sin(angle));

  // level camera: target shares the camera height, so y_cam == world up
  Eigen::Vector3d target(uniform(rng, -cfg.lookat_jitter, cfg.lookat_jitter), height,
                         uniform(rng, -cfg.lookat_jitter, cfg.lookat_jitter));
  if ((target - center).head<2>().norm() < 1e-6) target.x() += 1.0;

  const Eigen::Vector3d up(0.0, 1.0, 0.0);
  const Eigen::Vector3d z = (target - center).normalized();
  const Eigen::Vector3d x = up.cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);

  Se3Pose pose;
  pose.rotation.row(0) = x;
  pose.rotation.row(1) = y;
  pose.rotation.row(2) = z;
  pose.translation = -(pose.rotation * center);
  return pose;
}

ScenePair generate_once(const SceneConfig& cfg, uint64_t seed) {
  Rng rng(seed);

  std::vector<Surface> surfaces;
  {
    Surface ground;
    ground.area = 4.0 * cfg.ground_extent * cfg.ground_extent;
    ground.albedo = uniform(rng, 0.2, 0.6);
    const double e = cfg.ground_extent;
    ground.sample = [e](Rng& r) {
      return Eigen::Vector3d(uniform(r, -e, e), 0.0, uniform(r, -e, e));
    };
    surfaces.push_back(std::move(ground));
  }
  const int n_boxes = std::uniform_int_distribution<int>(cfg.min_boxes, cfg.max_boxes)(rng);
  for (int i = 0; i < n_boxes; ++i) add_box(surfaces, rng, cfg);
  const int n_walls = std::uniform_int_distribution<int>(cfg.min_walls, cfg.max_walls)(rng);
  for (int i = 0; i < n_walls; ++i) add_wall(surfaces, rng, cfg);

  ScenePair scene;
  scene.points.reserve(cfg.n_points);
  scene.intensities.reserve(cfg.n_points);

  const int n_ground = static_cast<int>(std::lround(cfg.ground_fraction * cfg.n_points));
  std::vector<double> object_areas;
  for (size_t i = 1; i < surfaces.size(); ++i) object_areas.push_back(surfaces[i].area);
  std::discrete_distribution<int> pick_object(object_areas.begin(), object_areas.end());
  std::normal_distribution<double> jitter(0.0, 0.03);

  for (int i = 0; i < cfg.n_points; ++i) {
    const Surface& s = (i < n_ground) ? surfaces[0] : surfaces[1 + pick_object(rng)];
    scene.points.push_back(s.sample(rng));
    scene.intensities.push_back(std::clamp(s.albedo + jitter(rng), 0.0, 1.0));
  }

  scene.intrinsics.fx = cfg.fx;
  scene.intrinsics.fy = cfg.fy;
  scene.intrinsics.cx = cfg.width / 2.0;
  scene.intrinsics.cy = cfg.height / 2.0;
  scene.intrinsics.width = cfg.width;
  scene.intrinsics.height = cfg.height;
  scene.intrinsics.near = cfg.near;
  scene.intrinsics.far = cfg.far;
  scene.intrinsics.validate();

  scene.gt_pose = sample_camera_pose(rng, cfg);
  scene.gt_frustum_labels = frustum_mask(scene.points, scene.intrinsics, scene.gt_pose);

  // splat intensities through the gt camera, nearest depth wins
  const size_t n_pix = static_cast<size_t>(cfg.width) * cfg.height;
  scene.image.assign(n_pix, 0.0);
  std::vector<double> zbuf(n_pix, -1.0);
  for (size_t i = 0; i < scene.points.size(); ++i) {
    const auto pd = project_point(scene.points[i], scene.intrinsics, scene.gt_pose);
    if (!pd) continue;
    const int u = static_cast<int>(std::floor(pd->pixel.x()));
    const int v = static_cast<int>(std::floor(pd->pixel.y()));
    const size_t idx = static_cast<size_t>(v) * cfg.width + u;
    if (zbuf[idx] < 0.0 || pd->depth < zbuf[idx]) {
      zbuf[idx] = pd->depth;
      scene.image[idx] = scene.intensities[i];
    }
  }
  return scene;
}

}  // namespace

void SceneConfig::validate() const {
  if (n_points <= 0) throw std::invalid_argument("scene config: n_points must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("scene config: image size must be positive");
  if (ground_extent <= 0.0 || object_spread <= 0.0 || min_box_size <= 0.0 ||
      max_box_size < min_box_size || min_wall_length <= 0.0 || min_wall_height <= 0.0)
    throw std::invalid_argument("scene config: structure ranges must be positive");
}

void PerturbSpec::validate() const {
  if (!(max_yaw_deg > 0.0 && max_yaw_deg <= 360.0))
    throw std::invalid_argument("perturb spec: max_yaw must be in (0, 360]");
  if (!(max_planar_m > 0.0))
    throw std::invalid_argument("perturb spec: max_planar_translation must be positive");
}

ScenePair generate_scene(const SceneConfig& config) {
  config.validate();
  uint64_t seed = config.seed;
  for (int attempt = 0; attempt < 100; ++attempt) {
    ScenePair scene = generate_once(config, seed);
    size_t in = 0;
    for (uint8_t f : scene.gt_frustum_labels) in += f;
    if (in * 20 >= scene.points.size()) return scene;  // >= 5%
    seed = seed * 6364136223846793005ULL + 1442695040888963407ULL;
  }
  throw std::runtime_error("generate_scene: no viable scene after 100 attempts");
}

Se3Pose perturb_pose(const Se3Pose& gt, const PerturbSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const double yaw = uniform(rng, 0.0, spec.max_yaw_deg);
  const double dir = uniform(rng, 0.0, 2.0 * kPi);
  const double mag = uniform(rng, 0.0, spec.max_planar_m);
  Se3Pose delta = Se3Pose::yaw_about_up(yaw);
  delta.translation = Eigen::Vector3d(mag * std::cos(dir), 0.0, mag * std::sin(dir));
  return delta.compose(gt);
}

std::vector<int> sample_frustum_points(const ScenePair& scene, int n, uint64_t seed) {
  std::vector<int> in_frustum;
  for (size_t i = 0; i < scene.gt_frustum_labels.size(); ++i) {
    if (scene.gt_frustum_labels[i]) in_frustum.push_back(static_cast<int>(i));
  }
  if (in_frustum.empty()) throw std::runtime_error("sample_frustum_points: empty frustum");

  Rng rng(seed);
  std::vector<int> out;
  out.reserve(n);
  if (static_cast<size_t>(n) <= in_frustum.size()) {
    // partial Fisher-Yates, uniform without replacement
    for (int i = 0; i < n; ++i) {
      const size_t j =
          std::uniform_int_distribution<size_t>(i, in_frustum.size() - 1)(rng);
      std::swap(in_frustum[i], in_frustum[j]);
      out.push_back(in_frustum[i]);
    }
  } else {
    std::uniform_int_distribution<size_t> pick(0, in_frustum.size() - 1);
    for (int i = 0; i < n; ++i) out.push_back(in_frustum[pick(rng)]);
  }
  return out;
}

// --- sample file IO -------------------------------------------------------
// Layout (little-endian): magic "CMRSMP01", u32 version, u32 section count,
// then a table of {u32 id, u64 offset, u64 size}, then section payloads.
// See docs/sample_format.md.

namespace {

constexpr char kMagic[8] = {'C', 'M', 'R', 'S', 'M', 'P', '0', '1'};
constexpr uint32_t kVersion = 1;

enum SectionId : uint32_t {
  kIntrinsics = 1,
  kPose = 2,
  kPoints = 3,
  kIntensities = 4,
  kImage = 5,
  kLabels = 6,
};

const char* section_name(uint32_t id) {
  switch (id) {
    case kIntrinsics: return "intrinsics";
    case kPose: return "pose";
    case kPoints: return "points";
    case kIntensities: return "intensities";
    case kImage: return "image";
    case kLabels: return "labels";
    default: return "unknown";
  }
}

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(const char* data, size_t size, const char* section)
      : data_(data), size_(size), section_(section) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > size_) fail();
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void raw(void* dst, size_t n) {
    if (pos_ + n > size_) fail();
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }
  [[noreturn]] void fail() const {
    throw std::runtime_error(std::string("sample file: truncated section '") + section_ + "'");
  }

 private:
  const char* data_;
  size_t size_;
  size_t pos_ = 0;
  const char* section_;
};

}  // namespace

void save_sample(const ScenePair& scene, const std::string& path) {
  std::vector<std::pair<uint32_t, std::string>> sections;

  {
    std::string b;
    const auto& K = scene.intrinsics;
    put(b, K.fx); put(b, K.fy); put(b, K.cx); put(b, K.cy);
    put(b, static_cast<uint32_t>(K.width));
    put(b, static_cast<uint32_t>(K.height));
    put(b, K.near); put(b, K.far);
    sections.emplace_back(kIntrinsics, std::move(b));
  }
  {
    std::string b;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) put(b, scene.gt_pose.rotation(r, c));
    for (int r = 0; r < 3; ++r) put(b, scene.gt_pose.translation(r));
    sections.emplace_back(kPose, std::move(b));
  }
  {
    std::string b;
    put(b, static_cast<uint64_t>(scene.points.size()));
    for (const auto& p : scene.points) { put(b, p.x()); put(b, p.y()); put(b, p.z()); }
    sections.emplace_back(kPoints, std::move(b));
  }
  {
    std::string b;
    put(b, static_cast<uint64_t>(scene.intensities.size()));
    for (double v : scene.intensities) put(b, v);
    sections.emplace_back(kIntensities, std::move(b));
  }
  {
    std::string b;
    put(b, static_cast<uint32_t>(scene.intrinsics.height));
    put(b, static_cast<uint32_t>(scene.intrinsics.width));
    for (double v : scene.image) put(b, v);
    sections.emplace_back(kImage, std::move(b));
  }
  {
    std::string b;
    put(b, static_cast<uint64_t>(scene.gt_frustum_labels.size()));
    b.append(reinterpret_cast<const char*>(scene.gt_frustum_labels.data()),
             scene.gt_frustum_labels.size());
    sections.emplace_back(kLabels, std::move(b));
  }

  std::string header;
  header.append(kMagic, sizeof(kMagic));
  put(header, kVersion);
  put(header, static_cast<uint32_t>(sections.size()));
  uint64_t offset = header.size() + sections.size() * 20;
  std::string table;
  for (const auto& [id, payload] : sections) {
    put(table, id);
    put(table, offset);
    put(table, static_cast<uint64_t>(payload.size()));
    offset += payload.size();
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_sample: cannot open '" + path + "'");
  out.write(header.data(), header.size());
  out.write(table.data(), table.size());
  for (const auto& [id, payload] : sections) out.write(payload.data(), payload.size());
  if (!out) throw std::runtime_error("save_sample: write failed for '" + path + "'");
}

ScenePair load_sample(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_sample: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (data.size() < 16 || std::memcmp(data.data(), kMagic, 8) != 0)
    throw std::runtime_error("sample file: bad magic");
  uint32_t version, nsections;
  std::memcpy(&version, data.data() + 8, 4);
  std::memcpy(&nsections, data.data() + 12, 4);
  if (version != kVersion)
    throw std::runtime_error("sample file: unsupported version " + std::to_string(version));
  if (data.size() < 16 + static_cast<size_t>(nsections) * 20)
    throw std::runtime_error("sample file: truncated section 'table'");

  ScenePair scene;
  bool seen[7] = {};
  for (uint32_t s = 0; s < nsections; ++s) {
    uint32_t id;
    uint64_t offset, size;
    const char* entry = data.data() + 16 + s * 20;
    std::memcpy(&id, entry, 4);
    std::memcpy(&offset, entry + 4, 8);
    std::memcpy(&size, entry + 12, 8);
    if (offset + size > data.size())
      throw std::runtime_error(std::string("sample file: truncated section '") +
                               section_name(id) + "'");
    Reader r(data.data() + offset, size, section_name(id));
    switch (id) {
      case kIntrinsics: {
        auto& K = scene.intrinsics;
        K.fx = r.get<double>(); K.fy = r.get<double>();
        K.cx = r.get<double>(); K.cy = r.get<double>();
        K.width = static_cast<int>(r.get<uint32_t>());
        K.height = static_cast<int>(r.get<uint32_t>());
        K.near = r.get<double>(); K.far = r.get<double>();
        break;
      }
      case kPose: {
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) scene.gt_pose.rotation(i, j) = r.get<double>();
        for (int i = 0; i < 3; ++i) scene.gt_pose.translation(i) = r.get<double>();
        break;
      }
      case kPoints: {
        const uint64_t n = r.get<uint64_t>();
        scene.points.resize(n);
        for (auto& p : scene.points) {
          p.x() = r.get<double>(); p.y() = r.get<double>(); p.z() = r.get<double>();
        }
        break;
      }
      case kIntensities: {
        const uint64_t n = r.get<uint64_t>();
        scene.intensities.resize(n);
        for (auto& v : scene.intensities) v = r.get<double>();
        break;
      }
      case kImage: {
        const uint32_t h = r.get<uint32_t>();
        const uint32_t w = r.get<uint32_t>();
        scene.image.resize(static_cast<size_t>(h) * w);
        for (auto& v : scene.image) v = r.get<double>();
        break;
      }
      case kLabels: {
        const uint64_t n = r.get<uint64_t>();
        scene.gt_frustum_labels.resize(n);
        r.raw(scene.gt_frustum_labels.data(), n);
        break;
      }
      default:
        throw std::runtime_error("sample file: unknown section id " + std::to_string(id));
    }
    if (id < 7) seen[id] = true;
  }
  for (uint32_t id = 1; id <= 6; ++id) {
    if (!seen[id])
      throw std::runtime_error(std::string("sample file: missing section '") +
                               section_name(id) + "'");
  }
  return scene;
}

}  // namespace cmreg
