#pragma once

// Synthetic stereo experiments with known ground truth: a speckled plate in
// the scene plane z = 0 (x right, y up, millimetres) viewed by two converging
// cameras, deformed by a parametric surface motion.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dic3d/cloud.hpp"
#include "dic3d/detail/parallel.hpp"
#include "dic3d/detail/text.hpp"
#include "dic3d/error.hpp"
#include "dic3d/imaging.hpp"
#include "dic3d/stereo.hpp"

namespace dic3d::harness {

struct SceneGeometry {
  double included_angle_deg = 25.0;
  double standoff_mm = 914.4;  ///< camera centre to scene origin
  double focal_px = 1000.0;
  int width = 512, height = 512;
  double k1 = -0.05, k2 = 0.01;

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (!(included_angle_deg > 0.0 && included_angle_deg < 120.0)) out.push_back("scene.included_angle_deg must be in (0, 120)");
    if (!(standoff_mm > 0.0)) out.push_back("scene.standoff_mm must be > 0");
    if (!(focal_px > 0.0)) out.push_back("scene.focal_px must be > 0");
    if (width < 64 || height < 64) out.push_back("scene image must be at least 64x64");
    if (!std::isfinite(k1) || !std::isfinite(k2)) out.push_back("scene.k1/k2 must be finite");
    return out;
  }
};

/// Cameras in the scene frame plus the rig re-expressed in cam0's frame.
struct StereoScene {
  SceneGeometry geometry;
  CameraModel cam0, cam1;  ///< scene frame -> camera

  /// Rig with world = cam0 frame.
  StereoRig rig() const {
    StereoRig r;
    r.units = "mm";
    r.cam0 = cam0;
    r.cam0.R = Eigen::Matrix3d::Identity();
    r.cam0.t = Eigen::Vector3d::Zero();
    r.cam1 = cam1;
    r.cam1.R = cam1.R * cam0.R.transpose();
    r.cam1.t = cam1.t - r.cam1.R * cam0.t;
    return r;
  }

  /// Scene coordinates of a point given in cam0's frame.
  Eigen::Vector3d scene_from_cam0(const Eigen::Vector3d& p) const { return cam0.R.transpose() * (p - cam0.t); }
};

/// Camera on the circle of radius `standoff` in the x-z plane at azimuth
/// `azimuth` (positive toward +x), looking at the origin with image y down.
inline CameraModel look_at_origin(double azimuth_rad, const SceneGeometry& g) {
  const Eigen::Vector3d c(g.standoff_mm * std::sin(azimuth_rad), 0.0, g.standoff_mm * std::cos(azimuth_rad));
  const Eigen::Vector3d z = (-c).normalized();
  const Eigen::Vector3d y(0.0, -1.0, 0.0);
  const Eigen::Vector3d x = y.cross(z).normalized();
  CameraModel cam;
  cam.R.row(0) = x.transpose();
  cam.R.row(1) = z.cross(x).transpose();
  cam.R.row(2) = z.transpose();
  cam.t = -cam.R * c;
  cam.fx = cam.fy = g.focal_px;
  cam.cx = 0.5 * (g.width - 1);
  cam.cy = 0.5 * (g.height - 1);
  cam.k1 = g.k1;
  cam.k2 = g.k2;
  return cam;
}

inline StereoScene make_stereo_scene(const SceneGeometry& g = {}) {
  auto issues = g.issues();
  if (!issues.empty()) throw ConfigError(std::move(issues));
  const double half = 0.5 * g.included_angle_deg * M_PI / 180.0;
  return {g, look_at_origin(-half, g), look_at_origin(half, g)};
}

// ---------------------------------------------------------------------------
// Surface motion

/// Motion of the plate: x' = Rot(theta) (I + E) x + (u, v) in-plane, plus
/// out-of-plane w + A (1 - |x - c|^2 / R^2). E is the small-strain tensor.
struct SurfaceState {
  double u_mm = 0.0, v_mm = 0.0, w_mm = 0.0;
  double exx = 0.0, eyy = 0.0, exy = 0.0;  ///< strain, dimensionless
  double rotation_rad = 0.0;
  double bow_mm = 0.0;
  double bow_radius_mm = 200.0;
  Eigen::Vector2d bow_center = Eigen::Vector2d::Zero();

  SurfaceState scaled(double f) const {
    SurfaceState s = *this;
    s.u_mm *= f;
    s.v_mm *= f;
    s.w_mm *= f;
    s.exx *= f;
    s.eyy *= f;
    s.exy *= f;
    s.rotation_rad *= f;
    s.bow_mm *= f;
    return s;
  }

  /// Displacement (U, V, W) of material point (x, y).
  Eigen::Vector3d displacement(double x, double y) const {
    Eigen::Matrix2d E;
    E << exx, exy, exy, eyy;
    const Eigen::Matrix2d rot = Eigen::Rotation2Dd(rotation_rad).toRotationMatrix();
    const Eigen::Vector2d p(x, y);
    const Eigen::Vector2d moved = rot * (p + E * p) + Eigen::Vector2d(u_mm, v_mm);
    const double rho2 = (p - bow_center).squaredNorm();
    const double w = w_mm + bow_mm * (1.0 - rho2 / (bow_radius_mm * bow_radius_mm));
    return {moved.x() - x, moved.y() - y, w};
  }
};

// ---------------------------------------------------------------------------
// Rendering

/// Speckle texture attached to the plate, rasterised in material coordinates
/// at half the nominal pixel footprint and sampled by cubic B-spline.
class PlateTexture {
 public:
  PlateTexture(const SpeckleSpec& image_spec, double footprint_mm, double x0, double y0, double x1, double y1)
      : texel_(0.5 * footprint_mm), x0_(x0), y1_(y1) {
    SpeckleSpec s = image_spec;
    s.radius_px *= 2.0;
    s.edge_sigma_px *= 2.0;
    s.density /= 4.0;
    const int w = static_cast<int>(std::ceil((x1 - x0) / texel_)) + 1;
    const int h = static_cast<int>(std::ceil((y1 - y0) / texel_)) + 1;
    spline_ = std::make_unique<SplineImage>(synthesize_speckle(s, w, h));
  }

  /// Texture value at material point (x, y); the raster runs +x right, +y up.
  double value(double x, double y) const {
    const double tx = (x - x0_) / texel_;
    const double ty = (y1_ - y) / texel_;
    const double lo = SplineImage::kMargin;
    if (tx < lo || ty < lo || tx > spline_->width() - 1 - lo || ty > spline_->height() - 1 - lo)
      throw ConfigError("plate texture does not cover the camera view");
    return spline_->sample(tx, ty);
  }

  double texel_mm() const noexcept { return texel_; }

 private:
  double texel_, x0_, y1_;
  std::unique_ptr<SplineImage> spline_;
};

/// Renders what `cam` sees of the plate in state `s`. For each pixel the
/// material point is found by fixed-point iteration on the viewing ray.
inline GrayImage render_view(const CameraModel& cam, const SceneGeometry& g, const PlateTexture& texture,
                             const SurfaceState& s, unsigned threads = 1) {
  const Eigen::Vector3d c = cam.center();
  std::vector<double> out(static_cast<std::size_t>(g.width) * g.height);
  detail::parallel_for(static_cast<std::size_t>(g.height), threads, [&](std::size_t row) {
    const int py = static_cast<int>(row);
    for (int px = 0; px < g.width; ++px) {
      const Eigen::Vector3d d = cam.ray({static_cast<double>(px), static_cast<double>(py)});
      if (!(std::abs(d.z()) > 1e-12)) throw NumericalError("render: ray parallel to the plate");
      double lam = -c.z() / d.z();
      Eigen::Vector2d m = (c + lam * d).head<2>();
      for (int it = 0; it < 50; ++it) {
        const Eigen::Vector3d disp = s.displacement(m.x(), m.y());
        lam = (disp.z() - c.z()) / d.z();
        const Eigen::Vector3d hit = c + lam * d;
        const Eigen::Vector2d next = hit.head<2>() - disp.head<2>();
        const double change = (next - m).cwiseAbs().maxCoeff();
        m = next;
        if (change < 1e-12) break;
      }
      out[row * g.width + px] = std::clamp(texture.value(m.x(), m.y()), 0.0, 1.0);
    }
  });
  return GrayImage(g.width, g.height, std::move(out));
}

/// Point of the undeformed plate (z = 0) seen at pixel `px`.
inline Eigen::Vector2d plate_point_at(const CameraModel& cam, const Eigen::Vector2d& px) {
  const Eigen::Vector3d c = cam.center();
  const Eigen::Vector3d d = cam.ray(px);
  if (!(std::abs(d.z()) > 1e-12)) throw NumericalError("pixel ray does not meet the plate");
  return (c + (-c.z() / d.z()) * d).head<2>();
}

/// Material-plane bounding box seen by both cameras, plus a margin.
inline std::array<double, 4> view_bounds(const StereoScene& scene, double margin_mm) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const CameraModel* cam : {&scene.cam0, &scene.cam1}) {
    const int w = scene.geometry.width, h = scene.geometry.height;
    for (int i = 0; i <= 16; ++i)
      for (int edge = 0; edge < 4; ++edge) {
        const double f = i / 16.0;
        const Eigen::Vector2d px = edge == 0 ? Eigen::Vector2d(f * (w - 1), 0)
                                   : edge == 1 ? Eigen::Vector2d(f * (w - 1), h - 1)
                                   : edge == 2 ? Eigen::Vector2d(0, f * (h - 1))
                                               : Eigen::Vector2d(w - 1, f * (h - 1));
        const Eigen::Vector2d hit = plate_point_at(*cam, px);
        x0 = std::min(x0, hit.x());
        x1 = std::max(x1, hit.x());
        y0 = std::min(y0, hit.y());
        y1 = std::max(y1, hit.y());
      }
  }
  return {x0 - margin_mm, y0 - margin_mm, x1 + margin_mm, y1 + margin_mm};
}

// ---------------------------------------------------------------------------
// Scenarios

enum class Family { static_scene, translation, stretch, rotation, bow, drop };

inline Family family_from_string(const std::string& s) {
  if (s == "static") return Family::static_scene;
  if (s == "translation") return Family::translation;
  if (s == "stretch") return Family::stretch;
  if (s == "rotation") return Family::rotation;
  if (s == "bow") return Family::bow;
  if (s == "drop") return Family::drop;
  throw ConfigError("unknown deformation family '" + s + "' (expected static, translation, stretch, rotation, bow, drop)");
}

inline const char* to_string(Family f) noexcept {
  switch (f) {
    case Family::static_scene: return "static";
    case Family::translation: return "translation";
    case Family::stretch: return "stretch";
    case Family::rotation: return "rotation";
    case Family::bow: return "bow";
    case Family::drop: return "drop";
  }
  return "?";
}

/// A synthetic experiment: the final surface state is reached by a linear
/// ramp over `ramp_s` seconds and then held. With ramp_s = 0 every frame
/// after the reference shows the full state.
struct Scenario {
  Family family = Family::static_scene;
  SceneGeometry geometry;
  SpeckleSpec speckle;
  SurfaceState target;
  int frames = 2;
  double fps = 2.0;
  double ramp_s = 0.0;
  double noise_sigma = 0.0003;  ///< additive Gaussian noise, intensity units
  std::uint64_t seed = 1;

  std::vector<std::string> issues() const {
    auto out = geometry.issues();
    if (frames < 1) out.push_back("scenario.frames must be >= 1");
    if (!(fps > 0.0)) out.push_back("scenario.fps must be > 0");
    if (!(ramp_s >= 0.0)) out.push_back("scenario.ramp_s must be >= 0");
    if (!(noise_sigma >= 0.0 && noise_sigma < 0.5)) out.push_back("scenario.noise_sigma must be in [0, 0.5)");
    if (!(target.bow_radius_mm > 0.0)) out.push_back("scenario.bow_radius_mm must be > 0");
    try {
      speckle.validate();
    } catch (const ConfigError& e) {
      out.insert(out.end(), e.issues().begin(), e.issues().end());
    }
    return out;
  }

  double time(int frame) const { return frame / fps; }

  double load_factor(int frame) const {
    if (frame <= 0) return 0.0;
    if (ramp_s <= 0.0) return 1.0;
    return std::min(1.0, time(frame) / ramp_s);
  }

  SurfaceState state(int frame) const { return target.scaled(load_factor(frame)); }
};

/// Final state of a named family with its default magnitude.
inline SurfaceState family_default(Family f) {
  SurfaceState s;
  switch (f) {
    case Family::static_scene: break;
    case Family::translation: s.w_mm = 0.05; break;
    case Family::stretch: s.eyy = 200e-6; break;
    case Family::rotation: s.rotation_rad = 0.01; break;
    case Family::bow: s.bow_mm = 0.05; break;
    case Family::drop: s.eyy = -200e-6; break;
  }
  return s;
}

/// Renders scenario frames on demand; the texture is built once.
class ScenarioRenderer {
 public:
  explicit ScenarioRenderer(Scenario sc, unsigned threads = 1)
      : sc_(std::move(sc)), scene_(make_stereo_scene(sc_.geometry)), threads_(threads) {
    auto issues = sc_.issues();
    if (!issues.empty()) throw ConfigError(std::move(issues));
    const auto b = view_bounds(scene_, 40.0);
    const double footprint = sc_.geometry.standoff_mm / sc_.geometry.focal_px;
    texture_ = std::make_unique<PlateTexture>(sc_.speckle, footprint, b[0], b[1], b[2], b[3]);
  }

  const Scenario& scenario() const noexcept { return sc_; }
  const StereoScene& scene() const noexcept { return scene_; }

  GrayImage frame(int camera, int index) const {
    if (camera != 0 && camera != 1) throw ConfigError("camera index must be 0 or 1");
    if (index < 0 || index >= sc_.frames) throw ConfigError("frame index out of range");
    const CameraModel& cam = camera == 0 ? scene_.cam0 : scene_.cam1;
    GrayImage img = render_view(cam, sc_.geometry, *texture_, sc_.state(index), threads_);
    const std::uint64_t noise_seed =
        dic3d::detail::splitmix64(sc_.seed ^ dic3d::detail::splitmix64(static_cast<std::uint64_t>(index) * 2 + camera));
    return add_gaussian_noise(img, sc_.noise_sigma, noise_seed);
  }

 private:
  Scenario sc_;
  StereoScene scene_;
  unsigned threads_;
  std::unique_ptr<PlateTexture> texture_;
};

inline constexpr const char* kTruthHeader = "frame,t_s,u_mm,v_mm,w_mm,exx_ue,eyy_ue,exy_ue,rotation_rad,bow_um";

inline std::string truth_csv(const Scenario& sc) {
  using dic3d::detail::fmt;
  std::ostringstream os;
  os << kTruthHeader << '\n';
  for (int k = 0; k < sc.frames; ++k) {
    const auto s = sc.state(k);
    os << k << ',' << fmt(sc.time(k)) << ',' << fmt(s.u_mm) << ',' << fmt(s.v_mm) << ',' << fmt(s.w_mm) << ','
       << fmt(s.exx * 1e6) << ',' << fmt(s.eyy * 1e6) << ',' << fmt(s.exy * 1e6) << ',' << fmt(s.rotation_rad) << ','
       << fmt(s.bow_mm * 1e3) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Scan pairs

/// Two scans of a flat plate: the reference, and a later scan with a
/// Gaussian bump taken from a displaced scanner pose.
struct ScanPairSpec {
  double size_mm = 200.0;  ///< square plate side
  double pitch_mm = 1.0;
  double bump_height_mm = 0.4;
  double bump_sigma_mm = 10.0;
  Eigen::Vector2d bump_center = Eigen::Vector2d::Zero();
  int markers = 6;
  double noise_mm = 0.0;  ///< isotropic Gaussian on non-marker points
  double max_rotation_rad = 0.35;
  double max_translation_mm = 100.0;

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (!(size_mm > 0.0)) out.push_back("clouds.size_mm must be > 0");
    if (!(pitch_mm > 0.0 && pitch_mm <= size_mm / 4)) out.push_back("clouds.pitch_mm must be in (0, size_mm/4]");
    if (!std::isfinite(bump_height_mm)) out.push_back("clouds.bump_height_mm must be finite");
    if (!(bump_sigma_mm > 0.0)) out.push_back("clouds.bump_sigma_mm must be > 0");
    if (!bump_center.allFinite()) out.push_back("clouds.bump_center_mm must be finite");
    if (markers < 3) out.push_back("clouds.markers must be >= 3");
    if (!(noise_mm >= 0.0)) out.push_back("clouds.noise_mm must be >= 0");
    if (!(max_rotation_rad >= 0.0) || !(max_translation_mm >= 0.0))
      out.push_back("clouds.max_rotation_rad and max_translation_mm must be >= 0");
    return out;
  }

  double bump(double x, double y) const {
    const Eigen::Vector2d d = Eigen::Vector2d(x, y) - bump_center;
    return bump_height_mm * std::exp(-d.squaredNorm() / (2.0 * bump_sigma_mm * bump_sigma_mm));
  }
};

struct ScanPair {
  PointCloud reference;
  PointCloud test;              ///< in the second scanner's frame
  RigidTransform test_to_reference;
};

/// Markers sit on lattice points away from the bump and do not move with it;
/// both scans label them identically.
inline ScanPair synthesize_scan_pair(const ScanPairSpec& spec, std::uint64_t seed) {
  auto issues = spec.issues();
  if (!issues.empty()) throw ConfigError(std::move(issues));
  const int n = static_cast<int>(std::floor(spec.size_mm / spec.pitch_mm)) + 1;
  const double x0 = -0.5 * spec.pitch_mm * (n - 1);
  std::mt19937_64 rng(dic3d::detail::splitmix64(seed ^ 0x5ca9ULL));

  std::vector<std::size_t> candidates;
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      const double x = x0 + ix * spec.pitch_mm, y = x0 + iy * spec.pitch_mm;
      if ((Eigen::Vector2d(x, y) - spec.bump_center).norm() > 4.0 * spec.bump_sigma_mm)
        candidates.push_back(static_cast<std::size_t>(iy) * n + ix);
    }
  if (candidates.size() < static_cast<std::size_t>(spec.markers))
    throw ConfigError("clouds: the bump leaves too little plate for " + std::to_string(spec.markers) + " markers");
  std::vector<int> ids(static_cast<std::size_t>(n) * n, -1);
  for (int m = 0; m < spec.markers; ++m) {
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    const std::size_t k = pick(rng);
    ids[candidates[k]] = m + 1;
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(k));
  }

  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto draw3 = [&](auto& dist) {
    Eigen::Vector3d v;
    for (int k = 0; k < 3; ++k) v(k) = dist(rng);
    return v;
  };
  const Eigen::Vector3d axis = draw3(gauss).normalized();
  const double angle = spec.max_rotation_rad * unit(rng);
  ScanPair out;
  out.test_to_reference.R = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  out.test_to_reference.t = spec.max_translation_mm * draw3(unit);
  const RigidTransform to_test = out.test_to_reference.inverse();

  std::normal_distribution<double> noise(0.0, spec.noise_mm);
  auto jitter = [&](int id) -> Eigen::Vector3d {
    if (id >= 0 || spec.noise_mm <= 0.0) return Eigen::Vector3d::Zero();
    return draw3(noise);
  };
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      const std::size_t i = static_cast<std::size_t>(iy) * n + ix;
      const double x = x0 + ix * spec.pitch_mm, y = x0 + iy * spec.pitch_mm;
      out.reference.points.push_back(Eigen::Vector3d(x, y, 0.0) + jitter(ids[i]));
      out.reference.marker_ids.push_back(ids[i]);
      const double z = ids[i] >= 0 ? 0.0 : spec.bump(x, y);
      out.test.points.push_back(to_test.apply(Eigen::Vector3d(x, y, z) + jitter(ids[i])));
      out.test.marker_ids.push_back(ids[i]);
    }
  return out;
}

}  // namespace dic3d::harness
