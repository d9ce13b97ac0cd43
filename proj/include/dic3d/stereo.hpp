#pragma once

// Two-camera geometry: pinhole cameras with two radial distortion terms,
// triangulation, calibration refinement and 3D displacement sequences.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dic3d/correlation.hpp"
#include "dic3d/detail/parallel.hpp"
#include "dic3d/detail/text.hpp"
#include "dic3d/error.hpp"
#include "json.hpp"

namespace dic3d {

class DegenerateGeometryError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct CameraModel {
  double fx = 1000.0, fy = 1000.0;
  double cx = 0.0, cy = 0.0;
  double k1 = 0.0, k2 = 0.0;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  ///< world -> camera
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  std::vector<std::string> issues(const std::string& name) const {
    std::vector<std::string> out;
    if (!(fx > 0.0) || !(fy > 0.0)) out.push_back(name + ": fx and fy must be > 0");
    if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(k1) || !std::isfinite(k2) || !R.allFinite() ||
        !t.allFinite())
      out.push_back(name + ": parameters must be finite");
    else if ((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
             std::abs(R.determinant() - 1.0) > 1e-9)
      out.push_back(name + ": R must be a rotation (orthonormal, det +1, within 1e-9)");
    return out;
  }

  Eigen::Vector3d center() const { return -R.transpose() * t; }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& X) const { return R * X + t; }

  double distortion_factor(double r2) const noexcept { return 1.0 + k1 * r2 + k2 * r2 * r2; }

  Eigen::Vector2d distort(const Eigen::Vector2d& xn) const noexcept { return xn * distortion_factor(xn.squaredNorm()); }

  /// Fixed-point inversion of the radial model: 20 iterations or 1e-12.
  Eigen::Vector2d undistort(const Eigen::Vector2d& xd) const {
    Eigen::Vector2d x = xd;
    for (int it = 0; it < 20; ++it) {
      const Eigen::Vector2d next = xd / distortion_factor(x.squaredNorm());
      const double change = (next - x).cwiseAbs().maxCoeff();
      x = next;
      if (change < 1e-12) return x;
    }
    if ((distort(x) - xd).cwiseAbs().maxCoeff() > 1e-9)
      throw NumericalError("undistort: distortion inversion did not converge");
    return x;
  }

  Eigen::Vector2d project(const Eigen::Vector3d& X) const {
    const Eigen::Vector3d c = to_camera(X);
    if (!(c.z() > 0.0)) throw NumericalError("project: point has non-positive depth");
    const Eigen::Vector2d d = distort(c.head<2>() / c.z());
    return {fx * d.x() + cx, fy * d.y() + cy};
  }

  /// Undistorted normalised coordinates of a pixel.
  Eigen::Vector2d normalized(const Eigen::Vector2d& px) const {
    return undistort({(px.x() - cx) / fx, (px.y() - cy) / fy});
  }

  /// Unit viewing direction in world coordinates.
  Eigen::Vector3d ray(const Eigen::Vector2d& px) const {
    const Eigen::Vector2d n = normalized(px);
    return (R.transpose() * Eigen::Vector3d(n.x(), n.y(), 1.0)).normalized();
  }
};

struct StereoRig {
  CameraModel cam0, cam1;
  std::string units = "mm";

  std::vector<std::string> issues() const {
    auto out = cam0.issues("cam0");
    auto more = cam1.issues("cam1");
    out.insert(out.end(), more.begin(), more.end());
    if (out.empty() && !((cam1.center() - cam0.center()).norm() > 0.0)) out.push_back("rig: baseline must be > 0");
    if (units.empty()) out.push_back("rig: units must be named");
    return out;
  }
  void validate() const {
    auto i = issues();
    if (!i.empty()) throw ConfigError(std::move(i));
  }
  double baseline() const { return (cam1.center() - cam0.center()).norm(); }
};

// ---------------------------------------------------------------------------
// Rig file

namespace detail {

inline nlohmann::json camera_to_json(const CameraModel& c) {
  nlohmann::json j;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["k1"] = c.k1;
  j["k2"] = c.k2;
  std::vector<double> r(9), t(3);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) r[static_cast<std::size_t>(3 * i + k)] = c.R(i, k);
    t[static_cast<std::size_t>(i)] = c.t(i);
  }
  j["R"] = r;
  j["t"] = t;
  return j;
}

inline CameraModel camera_from_json(const nlohmann::json& j, const std::string& name, std::vector<std::string>& issues) {
  CameraModel c;
  if (!j.is_object()) {
    issues.push_back(name + ": missing camera block");
    return c;
  }
  auto num = [&](const char* key, double& out) {
    if (!j.contains(key) || !j[key].is_number())
      issues.push_back(name + "." + key + ": missing or not a number");
    else
      out = j[key].get<double>();
  };
  num("fx", c.fx);
  num("fy", c.fy);
  num("cx", c.cx);
  num("cy", c.cy);
  num("k1", c.k1);
  num("k2", c.k2);
  auto arr = [&](const char* key, std::size_t n) -> std::vector<double> {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != n) {
      issues.push_back(name + "." + key + ": expected " + std::to_string(n) + " numbers");
      return {};
    }
    std::vector<double> v;
    for (const auto& e : j[key]) {
      if (!e.is_number()) {
        issues.push_back(name + "." + key + ": expected numbers");
        return {};
      }
      v.push_back(e.get<double>());
    }
    return v;
  };
  const auto r = arr("R", 9);
  if (r.size() == 9)
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) c.R(i, k) = r[static_cast<std::size_t>(3 * i + k)];
  const auto t = arr("t", 3);
  if (t.size() == 3) c.t = {t[0], t[1], t[2]};
  return c;
}

}  // namespace detail

inline std::string rig_to_json(const StereoRig& rig) {
  nlohmann::json j;
  j["units"] = rig.units;
  j["cam0"] = detail::camera_to_json(rig.cam0);
  j["cam1"] = detail::camera_to_json(rig.cam1);
  return j.dump(2) + "\n";
}

inline StereoRig rig_from_json(const std::string& text, const std::string& source = "rig") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(source + ": malformed rig file: " + e.what());
  }
  if (!j.is_object()) throw IoError(source + ": rig file must be a JSON object");
  std::vector<std::string> issues;
  StereoRig rig;
  rig.cam0 = detail::camera_from_json(j.value("cam0", nlohmann::json()), "cam0", issues);
  rig.cam1 = detail::camera_from_json(j.value("cam1", nlohmann::json()), "cam1", issues);
  if (!j.contains("units") || !j["units"].is_string())
    issues.push_back("units: missing or not a string");
  else
    rig.units = j["units"].get<std::string>();
  if (issues.empty()) issues = rig.issues();
  if (!issues.empty()) {
    for (auto& i : issues) i = source + ": " + i;
    throw ConfigError(std::move(issues));
  }
  return rig;
}

inline StereoRig read_rig(const std::string& path) { return rig_from_json(detail::read_text(path), path); }
inline void write_rig(const StereoRig& rig, const std::string& path) { detail::write_text(path, rig_to_json(rig)); }

// ---------------------------------------------------------------------------
// Triangulation

struct Triangulation {
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  double residual_px = 0.0;  ///< RMS reprojection error over the four pixel coordinates
};

/// Two-ray midpoint followed by Gauss-Newton polishing of the reprojection
/// error. Rays closer than 0.1 degree to parallel are rejected.
inline Triangulation triangulate(const StereoRig& rig, const Eigen::Vector2d& x0, const Eigen::Vector2d& x1) {
  const Eigen::Vector3d c0 = rig.cam0.center(), c1 = rig.cam1.center();
  const Eigen::Vector3d base = c1 - c0;
  if (!(base.norm() > 1e-12 * (1.0 + c0.norm())))
    throw DegenerateGeometryError("triangulate: camera centres coincide");
  const Eigen::Vector3d d0 = rig.cam0.ray(x0), d1 = rig.cam1.ray(x1);
  const double angle = std::atan2(d0.cross(d1).norm(), d0.dot(d1));
  if (angle < 0.1 * M_PI / 180.0) throw DegenerateGeometryError("triangulate: rays are nearly parallel");

  // Closest points c0 + s d0 and c1 + u d1.
  const double b = d0.dot(d1);
  const double denom = 1.0 - b * b;
  const double s = (d0.dot(base) - b * d1.dot(base)) / denom;
  const double u = (b * d0.dot(base) - d1.dot(base)) / denom;
  Eigen::Vector3d X = 0.5 * ((c0 + s * d0) + (c1 + u * d1));

  auto residuals = [&](const Eigen::Vector3d& P, Eigen::Vector4d& r) {
    r.head<2>() = rig.cam0.project(P) - x0;
    r.tail<2>() = rig.cam1.project(P) - x1;
  };
  Eigen::Vector4d r;
  residuals(X, r);
  for (int it = 0; it < 5; ++it) {
    Eigen::Matrix<double, 4, 3> J;
    const double h = 1e-6 * (1.0 + X.norm());
    for (int k = 0; k < 3; ++k) {
      Eigen::Vector3d a = X, bpt = X;
      a(k) += h;
      bpt(k) -= h;
      Eigen::Vector4d ra, rb;
      residuals(a, ra);
      residuals(bpt, rb);
      J.col(k) = (ra - rb) / (2.0 * h);
    }
    const Eigen::Vector3d step = (J.transpose() * J).ldlt().solve(-J.transpose() * r);
    const Eigen::Vector3d next = X + step;
    Eigen::Vector4d rn;
    residuals(next, rn);
    if (!(rn.squaredNorm() < r.squaredNorm())) break;
    X = next;
    r = rn;
    if (step.norm() < 1e-14 * (1.0 + X.norm())) break;
  }
  return {X, std::sqrt(r.squaredNorm() / 4.0)};
}

// ---------------------------------------------------------------------------
// Calibration refinement

/// Rigid placement of the calibration target: world = R * target + t.
struct Pose {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
};

/// Pixel observations of every target point in one pose, for both cameras.
struct CalibrationView {
  std::vector<Eigen::Vector2d> cam0, cam1;
};

struct CalibrationOptions {
  int max_iters = 200;
  double rank_tol = 1e-5;  ///< smallest/largest singular value of the column-scaled Jacobian
};

struct CalibrationResult {
  StereoRig rig;
  std::vector<Pose> poses;
  double rms_px = 0.0;  ///< RMS over all residual coordinates (x and y counted separately)
  std::vector<double> rms_history;  ///< initial RMS, then one entry per accepted step
  int iterations = 0;
};

namespace detail {

inline Eigen::Vector3d rotation_vector(const Eigen::Matrix3d& R) {
  const Eigen::AngleAxisd aa(R);
  return aa.angle() * aa.axis();
}

inline Eigen::Matrix3d rotation_matrix(const Eigen::Vector3d& v) {
  const double a = v.norm();
  if (a == 0.0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(a, v / a).toRotationMatrix();
}

/// Parameter layout: cam0 intrinsics (6), cam1 intrinsics (6), cam1 rotation
/// vector and translation (6), then rotation vector and translation per pose.
/// cam0's extrinsics stay fixed: they define the world frame.
struct CalibrationPacking {
  CameraModel cam0_fixed;
  std::size_t poses = 0;

  static Eigen::VectorXd pack(const StereoRig& rig, const std::vector<Pose>& poses) {
    Eigen::VectorXd p(18 + 6 * static_cast<Eigen::Index>(poses.size()));
    auto intr = [&](const CameraModel& c, Eigen::Index o) {
      p.segment<6>(o) << c.fx, c.fy, c.cx, c.cy, c.k1, c.k2;
    };
    intr(rig.cam0, 0);
    intr(rig.cam1, 6);
    p.segment<3>(12) = rotation_vector(rig.cam1.R);
    p.segment<3>(15) = rig.cam1.t;
    for (std::size_t i = 0; i < poses.size(); ++i) {
      const auto o = 18 + 6 * static_cast<Eigen::Index>(i);
      p.segment<3>(o) = rotation_vector(poses[i].R);
      p.segment<3>(o + 3) = poses[i].t;
    }
    return p;
  }

  void unpack(const Eigen::VectorXd& p, StereoRig& rig, std::vector<Pose>& out) const {
    auto intr = [&](CameraModel& c, Eigen::Index o) {
      c.fx = p(o);
      c.fy = p(o + 1);
      c.cx = p(o + 2);
      c.cy = p(o + 3);
      c.k1 = p(o + 4);
      c.k2 = p(o + 5);
    };
    rig.cam0 = cam0_fixed;
    intr(rig.cam0, 0);
    intr(rig.cam1, 6);
    rig.cam1.R = rotation_matrix(p.segment<3>(12));
    rig.cam1.t = p.segment<3>(15);
    out.resize(poses);
    for (std::size_t i = 0; i < poses; ++i) {
      const auto o = 18 + 6 * static_cast<Eigen::Index>(i);
      out[i].R = rotation_matrix(p.segment<3>(o));
      out[i].t = p.segment<3>(o + 3);
    }
  }
};

}  // namespace detail

/// Levenberg-Marquardt refinement of both cameras and all target poses
/// against observed target points. Only cost-reducing steps are accepted,
/// so the recorded RMS history never increases.
inline CalibrationResult refine_calibration(const std::vector<CalibrationView>& views,
                                            const std::vector<Eigen::Vector3d>& target, const StereoRig& initial,
                                            const std::vector<Pose>& initial_poses,
                                            const CalibrationOptions& opt = {}) {
  if (views.size() < 3) throw ConfigError("refine_calibration: at least 3 poses required");
  if (views.size() != initial_poses.size()) throw ConfigError("refine_calibration: one initial pose per view required");
  if (target.size() < 12) throw ConfigError("refine_calibration: at least 12 target points per pose required");
  for (const auto& v : views)
    if (v.cam0.size() != target.size() || v.cam1.size() != target.size())
      throw ConfigError("refine_calibration: every view must observe every target point in both cameras");

  const std::size_t n_res = views.size() * target.size() * 4;
  detail::CalibrationPacking packing{initial.cam0, views.size()};
  StereoRig rig = initial;
  std::vector<Pose> poses;

  auto residuals = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) -> bool {
    packing.unpack(p, rig, poses);
    r.resize(static_cast<Eigen::Index>(n_res));
    Eigen::Index k = 0;
    try {
      for (std::size_t v = 0; v < views.size(); ++v)
        for (std::size_t i = 0; i < target.size(); ++i) {
          const Eigen::Vector3d X = poses[v].R * target[i] + poses[v].t;
          r.segment<2>(k) = rig.cam0.project(X) - views[v].cam0[i];
          r.segment<2>(k + 2) = rig.cam1.project(X) - views[v].cam1[i];
          k += 4;
        }
    } catch (const NumericalError&) {
      return false;
    }
    return r.allFinite();
  };

  Eigen::VectorXd p = detail::CalibrationPacking::pack(initial, initial_poses);
  Eigen::VectorXd r;
  if (!residuals(p, r)) throw NumericalError("refine_calibration: initial guess puts target points behind a camera");
  double cost = r.squaredNorm();
  const double n_obs = static_cast<double>(n_res);
  CalibrationResult result;
  result.rms_history.push_back(std::sqrt(cost / n_obs));

  const Eigen::Index np = p.size();
  Eigen::MatrixXd J(static_cast<Eigen::Index>(n_res), np);
  auto jacobian = [&] {
    Eigen::VectorXd rp, rm;
    for (Eigen::Index j = 0; j < np; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(p(j)));
      Eigen::VectorXd a = p, b = p;
      a(j) += h;
      b(j) -= h;
      if (!residuals(a, rp) || !residuals(b, rm))
        throw NumericalError("refine_calibration: Jacobian evaluation left the valid domain");
      J.col(j) = (rp - rm) / (2.0 * h);
    }
  };

  double lambda = 1e-3;
  int it = 0;
  for (; it < opt.max_iters; ++it) {
    jacobian();
    if (it == 0) {
      Eigen::MatrixXd scaled = J;
      for (Eigen::Index j = 0; j < np; ++j) {
        const double n = scaled.col(j).norm();
        if (n == 0.0) throw NumericalError("refine_calibration: rank-deficient normal equations (parameter has no effect)");
        scaled.col(j) /= n;
      }
      const Eigen::JacobiSVD<Eigen::MatrixXd> svd(scaled);
      const auto& sv = svd.singularValues();
      if (sv(np - 1) < opt.rank_tol * sv(0))
        throw NumericalError("refine_calibration: rank-deficient normal equations (insufficient pose variety; "
                             "singular value ratio " + detail::fmt(sv(np - 1) / sv(0)) + ")");
    }
    const Eigen::MatrixXd A = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    bool accepted = false;
    Eigen::VectorXd step;
    Eigen::VectorXd r_new;
    double cost_new = cost;
    while (lambda < 1e16) {
      Eigen::MatrixXd damped = A;
      damped.diagonal() += lambda * A.diagonal();
      step = damped.ldlt().solve(-g);
      const Eigen::VectorXd p_new = p + step;
      if (step.allFinite() && residuals(p_new, r_new) && (cost_new = r_new.squaredNorm()) < cost) {
        p = p_new;
        r = r_new;
        accepted = true;
        lambda = std::max(lambda * 0.1, 1e-12);
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
    const double gain = cost - cost_new;
    cost = cost_new;
    result.rms_history.push_back(std::sqrt(cost / n_obs));
    if (gain <= 1e-15 * cost || step.cwiseAbs().maxCoeff() <= 1e-14 * (1.0 + p.cwiseAbs().maxCoeff())) {
      ++it;
      break;
    }
  }
  packing.unpack(p, rig, poses);
  if (!std::isfinite(cost)) throw NumericalError("refine_calibration: diverged");
  result.rig = rig;
  result.poses = poses;
  result.rms_px = std::sqrt(cost / n_obs);
  result.iterations = it;
  return result;
}

// ---------------------------------------------------------------------------
// Surface frame and 3D fields

/// Orthonormal frame on the plane fitted to the reference surface. The normal
/// points toward cam0; e1 is cam0's image x axis projected onto the plane and
/// e2 = n x e1.
struct SurfaceFrame {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d e1 = Eigen::Vector3d::UnitX(), e2 = Eigen::Vector3d::UnitY(), n = Eigen::Vector3d::UnitZ();

  Eigen::Vector3d to_local(const Eigen::Vector3d& world) const {
    const Eigen::Vector3d d = world - origin;
    return {e1.dot(d), e2.dot(d), n.dot(d)};
  }
  Eigen::Vector3d direction_to_local(const Eigen::Vector3d& v) const { return {e1.dot(v), e2.dot(v), n.dot(v)}; }
};

inline SurfaceFrame fit_surface_frame(const std::vector<Eigen::Vector3d>& points, const CameraModel& cam0) {
  if (points.size() < 3) throw NumericalError("surface frame: fewer than 3 reference points");
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : points) cov += (p - mean) * (p - mean).transpose();
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU);
  const auto& sv = svd.singularValues();
  if (!(sv(1) > 1e-12 * sv(0))) throw NumericalError("surface frame: reference points are collinear");
  SurfaceFrame f;
  f.origin = mean;
  f.n = svd.matrixU().col(2).normalized();
  if (f.n.dot(cam0.center() - mean) < 0.0) f.n = -f.n;
  const Eigen::Vector3d x_axis = cam0.R.row(0).transpose();
  Eigen::Vector3d e1 = x_axis - x_axis.dot(f.n) * f.n;
  if (!(e1.norm() > 1e-9)) throw NumericalError("surface frame: cam0 looks along the surface");
  f.e1 = e1.normalized();
  f.e2 = f.n.cross(f.e1);
  return f;
}

struct Point3D {
  int ix = 0, iy = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN());  ///< reference, cam0 frame
  Eigen::Vector3d displacement = Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN());  ///< U, V, W in the surface frame
  bool valid = false;
};

/// One frame of 3D displacements on the cam0 lattice. Positions are the
/// reference (frame-0) coordinates in the cam0 frame; U, V, W are resolved
/// in `surface`.
struct Field3D {
  int nx = 0, ny = 0;
  std::vector<Point3D> points;  ///< row-major
  SurfaceFrame surface;
  int frame = 0;
  double time_s = 0.0;

  std::size_t index(int ix, int iy) const noexcept { return static_cast<std::size_t>(iy) * nx + ix; }
  const Point3D& at(int ix, int iy) const { return points[index(ix, iy)]; }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (const auto& p : points) n += p.valid ? 1 : 0;
    return n;
  }
  /// In-plane surface coordinates of a reference position.
  Eigen::Vector2d surface_xy(const Point3D& p) const { return surface.to_local(p.position).head<2>(); }
};

inline constexpr const char* kField3DHeader = "frame,t_s,ix,iy,X,Y,Z,U,V,W,valid";

inline std::string field3d_to_csv(const Field3D& f) {
  using detail::fmt;
  std::ostringstream os;
  os << kField3DHeader << '\n';
  for (const auto& p : f.points) {
    os << f.frame << ',' << fmt(f.time_s) << ',' << p.ix << ',' << p.iy << ',' << fmt(p.position.x()) << ','
       << fmt(p.position.y()) << ',' << fmt(p.position.z()) << ',';
    if (p.valid)
      os << fmt(p.displacement.x()) << ',' << fmt(p.displacement.y()) << ',' << fmt(p.displacement.z()) << ",1\n";
    else
      os << ",,,0\n";
  }
  return os.str();
}

/// Parses a Field3D CSV. Positions are in the cam0 frame, so the surface
/// frame is refitted from them exactly as during reconstruction.
inline Field3D field3d_from_csv(const detail::CsvTable& t) {
  using detail::parse_double;
  using detail::parse_int;
  const auto c_frame = t.column("frame"), c_t = t.column("t_s"), c_ix = t.column("ix"), c_iy = t.column("iy"),
             c_X = t.column("X"), c_Y = t.column("Y"), c_Z = t.column("Z"), c_U = t.column("U"), c_V = t.column("V"),
             c_W = t.column("W"), c_valid = t.column("valid");
  if (t.rows.empty()) throw IoError("field3d csv: no rows");
  Field3D f;
  for (const auto& r : t.rows) {
    f.nx = std::max(f.nx, static_cast<int>(parse_int(r[c_ix], "ix")) + 1);
    f.ny = std::max(f.ny, static_cast<int>(parse_int(r[c_iy], "iy")) + 1);
  }
  if (static_cast<std::size_t>(f.nx) * f.ny != t.rows.size())
    throw IoError("field3d csv: rows do not form a complete lattice");
  f.points.resize(t.rows.size());
  std::vector<char> seen(t.rows.size(), 0);
  f.frame = static_cast<int>(parse_int(t.rows[0][c_frame], "frame"));
  f.time_s = parse_double(t.rows[0][c_t], "t_s");
  for (const auto& r : t.rows) {
    Point3D p;
    p.ix = static_cast<int>(parse_int(r[c_ix], "ix"));
    p.iy = static_cast<int>(parse_int(r[c_iy], "iy"));
    if (p.ix < 0 || p.iy < 0) throw IoError("field3d csv: negative lattice index");
    if (parse_int(r[c_frame], "frame") != f.frame) throw IoError("field3d csv: mixed frames in one file");
    p.position = {parse_double(r[c_X], "X"), parse_double(r[c_Y], "Y"), parse_double(r[c_Z], "Z")};
    const auto valid = parse_int(r[c_valid], "valid");
    if (valid != 0 && valid != 1) throw IoError("field3d csv: valid must be 0 or 1");
    p.valid = valid == 1;
    if (p.valid) {
      p.displacement = {parse_double(r[c_U], "U"), parse_double(r[c_V], "V"), parse_double(r[c_W], "W")};
      if (!p.displacement.allFinite() || !p.position.allFinite())
        throw IoError("field3d csv: valid point with empty cells");
    }
    const auto idx = f.index(p.ix, p.iy);
    if (seen[idx]) throw IoError("field3d csv: duplicate lattice index");
    seen[idx] = 1;
    f.points[idx] = p;
  }
  std::vector<Eigen::Vector3d> ref;
  for (const auto& p : f.points)
    if (p.position.allFinite()) ref.push_back(p.position);
  f.surface = fit_surface_frame(ref, CameraModel{});
  return f;
}

inline Field3D read_field3d(const std::string& path) { return field3d_from_csv(detail::read_csv(path)); }

// ---------------------------------------------------------------------------
// Sequence reconstruction

/// Supplies frame `i` of one camera; frame 0 is the reference.
using FrameSource = std::function<GrayImage(std::size_t)>;

struct ReconstructionOptions {
  unsigned threads = 1;
  double fps = 2.0;
  int cross_search_radius_px = 40;  ///< integer search allowance for the cam0 -> cam1 seed
  std::optional<LatticeIndex> seed;
};

/// Per-frame output of reconstruct_sequence, with the 2D legs kept for diagnostics.
struct StereoFrame {
  Field3D field;
  DisplacementField2D temporal;  ///< cam0 reference -> cam0 frame
  DisplacementField2D stereo;    ///< cam0 reference -> cam1 frame
};

/// 3D displacement sequence from synchronised frames of a calibrated rig.
///
/// The cam0 reference is matched once into the cam1 reference (integer seed
/// search over `cross_search_radius_px`, then best-first propagation). Every
/// later frame matches the cam0 reference subsets into both current images,
/// each point starting from its previous-frame solution, which composes the
/// cross-camera match with the cameras' motion. Reference and current
/// positions are triangulated and differenced; U, V, W are resolved in the
/// frame of the plane fitted to the reference points.
inline void reconstruct_sequence(const StereoRig& rig, const FrameSource& cam0, const FrameSource& cam1,
                                 std::size_t frames, const Roi& roi, const CorrelationConfig& cfg,
                                 const ReconstructionOptions& opt, const std::function<void(StereoFrame&&)>& sink) {
  rig.validate();
  cfg.validate();
  if (frames == 0) throw ConfigError("reconstruct_sequence: no frames");
  if (!(opt.fps > 0.0)) throw ConfigError("reconstruct_sequence: fps must be > 0");
  if (opt.cross_search_radius_px < 0) throw ConfigError("reconstruct_sequence: cross_search_radius_px must be >= 0");

  const GrayImage ref0 = cam0(0);
  const GrayImage ref1 = cam1(0);
  if (ref0.width() != ref1.width() || ref0.height() != ref1.height())
    throw ConfigError("reconstruct_sequence: cameras deliver different image sizes");

  CorrelationConfig cross_cfg = cfg;
  cross_cfg.search_radius_px = opt.cross_search_radius_px;
  FieldOptions cross_opt;
  cross_opt.seed = opt.seed;
  DisplacementField2D cross;
  {
    const SubsetMatcher matcher(ref0, ref1, cross_cfg);
    cross = correlate_field(matcher, roi, cross_opt);
  }
  if (2 * cross.valid_count() < cross.points.size())
    throw NumericalError("reconstruct_sequence: cross-camera correlation failed on " +
                         std::to_string(cross.points.size() - cross.valid_count()) + " of " +
                         std::to_string(cross.points.size()) + " lattice points (check the rig and ROI)");

  const Lattice& lat = cross.lattice;
  const std::size_t n = lat.size();
  std::vector<Eigen::Vector3d> ref_pos(n, Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN()));
  detail::parallel_for(n, opt.threads, [&](std::size_t i) {
    const auto& c = cross.points[i];
    if (!c.valid) return;
    try {
      ref_pos[i] = rig.cam0.to_camera(triangulate(rig, {double(c.x), double(c.y)}, {c.x + c.warp.u, c.y + c.warp.v}).point);
    } catch (const NumericalError&) {
    }
  });
  std::vector<Eigen::Vector3d> finite;
  for (const auto& p : ref_pos)
    if (p.allFinite()) finite.push_back(p);
  const SurfaceFrame surface = fit_surface_frame(finite, CameraModel{});

  DisplacementField2D prev_temporal, prev_stereo = cross;
  for (std::size_t k = 0; k < frames; ++k) {
    const double t = static_cast<double>(k) / opt.fps;
    FieldOptions fo;
    fo.threads = opt.threads;
    fo.frame = static_cast<int>(k);
    fo.time_s = t;
    StereoFrame out;
    if (k == 0) {
      const SubsetMatcher m0(ref0, ref0, cfg);
      fo.seed = opt.seed;
      out.temporal = correlate_field(m0, roi, fo);
      out.stereo = cross;
      out.stereo.frame = 0;
      out.stereo.time_s = t;
    } else {
      const GrayImage cur0 = cam0(k);
      const GrayImage cur1 = cam1(k);
      if (cur0.width() != ref0.width() || cur0.height() != ref0.height() || cur1.width() != ref0.width() ||
          cur1.height() != ref0.height())
        throw ConfigError("reconstruct_sequence: frame " + std::to_string(k) + " has a different image size");
      {
        const SubsetMatcher m0(ref0, cur0, cfg);
        fo.prior = &prev_temporal;
        out.temporal = correlate_field(m0, roi, fo);
      }
      {
        const SubsetMatcher m1(ref0, cur1, cfg);
        fo.prior = &prev_stereo;
        out.stereo = correlate_field(m1, roi, fo);
      }
    }

    Field3D& f = out.field;
    f.nx = lat.nx;
    f.ny = lat.ny;
    f.frame = static_cast<int>(k);
    f.time_s = t;
    f.surface = surface;
    f.points.resize(n);
    detail::parallel_for(n, opt.threads, [&](std::size_t i) {
      Point3D& p = f.points[i];
      p.ix = static_cast<int>(i % lat.nx);
      p.iy = static_cast<int>(i / lat.nx);
      p.position = ref_pos[i];
      const auto& a = out.temporal.points[i];
      const auto& b = out.stereo.points[i];
      if (!p.position.allFinite() || !a.valid || !b.valid) return;
      try {
        const auto cur = triangulate(rig, {a.x + a.warp.u, a.y + a.warp.v}, {b.x + b.warp.u, b.y + b.warp.v});
        p.displacement = surface.direction_to_local(rig.cam0.to_camera(cur.point) - p.position);
        p.valid = p.displacement.allFinite();
      } catch (const NumericalError&) {
      }
    });
    prev_temporal = out.temporal;
    prev_stereo = out.stereo;
    sink(std::move(out));
  }
}

inline std::vector<Field3D> reconstruct_sequence(const StereoRig& rig, const std::vector<GrayImage>& cam0,
                                                 const std::vector<GrayImage>& cam1, const Roi& roi,
                                                 const CorrelationConfig& cfg, const ReconstructionOptions& opt = {}) {
  if (cam0.size() != cam1.size()) throw ConfigError("reconstruct_sequence: frame counts differ between cameras");
  std::vector<Field3D> out;
  reconstruct_sequence(
      rig, [&](std::size_t i) { return cam0[i]; }, [&](std::size_t i) { return cam1[i]; }, cam0.size(), roi, cfg, opt,
      [&](StereoFrame&& f) { out.push_back(std::move(f.field)); });
  return out;
}

}  // namespace dic3d
