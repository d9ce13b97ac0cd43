#pragma once

// Post-processing of displacement fields: strain tensors, virtual gauges,
// time histories, out-of-plane profiles and elastic dead-load arithmetic.

#include <Eigen/Core>
#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dic3d/correlation.hpp"
#include "dic3d/detail/text.hpp"
#include "dic3d/error.hpp"
#include "dic3d/stereo.hpp"
#include "json.hpp"

namespace dic3d {

// ---------------------------------------------------------------------------
// Strain

/// Plane strain components in microstrain.
struct StrainTensor {
  double exx = std::numeric_limits<double>::quiet_NaN();
  double eyy = std::numeric_limits<double>::quiet_NaN();
  double exy = std::numeric_limits<double>::quiet_NaN();  ///< tensor shear, half the engineering shear angle
};

enum class StrainFormulation { engineering, green_lagrange };

inline const char* to_string(StrainFormulation f) noexcept {
  return f == StrainFormulation::engineering ? "engineering" : "green-lagrange";
}

inline StrainFormulation formulation_from_string(const std::string& s) {
  if (s == "engineering") return StrainFormulation::engineering;
  if (s == "green-lagrange" || s == "green_lagrange") return StrainFormulation::green_lagrange;
  throw ConfigError("unknown strain formulation '" + s + "' (expected engineering or green-lagrange)");
}

struct StrainPoint {
  int ix = 0, iy = 0;
  Eigen::Vector2d xy = Eigen::Vector2d::Constant(std::numeric_limits<double>::quiet_NaN());  ///< reference coordinates
  StrainTensor engineering, green;
  double w_um = std::numeric_limits<double>::quiet_NaN();  ///< out-of-plane displacement at the point
  bool valid = false;                                      ///< strain available
  bool w_valid = false;

  const StrainTensor& tensor(StrainFormulation f) const noexcept {
    return f == StrainFormulation::engineering ? engineering : green;
  }
};

/// Strain on the displacement lattice. Coordinates are surface-plane mm for
/// 3D fields and image px for 2D fields.
struct StrainGrid {
  int nx = 0, ny = 0;
  int window = 5;
  std::string coordinate_units;
  std::vector<StrainPoint> points;  ///< row-major
  int frame = 0;
  double time_s = 0.0;

  const StrainPoint& at(int ix, int iy) const { return points[static_cast<std::size_t>(iy) * nx + ix]; }
};

namespace detail {

/// Displacement sample used by the local gradient fit.
struct GradientSample {
  Eigen::Vector2d xy;
  Eigen::Vector3d d;
  bool valid = false;
};

/// Least-squares planes d = a + b x + c y over every window_pts x window_pts
/// neighbourhood. Windows are shifted inward at lattice borders.
inline StrainGrid strain_from_samples(int nx, int ny, const std::vector<GradientSample>& s, int window,
                                      const std::string& units) {
  if (window < 3 || window % 2 == 0) throw ConfigError("strain window must be an odd integer >= 3");
  if (nx < window || ny < window)
    throw ConfigError("strain: lattice " + std::to_string(nx) + "x" + std::to_string(ny) + " is smaller than the " +
                      std::to_string(window) + "x" + std::to_string(window) + " window");
  StrainGrid g;
  g.nx = nx;
  g.ny = ny;
  g.window = window;
  g.coordinate_units = units;
  g.points.resize(s.size());
  const int half = window / 2;
  const double need = 0.6 * window * window;
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const std::size_t idx = static_cast<std::size_t>(iy) * nx + ix;
      StrainPoint& p = g.points[idx];
      p.ix = ix;
      p.iy = iy;
      p.xy = s[idx].xy;
      p.w_valid = s[idx].valid && std::isfinite(s[idx].d.z());
      if (p.w_valid) p.w_um = s[idx].d.z() * 1e3;

      const int x0 = std::clamp(ix - half, 0, nx - window), y0 = std::clamp(iy - half, 0, ny - window);
      int count = 0;
      Eigen::Vector2d mean = Eigen::Vector2d::Zero();
      for (int j = y0; j < y0 + window; ++j)
        for (int i = x0; i < x0 + window; ++i) {
          const auto& q = s[static_cast<std::size_t>(j) * nx + i];
          if (!q.valid) continue;
          mean += q.xy;
          ++count;
        }
      if (count < need) continue;
      mean /= count;
      // Centred normal equations for the slope terms.
      Eigen::Matrix2d A = Eigen::Matrix2d::Zero();
      Eigen::Matrix<double, 2, 3> B = Eigen::Matrix<double, 2, 3>::Zero();
      Eigen::Vector3d dmean = Eigen::Vector3d::Zero();
      for (int j = y0; j < y0 + window; ++j)
        for (int i = x0; i < x0 + window; ++i) {
          const auto& q = s[static_cast<std::size_t>(j) * nx + i];
          if (q.valid) dmean += q.d;
        }
      dmean /= count;
      for (int j = y0; j < y0 + window; ++j)
        for (int i = x0; i < x0 + window; ++i) {
          const auto& q = s[static_cast<std::size_t>(j) * nx + i];
          if (!q.valid) continue;
          const Eigen::Vector2d r = q.xy - mean;
          A += r * r.transpose();
          B += r * (q.d - dmean).transpose();
        }
      if (!(std::abs(A.determinant()) > 1e-12 * A.squaredNorm())) continue;
      const Eigen::Matrix<double, 2, 3> G = A.inverse() * B;  // row 0: d/dx, row 1: d/dy of (U, V, W)
      const double ux = G(0, 0), uy = G(1, 0), vx = G(0, 1), vy = G(1, 1), wx = G(0, 2), wy = G(1, 2);
      if (!G.allFinite()) continue;
      p.engineering = {ux * 1e6, vy * 1e6, 0.5 * (uy + vx) * 1e6};
      p.green = {(ux + 0.5 * (ux * ux + vx * vx + wx * wx)) * 1e6, (vy + 0.5 * (uy * uy + vy * vy + wy * wy)) * 1e6,
                 0.5 * (uy + vx + ux * uy + vx * vy + wx * wy) * 1e6};
      p.valid = true;
    }
  return g;
}

}  // namespace detail

/// Strain of a 3D field from plane fits of U, V, W against the in-plane
/// surface coordinates (mm). A point needs at least 60% valid window points.
inline StrainGrid strain_field(const Field3D& f, int window = 5) {
  std::vector<detail::GradientSample> s(f.points.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& p = f.points[i];
    s[i].xy = p.position.allFinite() ? f.surface_xy(p) : Eigen::Vector2d::Constant(std::numeric_limits<double>::quiet_NaN());
    s[i].d = p.displacement;
    s[i].valid = p.valid && p.position.allFinite() && p.displacement.allFinite();
  }
  auto g = detail::strain_from_samples(f.nx, f.ny, s, window, "mm");
  g.frame = f.frame;
  g.time_s = f.time_s;
  return g;
}

/// Strain of a 2D field against image coordinates (px); W is absent.
inline StrainGrid strain_field(const DisplacementField2D& f, int window = 5) {
  std::vector<detail::GradientSample> s(f.points.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& p = f.points[i];
    s[i].xy = Eigen::Vector2d(p.x, p.y);
    s[i].d = Eigen::Vector3d(p.warp.u, p.warp.v, 0.0);
    s[i].valid = p.valid;
  }
  auto g = detail::strain_from_samples(f.lattice.nx, f.lattice.ny, s, window, "px");
  for (auto& p : g.points) {
    p.w_valid = false;
    p.w_um = std::numeric_limits<double>::quiet_NaN();
  }
  g.frame = f.frame;
  g.time_s = f.time_s;
  return g;
}

// ---------------------------------------------------------------------------
// Virtual gauges

enum class GaugeComponent { exx, eyy, exy, w };
enum class GaugeCoordinates { lattice, world };
enum class GaugeAggregate { mean, median };

struct RectRegion {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  ///< inclusive bounds
};
struct CircleRegion {
  double cx = 0, cy = 0, r = 0;
};

/// A virtual strain gauge. Lattice coordinates are (ix, iy) indices; world
/// coordinates are the strain grid's reference coordinates (surface-plane mm
/// with origin at the centroid of the reference points, or image px for 2D).
struct GaugeSpec {
  std::string id;
  std::variant<RectRegion, CircleRegion> region;
  GaugeCoordinates coordinates = GaugeCoordinates::lattice;
  GaugeComponent component = GaugeComponent::eyy;
  StrainFormulation formulation = StrainFormulation::green_lagrange;
  GaugeAggregate aggregate = GaugeAggregate::mean;
  double min_coverage = 0.5;

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    const std::string where = "gauge '" + id + "': ";
    if (id.empty()) out.push_back("gauge id must be non-empty");
    if (!(min_coverage > 0.0 && min_coverage <= 1.0)) out.push_back(where + "min_coverage must be in (0, 1]");
    if (const auto* r = std::get_if<RectRegion>(&region)) {
      if (!(r->x1 >= r->x0 && r->y1 >= r->y0)) out.push_back(where + "rectangle needs x1 >= x0 and y1 >= y0");
    } else if (const auto* c = std::get_if<CircleRegion>(&region)) {
      if (!(c->r >= 0.0)) out.push_back(where + "circle radius must be >= 0");
    }
    return out;
  }

  bool contains(double x, double y) const {
    if (const auto* r = std::get_if<RectRegion>(&region)) return x >= r->x0 && x <= r->x1 && y >= r->y0 && y <= r->y1;
    const auto& c = std::get<CircleRegion>(region);
    return (x - c.cx) * (x - c.cx) + (y - c.cy) * (y - c.cy) <= c.r * c.r;
  }
};

inline const char* to_string(GaugeComponent c) noexcept {
  switch (c) {
    case GaugeComponent::exx: return "exx";
    case GaugeComponent::eyy: return "eyy";
    case GaugeComponent::exy: return "exy";
    case GaugeComponent::w: return "W";
  }
  return "?";
}

/// Gauge list from JSON: [{"id", "shape": "rect"|"circle", "coordinates":
/// "lattice"|"world", "rect": [x0, y0, x1, y1] | "center": [x, y], "radius",
/// "component": "exx"|"eyy"|"exy"|"W", "min_coverage", "aggregate",
/// "formulation"}]. All problems are reported together.
inline std::vector<GaugeSpec> gauges_from_json(const nlohmann::json& j) {
  std::vector<std::string> issues;
  std::vector<GaugeSpec> out;
  if (!j.is_array()) throw ConfigError("gauges must be a list");
  for (std::size_t k = 0; k < j.size(); ++k) {
    const auto& e = j[k];
    const std::string where = "gauges[" + std::to_string(k) + "]";
    if (!e.is_object()) {
      issues.push_back(where + " must be an object");
      continue;
    }
    GaugeSpec g;
    auto str = [&](const char* key, const std::string& def) -> std::string {
      if (!e.contains(key)) return def;
      if (!e[key].is_string()) {
        issues.push_back(where + "." + key + " must be a string");
        return def;
      }
      return e[key].get<std::string>();
    };
    auto numbers = [&](const char* key, std::size_t n) -> std::vector<double> {
      if (!e.contains(key) || !e[key].is_array() || e[key].size() != n ||
          !std::all_of(e[key].begin(), e[key].end(), [](const auto& v) { return v.is_number(); })) {
        issues.push_back(where + "." + key + " must be a list of " + std::to_string(n) + " numbers");
        return std::vector<double>(n, 0.0);
      }
      return e[key].template get<std::vector<double>>();
    };
    g.id = str("id", "");
    if (g.id.empty()) issues.push_back(where + ".id is required");
    const std::string shape = str("shape", "rect");
    if (shape == "rect") {
      const auto v = numbers("rect", 4);
      g.region = RectRegion{v[0], v[1], v[2], v[3]};
    } else if (shape == "circle") {
      const auto v = numbers("center", 2);
      double r = 0.0;
      if (!e.contains("radius") || !e["radius"].is_number())
        issues.push_back(where + ".radius must be a number");
      else
        r = e["radius"].get<double>();
      g.region = CircleRegion{v[0], v[1], r};
    } else {
      issues.push_back(where + ".shape must be rect or circle");
    }
    const std::string coords = str("coordinates", "lattice");
    if (coords == "lattice") g.coordinates = GaugeCoordinates::lattice;
    else if (coords == "world") g.coordinates = GaugeCoordinates::world;
    else issues.push_back(where + ".coordinates must be lattice or world");
    const std::string comp = str("component", "eyy");
    if (comp == "exx") g.component = GaugeComponent::exx;
    else if (comp == "eyy") g.component = GaugeComponent::eyy;
    else if (comp == "exy") g.component = GaugeComponent::exy;
    else if (comp == "W" || comp == "w") g.component = GaugeComponent::w;
    else issues.push_back(where + ".component must be exx, eyy, exy or W");
    const std::string agg = str("aggregate", "mean");
    if (agg == "mean") g.aggregate = GaugeAggregate::mean;
    else if (agg == "median") g.aggregate = GaugeAggregate::median;
    else issues.push_back(where + ".aggregate must be mean or median");
    try {
      g.formulation = formulation_from_string(str("formulation", "green-lagrange"));
    } catch (const ConfigError& err) {
      issues.push_back(where + ": " + err.what());
    }
    if (e.contains("min_coverage")) {
      if (e["min_coverage"].is_number()) g.min_coverage = e["min_coverage"].get<double>();
      else issues.push_back(where + ".min_coverage must be a number");
    }
    for (const auto& i : g.issues()) issues.push_back(where + " " + i);
    for (const auto& other : out)
      if (!g.id.empty() && other.id == g.id) issues.push_back(where + ": duplicate gauge id '" + g.id + "'");
    out.push_back(std::move(g));
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return out;
}

struct GaugeReading {
  double value = std::numeric_limits<double>::quiet_NaN();  ///< µε, or µm for W
  double coverage = 0.0;
  std::size_t valid_points = 0, total_points = 0;
  bool reliable = false;
};

/// Mean (or median) of the gauge component over valid points in its region.
/// Throws ConfigError when the region holds no lattice point and
/// NumericalError when none of its points is valid.
inline GaugeReading virtual_gauge(const StrainGrid& grid, const GaugeSpec& gauge) {
  auto issues = gauge.issues();
  if (!issues.empty()) throw ConfigError(std::move(issues));
  std::vector<double> values;
  GaugeReading r;
  for (const auto& p : grid.points) {
    const double x = gauge.coordinates == GaugeCoordinates::lattice ? p.ix : p.xy.x();
    const double y = gauge.coordinates == GaugeCoordinates::lattice ? p.iy : p.xy.y();
    if (!std::isfinite(x) || !std::isfinite(y) || !gauge.contains(x, y)) continue;
    ++r.total_points;
    double v;
    bool ok;
    if (gauge.component == GaugeComponent::w) {
      ok = p.w_valid;
      v = p.w_um;
    } else {
      ok = p.valid;
      const auto& t = p.tensor(gauge.formulation);
      v = gauge.component == GaugeComponent::exx ? t.exx : gauge.component == GaugeComponent::eyy ? t.eyy : t.exy;
    }
    if (ok && std::isfinite(v)) values.push_back(v);
  }
  if (r.total_points == 0) throw ConfigError("gauge '" + gauge.id + "': region does not intersect the lattice");
  r.valid_points = values.size();
  r.coverage = static_cast<double>(r.valid_points) / static_cast<double>(r.total_points);
  if (values.empty()) throw NumericalError("gauge '" + gauge.id + "': no valid points in region (coverage 0)");
  if (gauge.aggregate == GaugeAggregate::mean) {
    double sum = 0.0;
    for (double v : values) sum += v;
    r.value = sum / static_cast<double>(values.size());
  } else {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    r.value = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  }
  r.reliable = r.coverage >= gauge.min_coverage;
  return r;
}

// ---------------------------------------------------------------------------
// Time histories

struct HistoryRecord {
  int frame = 0;
  double t_s = 0.0;
  double value = std::numeric_limits<double>::quiet_NaN();
  double coverage = 0.0;
  bool reliable = false;
};

struct GaugeHistory {
  std::string gauge_id;
  std::vector<HistoryRecord> records;
};

/// One record per strain grid. Frames where the gauge has no valid point
/// carry an empty value and are unreliable; a gauge that is empty in every
/// frame is an error.
inline GaugeHistory time_history(const std::vector<StrainGrid>& grids, const GaugeSpec& gauge) {
  if (grids.empty()) throw ConfigError("time_history: no frames");
  GaugeHistory h;
  h.gauge_id = gauge.id;
  bool any = false;
  for (std::size_t k = 0; k < grids.size(); ++k) {
    const auto& g = grids[k];
    if (k > 0 && !(g.time_s > grids[k - 1].time_s))
      throw ConfigError("time_history: frame times must be strictly increasing");
    HistoryRecord rec;
    rec.frame = g.frame;
    rec.t_s = g.time_s;
    try {
      const auto r = virtual_gauge(g, gauge);
      rec.value = r.value;
      rec.coverage = r.coverage;
      rec.reliable = r.reliable;
      any = true;
    } catch (const NumericalError&) {
    }
    h.records.push_back(rec);
  }
  if (!any) throw NumericalError("gauge '" + gauge.id + "' has no valid points in any frame");
  return h;
}

inline GaugeHistory time_history(const std::vector<Field3D>& fields, const GaugeSpec& gauge, int window = 5) {
  std::vector<StrainGrid> grids;
  grids.reserve(fields.size());
  for (const auto& f : fields) grids.push_back(strain_field(f, window));
  return time_history(grids, gauge);
}

inline constexpr const char* kHistoryHeader = "gauge_id,frame,t_s,value,coverage,reliable";

inline std::string histories_to_csv(const std::vector<GaugeHistory>& hs) {
  using detail::fmt;
  std::ostringstream os;
  os << kHistoryHeader << '\n';
  for (const auto& h : hs)
    for (const auto& r : h.records)
      os << h.gauge_id << ',' << r.frame << ',' << fmt(r.t_s) << ',' << (std::isfinite(r.value) ? fmt(r.value) : "")
         << ',' << fmt(r.coverage) << ',' << (r.reliable ? 1 : 0) << '\n';
  return os.str();
}

/// Histories in file order, grouped by gauge id.
inline std::vector<GaugeHistory> histories_from_csv(const detail::CsvTable& t) {
  const auto ci = t.column("gauge_id"), cf = t.column("frame"), ct = t.column("t_s"), cv = t.column("value"),
             cc = t.column("coverage"), cr = t.column("reliable");
  std::vector<GaugeHistory> out;
  for (const auto& row : t.rows) {
    HistoryRecord r;
    r.frame = static_cast<int>(detail::parse_int(row[cf], "history frame"));
    r.t_s = detail::parse_double(row[ct], "history t_s");
    r.value = row[cv].empty() ? std::numeric_limits<double>::quiet_NaN() : detail::parse_double(row[cv], "history value");
    r.coverage = detail::parse_double(row[cc], "history coverage");
    const auto rel = detail::parse_int(row[cr], "history reliable");
    if (rel != 0 && rel != 1) throw IoError("history reliable flag must be 0 or 1");
    r.reliable = rel == 1;
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& h) { return h.gauge_id == row[ci]; });
    if (it == out.end()) {
      out.push_back({row[ci], {}});
      it = out.end() - 1;
    }
    it->records.push_back(r);
  }
  return out;
}

struct Plateau {
  double mean = 0.0;
  double slope_per_s = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
  double t_start = 0.0, t_end = 0.0;
};

/// Statistics of the final 25% of a history (reliable records only). A
/// plateau exists when the fitted slope magnitude is below `max_slope`
/// (units per second).
inline Plateau detect_plateau(const GaugeHistory& h, double max_slope = 0.2) {
  if (!(max_slope > 0.0)) throw ConfigError("plateau slope threshold must be > 0");
  const std::size_t n = h.records.size();
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = n - n / 4; i < n; ++i) {
    const auto& r = h.records[i];
    if (r.reliable && std::isfinite(r.value)) pts.emplace_back(r.t_s, r.value);
  }
  if (pts.size() < 2)
    throw NumericalError("no plateau found for gauge '" + h.gauge_id + "': fewer than 2 reliable records in the final 25%");
  Plateau p;
  p.count = pts.size();
  double mt = 0, mv = 0;
  for (const auto& [t, v] : pts) {
    mt += t;
    mv += v;
  }
  mt /= p.count;
  mv /= p.count;
  double stt = 0, stv = 0, svv = 0;
  for (const auto& [t, v] : pts) {
    stt += (t - mt) * (t - mt);
    stv += (t - mt) * (v - mv);
    svv += (v - mv) * (v - mv);
  }
  p.mean = mv;
  p.slope_per_s = stt > 0 ? stv / stt : 0.0;
  p.stddev = std::sqrt(svv / p.count);
  p.t_start = pts.front().first;
  p.t_end = pts.back().first;
  if (!(std::abs(p.slope_per_s) < max_slope))
    throw NumericalError("no plateau found for gauge '" + h.gauge_id + "': final-quarter slope " +
                         detail::fmt(p.slope_per_s) + " per s exceeds " + detail::fmt(max_slope));
  return p;
}

// ---------------------------------------------------------------------------
// Out-of-plane profiles

struct ProfileSample {
  double s_mm = std::numeric_limits<double>::quiet_NaN();  ///< arclength from the first station
  double ix = 0.0, iy = 0.0;                               ///< fractional lattice position
  double w_um = std::numeric_limits<double>::quiet_NaN();
  bool valid = false;
};

struct Profile {
  std::vector<ProfileSample> samples;
  double amplitude_um = 0.0;  ///< max - min over valid samples
  std::size_t valid_count = 0;
  double noise_floor_um = 0.0;  ///< static RMS W used for the confidence test, 0 if unknown
  double confidence_threshold_um = 0.0;
  bool low_confidence = false;
};

/// Standard normal quantile by Newton iteration on the CDF.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("normal_quantile: p must be in (0, 1)");
  if (p < 0.5) return -normal_quantile(1.0 - p);
  double x = 0.0;
  for (int it = 0; it < 100; ++it) {
    const double cdf = 0.5 * std::erfc(-x / std::sqrt(2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    const double step = (cdf - p) / pdf;
    x -= step;
    if (std::abs(step) < 1e-14) break;
  }
  return x;
}

/// Expected range of `n` independent unit-variance Gaussian samples (Blom's
/// order-statistic approximation), used to scale an RMS noise floor to an
/// amplitude.
inline double noise_range_factor(std::size_t n) {
  if (n < 2) return 0.0;
  const double nn = static_cast<double>(n);
  return 2.0 * normal_quantile((nn - 0.375) / (nn + 0.25));
}

/// RMS of W (µm) over the valid points of a static sequence, frame 0 excluded.
inline double static_noise_floor_um(const std::vector<Field3D>& fields) {
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto& f : fields) {
    if (f.frame == 0) continue;
    for (const auto& p : f.points)
      if (p.valid) {
        ss += p.displacement.z() * p.displacement.z();
        ++n;
      }
  }
  if (n == 0) throw NumericalError("noise floor needs at least one valid point in a frame after the reference");
  return std::sqrt(ss / static_cast<double>(n)) * 1e3;
}

/// W sampled bilinearly at `samples` stations on the segment between two
/// lattice positions. A station is valid when every surrounding lattice
/// point with nonzero weight is. Given a measured static noise floor (RMS W,
/// µm) the profile is flagged low-confidence when its amplitude is below
/// twice the range noise alone produces over the same number of samples,
/// i.e. when noise could account for half of it.
inline Profile out_of_plane_profile(const Field3D& f, Eigen::Vector2d from, Eigen::Vector2d to, int samples,
                                    double noise_floor_um = 0.0) {
  if (samples < 2) throw ConfigError("profile needs at least 2 samples");
  if (f.nx < 2 || f.ny < 2) throw ConfigError("profile needs a lattice of at least 2x2");
  for (const auto* e : {&from, &to})
    if (!(e->x() >= 0 && e->y() >= 0 && e->x() <= f.nx - 1 && e->y() <= f.ny - 1))
      throw ConfigError("profile endpoint (" + detail::fmt(e->x()) + ", " + detail::fmt(e->y()) +
                        ") lies outside the lattice");
  if (!(noise_floor_um >= 0.0)) throw ConfigError("noise floor must be >= 0");

  // Lattice -> surface mm, used where positions are missing.
  Eigen::MatrixXd A(0, 3);
  Eigen::MatrixXd b(0, 2);
  {
    std::vector<std::pair<Eigen::Vector3d, Eigen::Vector2d>> rows;
    for (const auto& p : f.points)
      if (p.position.allFinite()) rows.push_back({Eigen::Vector3d(1.0, p.ix, p.iy), f.surface_xy(p)});
    A.resize(static_cast<Eigen::Index>(rows.size()), 3);
    b.resize(static_cast<Eigen::Index>(rows.size()), 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      A.row(static_cast<Eigen::Index>(i)) = rows[i].first.transpose();
      b.row(static_cast<Eigen::Index>(i)) = rows[i].second.transpose();
    }
  }
  const bool have_affine = A.rows() >= 3;
  const Eigen::MatrixXd affine = have_affine ? Eigen::MatrixXd(A.colPivHouseholderQr().solve(b)) : Eigen::MatrixXd();

  auto position_at = [&](double x, double y) -> Eigen::Vector2d {
    const int x0 = std::min(static_cast<int>(std::floor(x)), f.nx - 2), y0 = std::min(static_cast<int>(std::floor(y)), f.ny - 2);
    const double fx = x - x0, fy = y - y0;
    const Point3D* c[4] = {&f.at(x0, y0), &f.at(x0 + 1, y0), &f.at(x0, y0 + 1), &f.at(x0 + 1, y0 + 1)};
    if (std::all_of(c, c + 4, [](const Point3D* p) { return p->position.allFinite(); })) {
      return (1 - fx) * (1 - fy) * f.surface_xy(*c[0]) + fx * (1 - fy) * f.surface_xy(*c[1]) +
             (1 - fx) * fy * f.surface_xy(*c[2]) + fx * fy * f.surface_xy(*c[3]);
    }
    if (!have_affine) return Eigen::Vector2d::Constant(std::numeric_limits<double>::quiet_NaN());
    return (Eigen::RowVector3d(1.0, x, y) * affine).transpose();
  };

  Profile prof;
  prof.noise_floor_um = noise_floor_um;
  Eigen::Vector2d prev_xy;
  double s = 0.0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int k = 0; k < samples; ++k) {
    const double a = static_cast<double>(k) / (samples - 1);
    ProfileSample ps;
    ps.ix = from.x() + a * (to.x() - from.x());
    ps.iy = from.y() + a * (to.y() - from.y());
    const Eigen::Vector2d xy = position_at(ps.ix, ps.iy);
    if (k > 0) s += (xy - prev_xy).norm();
    prev_xy = xy;
    ps.s_mm = s;

    const int x0 = std::min(static_cast<int>(std::floor(ps.ix)), f.nx - 2);
    const int y0 = std::min(static_cast<int>(std::floor(ps.iy)), f.ny - 2);
    const double fx = ps.ix - x0, fy = ps.iy - y0;
    const Point3D& p00 = f.at(x0, y0);
    const Point3D& p10 = f.at(x0 + 1, y0);
    const Point3D& p01 = f.at(x0, y0 + 1);
    const Point3D& p11 = f.at(x0 + 1, y0 + 1);
    const bool usable = (p00.valid || (1 - fx) * (1 - fy) == 0.0) && (p10.valid || fx * (1 - fy) == 0.0) &&
                        (p01.valid || (1 - fx) * fy == 0.0) && (p11.valid || fx * fy == 0.0);
    auto wz = [](const Point3D& p) { return p.valid ? p.displacement.z() : 0.0; };
    if (usable) {
      ps.w_um = 1e3 * ((1 - fx) * (1 - fy) * wz(p00) + fx * (1 - fy) * wz(p10) + (1 - fx) * fy * wz(p01) +
                       fx * fy * wz(p11));
      ps.valid = std::isfinite(ps.w_um);
    }
    if (ps.valid) {
      lo = std::min(lo, ps.w_um);
      hi = std::max(hi, ps.w_um);
      ++prof.valid_count;
    }
    prof.samples.push_back(ps);
  }
  if (prof.valid_count == 0) throw NumericalError("profile: every station lies over invalid points");
  prof.amplitude_um = hi - lo;
  if (noise_floor_um > 0.0) {
    prof.confidence_threshold_um = 2.0 * noise_floor_um * noise_range_factor(prof.valid_count);
    prof.low_confidence = prof.amplitude_um < prof.confidence_threshold_um;
  }
  return prof;
}

inline constexpr const char* kProfileHeader = "station,s_mm,ix,iy,w_um,valid";

inline std::string profile_to_csv(const Profile& p) {
  using detail::fmt;
  std::ostringstream os;
  os << kProfileHeader << '\n';
  for (std::size_t k = 0; k < p.samples.size(); ++k) {
    const auto& s = p.samples[k];
    os << k << ',' << (std::isfinite(s.s_mm) ? fmt(s.s_mm) : "") << ',' << fmt(s.ix) << ',' << fmt(s.iy) << ','
       << (s.valid ? fmt(s.w_um) : "") << ',' << (s.valid ? 1 : 0) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Elastic dead-load arithmetic

enum class ForceUnit { kip, kN };
enum class StressUnit { ksi, MPa };
enum class AreaUnit { in2, mm2 };

namespace units {
inline constexpr double kMmPerIn = 25.4;
inline constexpr double kNewtonPerLbf = 4.4482216152605;
inline constexpr double kNewtonPerKip = 1000.0 * kNewtonPerLbf;
inline constexpr double kMm2PerIn2 = kMmPerIn * kMmPerIn;
inline constexpr double kMpaPerKsi = kNewtonPerKip / kMm2PerIn2;

inline double to_newton(double v, ForceUnit u) { return u == ForceUnit::kip ? v * kNewtonPerKip : v * 1e3; }
inline double from_newton(double n, ForceUnit u) { return u == ForceUnit::kip ? n / kNewtonPerKip : n / 1e3; }
inline double to_mpa(double v, StressUnit u) { return u == StressUnit::ksi ? v * kMpaPerKsi : v; }
inline double to_mm2(double v, AreaUnit u) { return u == AreaUnit::in2 ? v * kMm2PerIn2 : v; }

inline ForceUnit force_unit(const std::string& s) {
  if (s == "kip" || s == "kips") return ForceUnit::kip;
  if (s == "kN") return ForceUnit::kN;
  throw ConfigError("unknown force unit '" + s + "' (expected kips or kN)");
}
inline StressUnit stress_unit(const std::string& s) {
  if (s == "ksi") return StressUnit::ksi;
  if (s == "MPa") return StressUnit::MPa;
  throw ConfigError("unknown modulus unit '" + s + "' (expected ksi or MPa)");
}
inline AreaUnit area_unit(const std::string& s) {
  if (s == "in2" || s == "in^2") return AreaUnit::in2;
  if (s == "mm2" || s == "mm^2") return AreaUnit::mm2;
  throw ConfigError("unknown area unit '" + s + "' (expected in2 or mm2)");
}
inline const char* name(ForceUnit u) { return u == ForceUnit::kip ? "kips" : "kN"; }
inline const char* name(StressUnit u) { return u == StressUnit::ksi ? "ksi" : "MPa"; }
inline const char* name(AreaUnit u) { return u == AreaUnit::in2 ? "in2" : "mm2"; }
}  // namespace units

/// Bearing region carrying a reaction: modulus, loaded area and optional
/// tributary dead load, each in its own unit. Loads use `force_unit`.
struct BearingSpec {
  double E = 29000.0;
  StressUnit E_unit = StressUnit::ksi;
  double area = 0.0;
  AreaUnit area_unit = AreaUnit::in2;
  std::optional<double> tributary_dead_load;
  ForceUnit force_unit = ForceUnit::kip;

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (!(E > 0.0) || !std::isfinite(E)) out.push_back("bearing.E must be > 0");
    if (!(area > 0.0) || !std::isfinite(area)) out.push_back("bearing.area must be > 0");
    if (tributary_dead_load && !(*tributary_dead_load > 0.0))
      out.push_back("bearing.tributary_dead_load must be > 0 when given");
    return out;
  }
  void validate() const {
    auto i = issues();
    if (!i.empty()) throw ConfigError(std::move(i));
  }
};

/// Uniaxial elastic strain in µε for `load` (in spec.force_unit):
/// load / (area E). The sign follows the load; compression is negative.
inline double expected_strain(double load, const BearingSpec& spec) {
  spec.validate();
  if (spec.force_unit == ForceUnit::kip && spec.E_unit == StressUnit::ksi && spec.area_unit == AreaUnit::in2)
    return load / (spec.area * spec.E) * 1e6;
  return units::to_newton(load, spec.force_unit) /
         (units::to_mm2(spec.area, spec.area_unit) * units::to_mpa(spec.E, spec.E_unit)) * 1e6;
}

struct Reaction {
  double force = 0.0;  ///< spec.force_unit, signed like the strain
  std::optional<double> share_ratio;  ///< |force| / tributary dead load
};

/// Reaction carried by the bearing area at a measured strain (µε).
inline Reaction back_calculate_reaction(double strain_ue, const BearingSpec& spec) {
  spec.validate();
  if (!std::isfinite(strain_ue)) throw ConfigError("measured strain must be finite");
  Reaction r;
  if (spec.force_unit == ForceUnit::kip && spec.E_unit == StressUnit::ksi && spec.area_unit == AreaUnit::in2)
    r.force = strain_ue * 1e-6 * spec.E * spec.area;
  else
    r.force = units::from_newton(
        strain_ue * 1e-6 * units::to_mpa(spec.E, spec.E_unit) * units::to_mm2(spec.area, spec.area_unit),
        spec.force_unit);
  if (spec.tributary_dead_load) r.share_ratio = std::abs(r.force) / *spec.tributary_dead_load;
  return r;
}

/// Share of the tributary dead load; requires it in the spec.
inline double dead_load_share(double strain_ue, const BearingSpec& spec) {
  if (!spec.tributary_dead_load)
    throw ConfigError("bearing.tributary_dead_load is required to compute the load-share ratio");
  return *back_calculate_reaction(strain_ue, spec).share_ratio;
}

}  // namespace dic3d
