#pragma once

// Subset-based 2D image correlation: ZNSSD criterion, first-order shape
// function, inverse-compositional Gauss-Newton refinement and
// reliability-guided field computation on a regular lattice.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dic3d/detail/parallel.hpp"
#include "dic3d/detail/text.hpp"
#include "dic3d/error.hpp"
#include "dic3d/imaging.hpp"

namespace dic3d {

struct CorrelationConfig {
  int subset_px = 35;
  int step_px = 6;
  int max_iters = 50;
  double convergence_tol = 1e-4;  ///< max corner displacement of the warp update, px
  double znssd_valid_max = 0.4;
  double min_subset_std = 0.02;
  int search_radius_px = 10;  ///< integer search radius for seed points

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (subset_px < 11 || subset_px % 2 == 0) out.push_back("subset_px must be odd and >= 11");
    if (step_px < 1) out.push_back("step_px must be >= 1");
    if (max_iters < 1) out.push_back("max_iters must be >= 1");
    if (!(convergence_tol > 0.0)) out.push_back("convergence_tol must be > 0");
    if (!(znssd_valid_max > 0.0 && znssd_valid_max <= 4.0)) out.push_back("znssd_valid_max must be in (0, 4]");
    if (!(min_subset_std >= 0.0)) out.push_back("min_subset_std must be >= 0");
    if (search_radius_px < 0) out.push_back("search_radius_px must be >= 0");
    return out;
  }
  void validate() const {
    if (auto i = issues(); !i.empty()) throw ConfigError(std::move(i));
  }
  int half() const noexcept { return subset_px / 2; }
};

/// First-order subset warp. Maps subset-local (xi, eta) to
/// (xi + u + dudx*xi + dudy*eta, eta + v + dvdx*xi + dvdy*eta).
struct SubsetWarp {
  double u = 0.0, dudx = 0.0, dudy = 0.0;
  double v = 0.0, dvdx = 0.0, dvdy = 0.0;

  static SubsetWarp translation(double u, double v) { return {u, 0.0, 0.0, v, 0.0, 0.0}; }

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d m;
    m << 1.0 + dudx, dudy, u, dvdx, 1.0 + dvdy, v, 0.0, 0.0, 1.0;
    return m;
  }
  static SubsetWarp from_matrix(const Eigen::Matrix3d& m) {
    return {m(0, 2), m(0, 0) - 1.0, m(0, 1), m(1, 2), m(1, 0), m(1, 1) - 1.0};
  }

  /// Displacement of the subset-local point (xi, eta).
  Eigen::Vector2d displacement(double xi, double eta) const {
    return {u + dudx * xi + dudy * eta, v + dvdx * xi + dvdy * eta};
  }

  /// Warp re-centred on a point offset by (dx, dy) from this subset's centre.
  SubsetWarp recentered(double dx, double dy) const {
    SubsetWarp w = *this;
    w.u += dudx * dx + dudy * dy;
    w.v += dvdx * dx + dvdy * dy;
    return w;
  }

  bool finite() const noexcept {
    return std::isfinite(u) && std::isfinite(v) && std::isfinite(dudx) && std::isfinite(dudy) &&
           std::isfinite(dvdx) && std::isfinite(dvdy);
  }
};

enum class SubsetStatus { converged, flat, diverged, out_of_bounds, high_cost, unreached };

inline const char* to_string(SubsetStatus s) {
  switch (s) {
    case SubsetStatus::converged: return "converged";
    case SubsetStatus::flat: return "flat";
    case SubsetStatus::diverged: return "diverged";
    case SubsetStatus::out_of_bounds: return "out_of_bounds";
    case SubsetStatus::high_cost: return "high_cost";
    case SubsetStatus::unreached: return "unreached";
  }
  return "?";
}

struct SubsetResult {
  int x = 0, y = 0;  ///< subset centre in the reference image, px
  SubsetWarp warp;
  double cost = std::numeric_limits<double>::quiet_NaN();  ///< ZNSSD in [0, 4]
  double zncc = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool valid = false;
  SubsetStatus status = SubsetStatus::unreached;
};

// ---------------------------------------------------------------------------
// Criterion

namespace detail {

struct ZeroNormalized {
  double mean = 0.0;
  double norm = 0.0;  ///< sqrt(sum (x - mean)^2)
};

inline ZeroNormalized zero_normalize(std::span<const double> s) {
  double sum = 0.0;
  for (double v : s) sum += v;
  const double mean = sum / static_cast<double>(s.size());
  double ss = 0.0;
  for (double v : s) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss)};
}

/// Zero variance up to rounding of the mean.
inline bool is_flat(const ZeroNormalized& z, std::size_t n) noexcept {
  return z.norm <= 1e-12 * std::sqrt(static_cast<double>(n)) * std::max(1.0, std::abs(z.mean));
}

inline void check_criterion_inputs(std::span<const double> a, std::span<const double> b, const char* name) {
  if (a.size() != b.size()) throw ConfigError(std::string(name) + ": sample lists differ in length");
  if (a.size() < 2) throw ConfigError(std::string(name) + ": need at least 2 samples");
}

}  // namespace detail

class FlatSubsetError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Zero-normalised sum of squared differences, in [0, 4].
inline double znssd(std::span<const double> ref, std::span<const double> def) {
  detail::check_criterion_inputs(ref, def, "znssd");
  const auto r = detail::zero_normalize(ref);
  const auto g = detail::zero_normalize(def);
  if (detail::is_flat(r, ref.size()) || detail::is_flat(g, def.size())) throw FlatSubsetError("znssd: zero-variance subset");
  double cost = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = (ref[i] - r.mean) / r.norm - (def[i] - g.mean) / g.norm;
    cost += d * d;
  }
  return cost;
}

/// Zero-normalised cross-correlation coefficient, in [-1, 1].
inline double zncc(std::span<const double> ref, std::span<const double> def) {
  detail::check_criterion_inputs(ref, def, "zncc");
  const auto r = detail::zero_normalize(ref);
  const auto g = detail::zero_normalize(def);
  if (detail::is_flat(r, ref.size()) || detail::is_flat(g, def.size())) throw FlatSubsetError("zncc: zero-variance subset");
  double acc = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) acc += (ref[i] - r.mean) * (def[i] - g.mean);
  return acc / (r.norm * g.norm);
}

// ---------------------------------------------------------------------------
// Subset matcher

struct IntegerOffset {
  int dx = 0, dy = 0;
  double zncc = -1.0;
};

/// Matches reference subsets against one deformed image. Holds the spline
/// coefficients of both images; const member functions are thread-safe.
class SubsetMatcher {
 public:
  SubsetMatcher(const GrayImage& ref, const GrayImage& def, CorrelationConfig cfg)
      : ref_(ref), def_(def), cfg_(cfg) {
    cfg_.validate();
  }

  const CorrelationConfig& config() const noexcept { return cfg_; }
  const SplineImage& reference() const noexcept { return ref_; }
  const SplineImage& deformed() const noexcept { return def_; }

  bool subset_inside(int cx, int cy) const noexcept {
    const int h = cfg_.half();
    return ref_.in_domain(cx - h, cy - h) && ref_.in_domain(cx + h, cy + h);
  }

  double subset_std(int cx, int cy) const {
    const int h = cfg_.half();
    double sum = 0.0, sum2 = 0.0;
    for (int y = cy - h; y <= cy + h; ++y)
      for (int x = cx - h; x <= cx + h; ++x) {
        const double v = ref_.node(x, y);
        sum += v;
        sum2 += v * v;
      }
    const double n = static_cast<double>(cfg_.subset_px) * cfg_.subset_px;
    const double mean = sum / n;
    return std::sqrt(std::max(0.0, sum2 / n - mean * mean));
  }

  /// Largest search radius (capped at `radius`) whose window stays inside the deformed image.
  int fitting_radius(int cx, int cy, int radius) const noexcept {
    const int h = cfg_.half();
    const int room = std::min({cx - h, cy - h, def_.width() - 1 - cx - h, def_.height() - 1 - cy - h});
    return std::min(radius, room);
  }

  /// Integer offset maximising ZNCC within +/- radius. Ties keep the first
  /// offset in row-major (dy, then dx) order.
  IntegerOffset integer_search(int cx, int cy, int radius) const {
    const int h = cfg_.half();
    const int w = def_.width(), ht = def_.height();
    if (cx - h < 0 || cy - h < 0 || cx + h >= ref_.width() || cy + h >= ref_.height())
      throw ConfigError("integer_search: reference subset exceeds the image");
    if (cx - h - radius < 0 || cy - h - radius < 0 || cx + h + radius >= w || cy + h + radius >= ht)
      throw ConfigError("integer_search: search window exceeds the image");
    const std::size_t n = static_cast<std::size_t>(cfg_.subset_px) * cfg_.subset_px;
    std::vector<double> f(n), g(n);
    std::size_t k = 0;
    for (int y = -h; y <= h; ++y)
      for (int x = -h; x <= h; ++x) f[k++] = ref_.node(cx + x, cy + y);
    const auto fz = detail::zero_normalize(f);
    if (fz.norm / std::sqrt(static_cast<double>(n)) < std::max(cfg_.min_subset_std, 1e-12))
      throw FlatSubsetError("integer_search: flat reference subset");
    for (double& v : f) v -= fz.mean;

    IntegerOffset best{0, 0, -std::numeric_limits<double>::infinity()};
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        k = 0;
        double sum = 0.0;
        for (int y = -h; y <= h; ++y)
          for (int x = -h; x <= h; ++x) {
            g[k] = def_.node(cx + dx + x, cy + dy + y);
            sum += g[k++];
          }
        const double gm = sum / static_cast<double>(n);
        double cross = 0.0, gg = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double gd = g[i] - gm;
          cross += f[i] * gd;
          gg += gd * gd;
        }
        if (gg == 0.0) continue;
        const double c = cross / (fz.norm * std::sqrt(gg));
        if (c > best.zncc) best = {dx, dy, c};
      }
    }
    if (!std::isfinite(best.zncc)) throw FlatSubsetError("integer_search: deformed window is flat everywhere");
    return best;
  }

  /// Inverse-compositional Gauss-Newton refinement of one subset.
  SubsetResult refine(int cx, int cy, const SubsetWarp& init) const {
    SubsetResult res;
    res.x = cx;
    res.y = cy;
    res.warp = init;
    const int h = cfg_.half();
    if (!subset_inside(cx, cy) || !init.finite()) {
      res.status = SubsetStatus::out_of_bounds;
      return res;
    }
    const std::size_t n = static_cast<std::size_t>(cfg_.subset_px) * cfg_.subset_px;
    std::vector<double> f(n), g(n);
    std::vector<Eigen::Matrix<double, 6, 1>> jac(n);
    std::size_t k = 0;
    double fsum = 0.0;
    for (int y = -h; y <= h; ++y)
      for (int x = -h; x <= h; ++x) {
        f[k] = ref_.node(cx + x, cy + y);
        fsum += f[k];
        const Eigen::Vector2d grad = ref_.node_gradient(cx + x, cy + y);
        jac[k] << grad.x(), grad.x() * x, grad.x() * y, grad.y(), grad.y() * x, grad.y() * y;
        ++k;
      }
    const double fmean = fsum / static_cast<double>(n);
    double fss = 0.0;
    for (double& v : f) {
      v -= fmean;
      fss += v * v;
    }
    const double fnorm = std::sqrt(fss);
    if (fnorm / std::sqrt(static_cast<double>(n)) < cfg_.min_subset_std || fnorm == 0.0) {
      res.status = SubsetStatus::flat;
      return res;
    }
    Eigen::Matrix<double, 6, 6> hess = Eigen::Matrix<double, 6, 6>::Zero();
    for (const auto& j : jac) hess.selfadjointView<Eigen::Lower>().rankUpdate(j);
    hess = hess.selfadjointView<Eigen::Lower>();
    const Eigen::LDLT<Eigen::Matrix<double, 6, 6>> solver(hess);
    if (solver.info() != Eigen::Success || !(solver.vectorD().minCoeff() > 0.0)) {
      res.status = SubsetStatus::flat;
      return res;
    }

    SubsetWarp p = init;
    const double lo = SplineImage::kMargin;
    const double hx = def_.width() - 1.0 - lo, hy = def_.height() - 1.0 - lo;
    for (int it = 1; it <= cfg_.max_iters; ++it) {
      // Affine warp: the subset stays inside iff its four corners do.
      for (int cyy : {-h, h})
        for (int cxx : {-h, h}) {
          const Eigen::Vector2d d = p.displacement(cxx, cyy);
          const double px = cx + cxx + d.x(), py = cy + cyy + d.y();
          if (!(px >= lo && py >= lo && px <= hx && py <= hy)) {
            res.warp = p;
            res.iterations = it - 1;
            res.status = SubsetStatus::out_of_bounds;
            return res;
          }
        }
      k = 0;
      double gsum = 0.0;
      for (int y = -h; y <= h; ++y) {
        double px = cx + p.u + p.dudy * y - (1.0 + p.dudx) * h;
        double py = cy + p.v + (1.0 + p.dvdy) * y - p.dvdx * h;
        for (int x = -h; x <= h; ++x) {
          g[k] = def_.sample(px, py);
          gsum += g[k++];
          px += 1.0 + p.dudx;
          py += p.dvdx;
        }
      }
      const double gmean = gsum / static_cast<double>(n);
      double gss = 0.0;
      for (double& v : g) {
        v -= gmean;
        gss += v * v;
      }
      const double gnorm = std::sqrt(gss);
      if (gnorm == 0.0) {
        res.warp = p;
        res.iterations = it - 1;
        res.status = SubsetStatus::diverged;
        return res;
      }
      const double ratio = fnorm / gnorm;
      Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
      double cost = 0.0, cross = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = f[i] - ratio * g[i];
        b.noalias() += jac[i] * e;
        const double d = f[i] / fnorm - g[i] / gnorm;
        cost += d * d;
        cross += f[i] * g[i];
      }
      res.cost = cost;
      res.zncc = cross / (fnorm * gnorm);
      const Eigen::Matrix<double, 6, 1> dp = -solver.solve(b);
      const SubsetWarp step{dp(0), dp(1), dp(2), dp(3), dp(4), dp(5)};
      const Eigen::Matrix3d inc = step.matrix();
      p = SubsetWarp::from_matrix(p.matrix() * inc.inverse());
      double corner = 0.0;
      for (int cyy : {-h, h})
        for (int cxx : {-h, h}) corner = std::max(corner, step.displacement(cxx, cyy).norm());
      if (!p.finite()) break;
      if (corner < cfg_.convergence_tol) {
        res.warp = p;
        res.iterations = it;
        res.status = cost <= cfg_.znssd_valid_max ? SubsetStatus::converged : SubsetStatus::high_cost;
        res.valid = res.status == SubsetStatus::converged;
        return res;
      }
    }
    res.warp = p;
    res.iterations = cfg_.max_iters;
    res.status = SubsetStatus::diverged;
    return res;
  }

 private:
  SplineImage ref_;
  SplineImage def_;
  CorrelationConfig cfg_;
};

inline SubsetResult icgn_refine(const GrayImage& ref, const GrayImage& def, int cx, int cy, const SubsetWarp& init,
                                const CorrelationConfig& cfg) {
  return SubsetMatcher(ref, def, cfg).refine(cx, cy, init);
}

inline IntegerOffset integer_search(const GrayImage& ref, const GrayImage& def, int cx, int cy, int radius,
                                    const CorrelationConfig& cfg = {}) {
  return SubsetMatcher(ref, def, cfg).integer_search(cx, cy, radius);
}

// ---------------------------------------------------------------------------
// Field computation

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Roi {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  static Roi whole(const GrayImage& img) { return {0, 0, img.width(), img.height()}; }
  friend bool operator==(const Roi&, const Roi&) = default;
};

struct Lattice {
  int origin_x = 0, origin_y = 0, step = 1, nx = 0, ny = 0;

  /// Subset centres whose full subset lies inside the ROI and the image's
  /// interpolation margin.
  static Lattice from_roi(const Roi& roi, int image_w, int image_h, const CorrelationConfig& cfg) {
    const int h = cfg.half();
    const int m = SplineImage::kMargin;
    const int fx = std::max(roi.x0, m) + h, fy = std::max(roi.y0, m) + h;
    const int lx = std::min(roi.x1 - 1, image_w - 1 - m) - h;
    const int ly = std::min(roi.y1 - 1, image_h - 1 - m) - h;
    Lattice l{fx, fy, cfg.step_px, 0, 0};
    if (lx >= fx && ly >= fy) {
      l.nx = (lx - fx) / cfg.step_px + 1;
      l.ny = (ly - fy) / cfg.step_px + 1;
    }
    return l;
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
  std::size_t index(int ix, int iy) const noexcept { return static_cast<std::size_t>(iy) * nx + ix; }
  int x(int ix) const noexcept { return origin_x + ix * step; }
  int y(int iy) const noexcept { return origin_y + iy * step; }
  friend bool operator==(const Lattice&, const Lattice&) = default;
};

struct DisplacementField2D {
  Lattice lattice;
  std::vector<SubsetResult> points;  ///< row-major over the lattice
  int frame = 0;
  double time_s = 0.0;

  const SubsetResult& at(int ix, int iy) const { return points[lattice.index(ix, iy)]; }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (const auto& p : points) n += p.valid ? 1 : 0;
    return n;
  }
};

struct LatticeIndex {
  int ix = 0, iy = 0;
};

struct FieldOptions {
  std::optional<LatticeIndex> seed;              ///< default: lattice point with highest subset std
  const DisplacementField2D* prior = nullptr;    ///< temporal chaining source
  unsigned threads = 1;
  int frame = 0;
  double time_s = 0.0;
};

namespace detail {

/// Best-first propagation from `seed_idx`, then re-seeding of any
/// unreached region. Sequential by contract.
inline void propagate_field(const SubsetMatcher& m, const Lattice& lat, std::size_t seed_idx,
                            std::vector<SubsetResult>& out, bool seed_required) {
  const auto& cfg = m.config();
  std::vector<char> done(lat.size(), 0);
  struct Item {
    double zncc;
    std::size_t index;
    std::size_t parent;
  };
  auto worse = [](const Item& a, const Item& b) {
    if (a.zncc != b.zncc) return a.zncc < b.zncc;
    return a.index > b.index;
  };
  std::priority_queue<Item, std::vector<Item>, decltype(worse)> queue(worse);

  auto push_neighbours = [&](std::size_t idx) {
    const int ix = static_cast<int>(idx % lat.nx), iy = static_cast<int>(idx / lat.nx);
    const std::array<std::array<int, 2>, 4> nb{{{0, -1}, {-1, 0}, {1, 0}, {0, 1}}};
    for (const auto& d : nb) {
      const int jx = ix + d[0], jy = iy + d[1];
      if (jx < 0 || jy < 0 || jx >= lat.nx || jy >= lat.ny) continue;
      const auto j = lat.index(jx, jy);
      if (!done[j]) queue.push({out[idx].zncc, j, idx});
    }
  };

  auto seed_at = [&](std::size_t idx) -> bool {
    const int ix = static_cast<int>(idx % lat.nx), iy = static_cast<int>(idx / lat.nx);
    const int cx = lat.x(ix), cy = lat.y(iy);
    done[idx] = 1;
    SubsetResult r;
    r.x = cx;
    r.y = cy;
    if (m.subset_std(cx, cy) < cfg.min_subset_std) {
      r.status = SubsetStatus::flat;
      out[idx] = r;
      return false;
    }
    try {
      const int radius = m.fitting_radius(cx, cy, cfg.search_radius_px);
      if (radius < 0) throw ConfigError("seed subset exceeds the deformed image");
      const auto off = m.integer_search(cx, cy, radius);
      r = m.refine(cx, cy, SubsetWarp::translation(off.dx, off.dy));
    } catch (const Error&) {
      r.status = SubsetStatus::out_of_bounds;
    }
    out[idx] = r;
    return r.valid;
  };

  auto drain = [&] {
    while (!queue.empty()) {
      const Item it = queue.top();
      queue.pop();
      if (done[it.index]) continue;
      done[it.index] = 1;
      const int ix = static_cast<int>(it.index % lat.nx), iy = static_cast<int>(it.index / lat.nx);
      const auto& parent = out[it.parent];
      const SubsetWarp init = parent.warp.recentered(lat.x(ix) - parent.x, lat.y(iy) - parent.y);
      out[it.index] = m.refine(lat.x(ix), lat.y(iy), init);
      if (out[it.index].valid) push_neighbours(it.index);
    }
  };

  if (!seed_at(seed_idx)) {
    if (seed_required)
      throw NumericalError("correlate_field: seed point (" + std::to_string(out[seed_idx].x) + ", " +
                           std::to_string(out[seed_idx].y) + ") failed: " + to_string(out[seed_idx].status));
  } else {
    push_neighbours(seed_idx);
    drain();
  }

  // Regions cut off by invalid points get their own seed, most textured first.
  for (;;) {
    std::size_t best = lat.size();
    double best_std = -1.0;
    for (std::size_t i = 0; i < lat.size(); ++i) {
      if (done[i]) continue;
      const double s = m.subset_std(lat.x(static_cast<int>(i % lat.nx)), lat.y(static_cast<int>(i / lat.nx)));
      if (s > best_std) {
        best_std = s;
        best = i;
      }
    }
    if (best == lat.size()) break;
    if (seed_at(best)) {
      push_neighbours(best);
      drain();
    }
  }
}

}  // namespace detail

/// Full-field correlation of `def` against `ref` on the ROI step lattice.
///
/// Without a prior the seed is matched by integer search + IC-GN and the
/// solution spreads best-first (highest parent ZNCC, then lowest row-major
/// index). With a prior every point starts from the prior's warp at the same
/// lattice index and is refined independently; those points are distributed
/// over `threads` workers with identical results for any worker count.
inline DisplacementField2D correlate_field(const SubsetMatcher& matcher, const Roi& roi, const FieldOptions& opt = {}) {
  const auto& cfg = matcher.config();
  const Lattice lat = Lattice::from_roi(roi, matcher.reference().width(), matcher.reference().height(), cfg);
  if (lat.size() == 0) throw ConfigError("correlate_field: ROI contains no lattice point");

  DisplacementField2D field;
  field.lattice = lat;
  field.frame = opt.frame;
  field.time_s = opt.time_s;
  field.points.resize(lat.size());
  for (int iy = 0; iy < lat.ny; ++iy)
    for (int ix = 0; ix < lat.nx; ++ix) {
      auto& p = field.points[lat.index(ix, iy)];
      p.x = lat.x(ix);
      p.y = lat.y(iy);
    }

  if (opt.prior) {
    const auto& prior = *opt.prior;
    if (!(prior.lattice == lat)) throw ConfigError("correlate_field: prior field lattice differs from ROI lattice");
    // Initializer for each point: its own prior result, else the nearest valid one.
    std::vector<std::size_t> source(lat.size(), lat.size());
    for (std::size_t i = 0; i < lat.size(); ++i) {
      if (prior.points[i].valid) {
        source[i] = i;
        continue;
      }
      long best_d = std::numeric_limits<long>::max();
      const long ix = static_cast<long>(i % lat.nx), iy = static_cast<long>(i / lat.nx);
      for (std::size_t j = 0; j < lat.size(); ++j) {
        if (!prior.points[j].valid) continue;
        const long dx = static_cast<long>(j % lat.nx) - ix, dy = static_cast<long>(j / lat.nx) - iy;
        const long d = dx * dx + dy * dy;
        if (d < best_d) {
          best_d = d;
          source[i] = j;
        }
      }
    }
    detail::parallel_for(lat.size(), opt.threads, [&](std::size_t i) {
      auto& out = field.points[i];
      if (source[i] == lat.size()) {
        out.status = SubsetStatus::unreached;
        return;
      }
      const auto& src = prior.points[source[i]];
      out = matcher.refine(out.x, out.y, src.warp.recentered(out.x - src.x, out.y - src.y));
    });
    return field;
  }

  std::size_t seed_idx = 0;
  if (opt.seed) {
    if (opt.seed->ix < 0 || opt.seed->iy < 0 || opt.seed->ix >= lat.nx || opt.seed->iy >= lat.ny)
      throw ConfigError("correlate_field: seed lattice index outside the lattice");
    seed_idx = lat.index(opt.seed->ix, opt.seed->iy);
  } else {
    // Most textured point whose full search window fits; any point otherwise.
    double best = -1.0;
    for (int pass = 0; pass < 2 && best < 0.0; ++pass)
      for (std::size_t i = 0; i < lat.size(); ++i) {
        const auto& p = field.points[i];
        if (pass == 0 && matcher.fitting_radius(p.x, p.y, cfg.search_radius_px) < cfg.search_radius_px) continue;
        const double s = matcher.subset_std(p.x, p.y);
        if (s > best) {
          best = s;
          seed_idx = i;
        }
      }
  }
  detail::propagate_field(matcher, lat, seed_idx, field.points, true);
  return field;
}

inline DisplacementField2D correlate_field(const GrayImage& ref, const GrayImage& def, const Roi& roi,
                                           const CorrelationConfig& cfg, const FieldOptions& opt = {}) {
  return correlate_field(SubsetMatcher(ref, def, cfg), roi, opt);
}

/// Lattice index nearest to a pixel position (clamped to the lattice).
inline LatticeIndex nearest_lattice_index(const Lattice& lat, double x, double y) {
  const int ix = static_cast<int>(std::lround((x - lat.origin_x) / lat.step));
  const int iy = static_cast<int>(std::lround((y - lat.origin_y) / lat.step));
  return {std::clamp(ix, 0, lat.nx - 1), std::clamp(iy, 0, lat.ny - 1)};
}

// ---------------------------------------------------------------------------
// CSV export

inline constexpr const char* kField2DHeader = "frame,t_s,ix,iy,x_px,y_px,u_px,v_px,dudx,dudy,dvdx,dvdy,zncc,valid";

inline std::string field_to_csv(const DisplacementField2D& f) {
  using detail::fmt;
  std::ostringstream os;
  os << kField2DHeader << '\n';
  for (int iy = 0; iy < f.lattice.ny; ++iy)
    for (int ix = 0; ix < f.lattice.nx; ++ix) {
      const auto& p = f.at(ix, iy);
      os << f.frame << ',' << fmt(f.time_s) << ',' << ix << ',' << iy << ',' << p.x << ',' << p.y << ',';
      if (p.valid) {
        const auto& w = p.warp;
        os << fmt(w.u) << ',' << fmt(w.v) << ',' << fmt(w.dudx) << ',' << fmt(w.dudy) << ',' << fmt(w.dvdx) << ','
           << fmt(w.dvdy) << ',';
      } else {
        os << ",,,,,,";
      }
      os << fmt(p.zncc) << ',' << (p.valid ? 1 : 0) << '\n';
    }
  return os.str();
}

/// Parses a field written by field_to_csv. Lattice geometry is recovered from
/// the pixel columns; per-point status is reduced to valid/invalid.
inline DisplacementField2D field_from_csv(const detail::CsvTable& t) {
  using detail::parse_double;
  using detail::parse_int;
  const auto c_frame = t.column("frame"), c_t = t.column("t_s"), c_ix = t.column("ix"), c_iy = t.column("iy"),
             c_x = t.column("x_px"), c_y = t.column("y_px"), c_u = t.column("u_px"), c_v = t.column("v_px"),
             c_ux = t.column("dudx"), c_uy = t.column("dudy"), c_vx = t.column("dvdx"), c_vy = t.column("dvdy"),
             c_z = t.column("zncc"), c_valid = t.column("valid");
  if (t.rows.empty()) throw IoError("field csv: no rows");
  DisplacementField2D f;
  int nx = 0, ny = 0;
  for (const auto& r : t.rows) {
    nx = std::max<int>(nx, static_cast<int>(parse_int(r[c_ix], "ix")) + 1);
    ny = std::max<int>(ny, static_cast<int>(parse_int(r[c_iy], "iy")) + 1);
  }
  if (static_cast<std::size_t>(nx) * ny != t.rows.size()) throw IoError("field csv: incomplete lattice");
  f.points.resize(t.rows.size());
  f.frame = static_cast<int>(parse_int(t.rows[0][c_frame], "frame"));
  f.time_s = parse_double(t.rows[0][c_t], "t_s");
  for (const auto& r : t.rows) {
    const int ix = static_cast<int>(parse_int(r[c_ix], "ix")), iy = static_cast<int>(parse_int(r[c_iy], "iy"));
    SubsetResult p;
    p.x = static_cast<int>(parse_int(r[c_x], "x_px"));
    p.y = static_cast<int>(parse_int(r[c_y], "y_px"));
    p.valid = parse_int(r[c_valid], "valid") != 0;
    p.zncc = parse_double(r[c_z], "zncc");
    if (p.valid) {
      p.warp = {parse_double(r[c_u], "u"), parse_double(r[c_ux], "dudx"), parse_double(r[c_uy], "dudy"),
                parse_double(r[c_v], "v"), parse_double(r[c_vx], "dvdx"), parse_double(r[c_vy], "dvdy")};
      p.cost = 2.0 * (1.0 - p.zncc);
      p.status = SubsetStatus::converged;
    } else {
      p.status = SubsetStatus::high_cost;
    }
    f.points[static_cast<std::size_t>(iy) * nx + ix] = p;
  }
  const auto& p0 = f.points.front();
  const int step = nx > 1 ? f.points[1].x - p0.x : (ny > 1 ? f.points[static_cast<std::size_t>(nx)].y - p0.y : 1);
  f.lattice = {p0.x, p0.y, std::max(step, 1), nx, ny};
  return f;
}

}  // namespace dic3d
