#pragma once

// Point-cloud comparison: ASCII PLY I/O, marker-based rigid alignment and
// signed deviation of a test scan against a reference scan.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dic3d/detail/parallel.hpp"
#include "dic3d/detail/text.hpp"
#include "dic3d/error.hpp"
#include "json.hpp"

namespace dic3d {

struct PointCloud {
  std::vector<Eigen::Vector3d> points;  ///< mm
  std::vector<int> marker_ids;          ///< empty, or one per point; -1 = unlabeled

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (points.empty()) out.push_back("point cloud is empty");
    for (std::size_t i = 0; i < points.size(); ++i)
      if (!points[i].allFinite()) {
        out.push_back("point " + std::to_string(i) + " has a non-finite coordinate");
        break;
      }
    if (!marker_ids.empty() && marker_ids.size() != points.size())
      out.push_back("marker_ids must be empty or one per point");
    std::map<int, int> seen;
    for (int id : marker_ids)
      if (id >= 0 && ++seen[id] == 2) out.push_back("marker id " + std::to_string(id) + " is not unique");
    for (int id : marker_ids)
      if (id < -1) {
        out.push_back("marker ids must be >= -1");
        break;
      }
    return out;
  }

  void validate() const {
    auto i = issues();
    if (!i.empty()) throw ConfigError(std::move(i));
  }

  std::map<int, Eigen::Vector3d> markers() const {
    std::map<int, Eigen::Vector3d> m;
    for (std::size_t i = 0; i < marker_ids.size(); ++i)
      if (marker_ids[i] >= 0) m[marker_ids[i]] = points[i];
    return m;
  }
};

// ---------------------------------------------------------------------------
// PLY

/// ASCII PLY with a vertex element carrying x, y, z and an optional integer
/// marker_id. Other elements are skipped.
inline PointCloud parse_ply(const std::string& text, const std::string& source = "ply") {
  std::istringstream in(text);
  std::string line;
  auto fail = [&](const std::string& what) -> IoError { return IoError(source + ": " + what); };
  if (!std::getline(in, line) || detail::trim(line) != "ply") throw fail("not a PLY file (missing 'ply' magic)");

  struct Element {
    std::string name;
    long long count = 0;
    std::vector<std::string> props;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool format_seen = false, header_done = false;
  while (std::getline(in, line)) {
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    std::istringstream ls(t);
    std::string kw;
    ls >> kw;
    if (kw == "comment" || kw == "obj_info") continue;
    if (kw == "format") {
      std::string fmt, ver;
      ls >> fmt >> ver;
      if (fmt != "ascii") throw fail("unsupported PLY format '" + fmt + "' (ASCII only)");
      format_seen = true;
    } else if (kw == "element") {
      Element e;
      std::string count;
      ls >> e.name >> count;
      e.count = detail::parse_int(count, source + ": element count");
      if (e.count < 0) throw fail("negative element count");
      elements.push_back(e);
    } else if (kw == "property") {
      if (elements.empty()) throw fail("property before any element");
      std::string type;
      ls >> type;
      if (type == "list") {
        elements.back().has_list = true;
        std::string a, b, name;
        ls >> a >> b >> name;
        elements.back().props.push_back(name);
      } else {
        std::string name;
        ls >> name;
        elements.back().props.push_back(name);
      }
    } else if (kw == "end_header") {
      header_done = true;
      break;
    } else {
      throw fail("unexpected header line '" + t + "'");
    }
  }
  if (!header_done) throw fail("missing end_header");
  if (!format_seen) throw fail("missing format line");
  const auto vit = std::find_if(elements.begin(), elements.end(), [](const auto& e) { return e.name == "vertex"; });
  if (vit == elements.end()) throw fail("missing vertex element");
  if (vit->has_list) throw fail("vertex element with list properties is not supported");
  auto col = [&](const std::string& n) -> int {
    const auto it = std::find(vit->props.begin(), vit->props.end(), n);
    return it == vit->props.end() ? -1 : static_cast<int>(it - vit->props.begin());
  };
  const int cx = col("x"), cy = col("y"), cz = col("z"), cm = col("marker_id");
  if (cx < 0 || cy < 0 || cz < 0) throw fail("vertex element lacks x, y or z");

  PointCloud cloud;
  long long line_no = 0;
  for (const auto& e : elements) {
    for (long long i = 0; i < e.count; ++i) {
      if (!std::getline(in, line)) throw fail("file ends before " + std::to_string(e.count) + " " + e.name + " rows");
      ++line_no;
      if (e.name != "vertex") continue;
      std::istringstream ls(line);
      std::vector<std::string> tok;
      for (std::string s; ls >> s;) tok.push_back(s);
      if (tok.size() != e.props.size())
        throw fail("vertex " + std::to_string(i) + ": expected " + std::to_string(e.props.size()) + " values, got " +
                   std::to_string(tok.size()));
      const std::string ctx = source + ": vertex " + std::to_string(i);
      cloud.points.emplace_back(detail::parse_double(tok[cx], ctx), detail::parse_double(tok[cy], ctx),
                                detail::parse_double(tok[cz], ctx));
      if (cm >= 0) cloud.marker_ids.push_back(static_cast<int>(detail::parse_int(tok[cm], ctx + " marker_id")));
    }
  }
  while (std::getline(in, line))
    if (!detail::trim(line).empty()) throw fail("more rows than the header declares");
  try {
    cloud.validate();
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  return cloud;
}

inline PointCloud read_ply(const std::string& path) { return parse_ply(detail::read_text(path), path); }

/// Coordinates are written in shortest round-trip form, so reading back is exact.
inline std::string ply_to_string(const PointCloud& c) {
  c.validate();
  std::ostringstream os;
  const bool markers = !c.marker_ids.empty();
  os << "ply\nformat ascii 1.0\nelement vertex " << c.points.size()
     << "\nproperty double x\nproperty double y\nproperty double z\n";
  if (markers) os << "property int marker_id\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const auto& p = c.points[i];
    os << detail::fmt(p.x()) << ' ' << detail::fmt(p.y()) << ' ' << detail::fmt(p.z());
    if (markers) os << ' ' << c.marker_ids[i];
    os << '\n';
  }
  return os.str();
}

inline void write_ply(const PointCloud& c, const std::string& path) { detail::write_text(path, ply_to_string(c)); }

// ---------------------------------------------------------------------------
// Rigid alignment

/// dst = R * src + t.
struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  RigidTransform inverse() const { return {R.transpose(), -R.transpose() * t}; }

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (!R.allFinite() || !t.allFinite()) out.push_back("transform has non-finite entries");
    else if ((R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
             std::abs(R.determinant() - 1.0) > 1e-9)
      out.push_back("transform rotation must be orthonormal with det +1");
    return out;
  }
};

struct Alignment {
  RigidTransform transform;
  double rms_mm = 0.0;
  std::size_t common_markers = 0;
};

/// Least-squares rigid transform taking src markers onto dst markers with the
/// same labels (SVD, reflections excluded).
inline Alignment kabsch_align(const std::map<int, Eigen::Vector3d>& src, const std::map<int, Eigen::Vector3d>& dst) {
  std::vector<Eigen::Vector3d> a, b;
  for (const auto& [id, p] : src) {
    const auto it = dst.find(id);
    if (it == dst.end()) continue;
    a.push_back(p);
    b.push_back(it->second);
  }
  if (a.size() < 3)
    throw NumericalError("alignment needs at least 3 common marker labels, found " + std::to_string(a.size()));
  const double n = static_cast<double>(a.size());
  Eigen::Vector3d ca = Eigen::Vector3d::Zero(), cb = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca += a[i];
    cb += b[i];
  }
  ca /= n;
  cb /= n;
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero(), S = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    H += (a[i] - ca) * (b[i] - cb).transpose();
    S += (a[i] - ca) * (a[i] - ca).transpose();
  }
  const Eigen::JacobiSVD<Eigen::Matrix3d> spread(S);
  if (!(spread.singularValues()(1) > 1e-12 * spread.singularValues()(0)))
    throw NumericalError("alignment markers are collinear; rotation about their line is undetermined");
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
  D(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  Alignment out;
  out.transform.R = svd.matrixV() * D * svd.matrixU().transpose();
  out.transform.t = cb - out.transform.R * ca;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (out.transform.apply(a[i]) - b[i]).squaredNorm();
  out.rms_mm = std::sqrt(ss / n);
  out.common_markers = a.size();
  return out;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

/// Neighbour order: squared distance, then point index.
struct Neighbor {
  double d2 = 0.0;
  std::size_t index = 0;
  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
  }
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

inline double squared_distance(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double dx = a.x() - b.x(), dy = a.y() - b.y(), dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

/// Exact k nearest neighbours by exhaustive scan.
inline std::vector<Neighbor> brute_force_knn(const std::vector<Eigen::Vector3d>& pts, const Eigen::Vector3d& q,
                                             std::size_t k) {
  std::vector<Neighbor> all(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) all[i] = {squared_distance(pts[i], q), i};
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
  all.resize(k);
  return all;
}

/// Static k-d tree over a point set; queries return exactly what
/// brute_force_knn returns, ties included.
class KdTree {
 public:
  explicit KdTree(const std::vector<Eigen::Vector3d>& pts) : pts_(pts), order_(pts.size()) {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (!pts_.empty()) build(0, order_.size());
  }

  std::vector<Neighbor> knn(const Eigen::Vector3d& q, std::size_t k) const {
    k = std::min(k, pts_.size());
    std::vector<Neighbor> best;
    best.reserve(k + 1);
    if (k > 0) search(0, q, k, best);
    return best;
  }

 private:
  struct Node {
    std::size_t begin = 0, end = 0;  ///< range in order_
    int axis = -1;                   ///< -1 for leaves
    double split = 0.0;
    std::size_t left = 0, right = 0;
    Eigen::Vector3d lo, hi;  ///< bounding box
  };
  static constexpr std::size_t kLeaf = 12;

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({});
    Node n;
    n.begin = begin;
    n.end = end;
    n.lo = n.hi = pts_[order_[begin]];
    for (std::size_t i = begin; i < end; ++i) {
      n.lo = n.lo.cwiseMin(pts_[order_[i]]);
      n.hi = n.hi.cwiseMax(pts_[order_[i]]);
    }
    if (end - begin > kLeaf) {
      Eigen::Index axis;
      (n.hi - n.lo).maxCoeff(&axis);
      n.axis = static_cast<int>(axis);
      const std::size_t mid = begin + (end - begin) / 2;
      std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                       order_.begin() + static_cast<std::ptrdiff_t>(mid),
                       order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                         const double va = pts_[a](axis), vb = pts_[b](axis);
                         return va < vb || (va == vb && a < b);
                       });
      n.split = pts_[order_[mid]](axis);
      n.left = build(begin, mid);
      n.right = build(mid, end);
    }
    nodes_[id] = n;
    return id;
  }

  static double box_d2(const Node& n, const Eigen::Vector3d& q) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = q(a) < n.lo(a) ? n.lo(a) - q(a) : q(a) > n.hi(a) ? q(a) - n.hi(a) : 0.0;
      d2 += d * d;
    }
    return d2;
  }

  void offer(std::vector<Neighbor>& best, std::size_t k, Neighbor c) const {
    if (best.size() == k && !(c < best.back())) return;
    best.insert(std::upper_bound(best.begin(), best.end(), c), c);
    if (best.size() > k) best.pop_back();
  }

  void search(std::size_t id, const Eigen::Vector3d& q, std::size_t k, std::vector<Neighbor>& best) const {
    const Node& n = nodes_[id];
    // A box at exactly the current worst distance may still hold a tie with a lower index.
    if (best.size() == k && box_d2(n, q) > best.back().d2) return;
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) offer(best, k, {squared_distance(pts_[order_[i]], q), order_[i]});
      return;
    }
    const bool left_first = q(n.axis) < n.split;
    search(left_first ? n.left : n.right, q, k, best);
    search(left_first ? n.right : n.left, q, k, best);
  }

  const std::vector<Eigen::Vector3d>& pts_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Deviation

enum class DeviationFlag { ok, excluded, point_to_point };

inline const char* to_string(DeviationFlag f) noexcept {
  switch (f) {
    case DeviationFlag::ok: return "ok";
    case DeviationFlag::excluded: return "excluded";
    case DeviationFlag::point_to_point: return "point_to_point";
  }
  return "?";
}

struct DeviationOptions {
  double max_dist_mm = 10.0;   ///< nearest-neighbour distance beyond which a point is excluded
  std::size_t neighbors = 12;  ///< reference points in each local plane fit
  double highlight_mm = 0.1;   ///< |deviation| counted as highlighted above this
  std::optional<Eigen::Vector3d> viewpoint;  ///< default: see cloud_deviation
  bool use_index = true;       ///< false: exhaustive neighbour search
  unsigned threads = 1;

  std::vector<std::string> issues() const {
    std::vector<std::string> out;
    if (!(max_dist_mm > 0.0)) out.push_back("max_dist_mm must be > 0");
    if (neighbors < 3) out.push_back("neighbors must be >= 3");
    if (!(highlight_mm >= 0.0)) out.push_back("highlight_mm must be >= 0");
    if (viewpoint && !viewpoint->allFinite()) out.push_back("viewpoint must be finite");
    return out;
  }
};

struct PointDeviation {
  Eigen::Vector3d position;  ///< transformed test point
  double signed_mm = std::numeric_limits<double>::quiet_NaN();
  std::size_t neighbor_count = 0;
  DeviationFlag flag = DeviationFlag::excluded;
};

struct DeviationSummary {
  std::size_t count = 0;  ///< included points
  std::size_t excluded = 0;
  std::size_t point_to_point = 0;
  std::size_t highlighted = 0;
  double mean_mm = 0.0, rms_mm = 0.0, max_abs_mm = 0.0, p95_abs_mm = 0.0;
  double highlight_mm = 0.0;
};

struct DeviationReport {
  std::vector<PointDeviation> points;  ///< test-cloud order
  DeviationSummary summary;
};

/// Summary over included points; p95 is the nearest-rank 95th percentile of |d|.
inline DeviationSummary summarize(const std::vector<PointDeviation>& pts, double highlight_mm) {
  DeviationSummary s;
  s.highlight_mm = highlight_mm;
  std::vector<double> mags;
  double sum = 0.0, ss = 0.0;
  for (const auto& p : pts) {
    if (p.flag == DeviationFlag::excluded) {
      ++s.excluded;
      continue;
    }
    if (p.flag == DeviationFlag::point_to_point) ++s.point_to_point;
    sum += p.signed_mm;
    ss += p.signed_mm * p.signed_mm;
    mags.push_back(std::abs(p.signed_mm));
    if (std::abs(p.signed_mm) > highlight_mm) ++s.highlighted;
  }
  s.count = mags.size();
  if (s.count == 0) return s;
  s.mean_mm = sum / static_cast<double>(s.count);
  s.rms_mm = std::sqrt(ss / static_cast<double>(s.count));
  std::sort(mags.begin(), mags.end());
  s.max_abs_mm = mags.back();
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(s.count)));
  s.p95_abs_mm = mags[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

/// Signed distance of each transformed test point to the tangent plane at its
/// nearest reference point, with the normal taken from a plane fit to the k
/// nearest reference points. Normals face the viewpoint, by default placed
/// on the reference cloud's thinnest principal axis (sign chosen so that
/// axis's largest component is positive), far beyond the cloud. Collinear
/// neighbour sets fall back to the unsigned nearest-point distance.
inline DeviationReport cloud_deviation(const PointCloud& reference, const PointCloud& test,
                                       const RigidTransform& transform, const DeviationOptions& opt = {}) {
  std::vector<std::string> issues;
  for (const auto& i : reference.issues()) issues.push_back("reference: " + i);
  for (const auto& i : test.issues()) issues.push_back("test: " + i);
  for (const auto& i : transform.issues()) issues.push_back(i);
  for (const auto& i : opt.issues()) issues.push_back(i);
  if (!issues.empty()) throw ConfigError(std::move(issues));

  const auto& ref = reference.points;
  Eigen::Vector3d viewpoint;
  if (opt.viewpoint) {
    viewpoint = *opt.viewpoint;
  } else {
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& p : ref) c += p;
    c /= static_cast<double>(ref.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    double extent = 0.0;
    for (const auto& p : ref) {
      cov += (p - c) * (p - c).transpose();
      extent = std::max(extent, (p - c).norm());
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    Eigen::Vector3d axis = es.eigenvectors().col(0);
    Eigen::Index big;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0) axis = -axis;
    viewpoint = c + axis * (10.0 * extent + 1.0);
  }

  std::optional<KdTree> tree;
  if (opt.use_index) tree.emplace(ref);
  DeviationReport rep;
  rep.points.resize(test.points.size());
  const std::size_t k = std::min(opt.neighbors, ref.size());
  detail::parallel_for(test.points.size(), opt.threads, [&](std::size_t i) {
    PointDeviation& d = rep.points[i];
    d.position = transform.apply(test.points[i]);
    const auto nn = tree ? tree->knn(d.position, k) : brute_force_knn(ref, d.position, k);
    d.neighbor_count = nn.size();
    const double nearest = std::sqrt(nn.front().d2);
    if (nearest > opt.max_dist_mm) {
      d.flag = DeviationFlag::excluded;
      return;
    }
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& n : nn) c += ref[n.index];
    c /= static_cast<double>(nn.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& n : nn) cov += (ref[n.index] - c) * (ref[n.index] - c).transpose();
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    const auto& ev = es.eigenvalues();
    if (nn.size() < 3 || !(ev(1) > 1e-12 * ev(2))) {
      d.signed_mm = nearest;
      d.flag = DeviationFlag::point_to_point;
      return;
    }
    Eigen::Vector3d n = es.eigenvectors().col(0);
    if (n.dot(viewpoint - c) < 0) n = -n;
    d.signed_mm = n.dot(d.position - ref[nn.front().index]);
    d.flag = DeviationFlag::ok;
  });
  rep.summary = summarize(rep.points, opt.highlight_mm);
  return rep;
}

inline constexpr const char* kDeviationHeader = "idx,x,y,z,signed_dev_mm,neighbor_count,flag";

inline std::string deviation_to_csv(const DeviationReport& r) {
  using detail::fmt;
  std::ostringstream os;
  os << kDeviationHeader << '\n';
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    const auto& p = r.points[i];
    os << i << ',' << fmt(p.position.x()) << ',' << fmt(p.position.y()) << ',' << fmt(p.position.z()) << ','
       << (p.flag == DeviationFlag::excluded ? "" : fmt(p.signed_mm)) << ',' << p.neighbor_count << ','
       << to_string(p.flag) << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json summary_to_json(const DeviationSummary& s) {
  nlohmann::ordered_json j;
  j["count"] = s.count;
  j["excluded"] = s.excluded;
  j["point_to_point"] = s.point_to_point;
  j["mean_mm"] = s.mean_mm;
  j["rms_mm"] = s.rms_mm;
  j["max_abs_mm"] = s.max_abs_mm;
  j["p95_abs_mm"] = s.p95_abs_mm;
  j["highlight_mm"] = s.highlight_mm;
  j["highlighted"] = s.highlighted;
  return j;
}

}  // namespace dic3d
