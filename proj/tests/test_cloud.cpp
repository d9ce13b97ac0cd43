#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <random>

#include "dic3d/cloud.hpp"

using namespace dic3d;

namespace {

/// Square lattice on z = 0 with `pitch` spacing, optionally raised by h(x, y).
PointCloud grid_plane(int n, double pitch, const std::function<double(double, double)>& h = {}) {
  PointCloud c;
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      const double x = pitch * (ix - 0.5 * (n - 1)), y = pitch * (iy - 0.5 * (n - 1));
      c.points.emplace_back(x, y, h ? h(x, y) : 0.0);
    }
  return c;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

std::vector<Eigen::Vector3d> random_points(std::mt19937_64& rng, std::size_t n, double half) {
  std::uniform_real_distribution<double> u(-half, half);
  std::vector<Eigen::Vector3d> p(n);
  for (auto& v : p) v = {u(rng), u(rng), u(rng)};
  return p;
}

std::map<int, Eigen::Vector3d> labeled(const std::vector<Eigen::Vector3d>& p) {
  std::map<int, Eigen::Vector3d> m;
  for (std::size_t i = 0; i < p.size(); ++i) m[static_cast<int>(i) + 1] = p[i];
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// PLY

TEST(Ply, HandWrittenThreePoints) {
  const std::string text =
      "ply\nformat ascii 1.0\ncomment scan\nelement vertex 3\nproperty float x\nproperty float y\n"
      "property float z\nproperty int marker_id\nelement face 1\nproperty list uchar int vertex_indices\n"
      "end_header\n1.5 -2 3\n0 0 0.25 7\n-4 5.125 6 -1\n3 0 1 2\n";
  EXPECT_THROW(parse_ply(text), IoError);  // row 1 lacks its marker id
  const std::string fixed =
      "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
      "property int marker_id\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
      "1.5 -2 3 -1\n0 0 0.25 7\n-4 5.125 6 -1\n3 0 1 2\n";
  const PointCloud c = parse_ply(fixed);
  ASSERT_EQ(c.points.size(), 3u);
  EXPECT_EQ(c.points[0], Eigen::Vector3d(1.5, -2, 3));
  EXPECT_EQ(c.points[1], Eigen::Vector3d(0, 0, 0.25));
  EXPECT_EQ(c.points[2], Eigen::Vector3d(-4, 5.125, 6));
  EXPECT_EQ(c.marker_ids, (std::vector<int>{-1, 7, -1}));
  ASSERT_EQ(c.markers().size(), 1u);
  EXPECT_EQ(c.markers().at(7), Eigen::Vector3d(0, 0, 0.25));
}

TEST(Ply, RoundTripHundredThousandPoints) {
  std::mt19937_64 rng(5);
  PointCloud c;
  c.points = random_points(rng, 100000, 500.0);
  c.marker_ids.assign(c.points.size(), -1);
  for (int i = 0; i < 20; ++i) c.marker_ids[static_cast<std::size_t>(i) * 997] = i;
  const PointCloud back = parse_ply(ply_to_string(c));
  ASSERT_EQ(back.points.size(), c.points.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < c.points.size(); ++i)
    worst = std::max(worst, (back.points[i] - c.points[i]).cwiseAbs().maxCoeff());
  EXPECT_LE(worst, 1e-4);
  EXPECT_EQ(back.marker_ids, c.marker_ids);
}

TEST(Ply, FileRoundTrip) {
  PointCloud c;
  c.points = {{1, 2, 3}, {4, 5, 6}};
  const std::string path = ::testing::TempDir() + "cloud_rt.ply";
  write_ply(c, path);
  const PointCloud back = read_ply(path);
  EXPECT_EQ(back.points, c.points);
  EXPECT_TRUE(back.marker_ids.empty());
  EXPECT_THROW(read_ply(::testing::TempDir() + "no_such.ply"), IoError);
}

TEST(Ply, MalformedFilesAreIoErrors) {
  const std::string head = "ply\nformat ascii 1.0\n";
  const std::string xyz = "property float x\nproperty float y\nproperty float z\n";
  EXPECT_THROW(parse_ply("ply\nformat binary_little_endian 1.0\nelement vertex 1\n" + xyz + "end_header\n"),
               IoError);
  EXPECT_THROW(parse_ply("plx\n"), IoError);
  EXPECT_THROW(parse_ply(head + "element face 0\nend_header\n"), IoError);
  EXPECT_THROW(parse_ply(head + "element vertex 2\n" + xyz + "end_header\n1 2 3\n"), IoError);
  EXPECT_THROW(parse_ply(head + "element vertex 1\n" + xyz + "end_header\n1 2 3\n4 5 6\n"), IoError);
  EXPECT_THROW(parse_ply(head + "element vertex x\n" + xyz + "end_header\n"), Error);
  EXPECT_THROW(parse_ply(head + "element vertex 1\n" + xyz + "end_header\n1 2 nan\n"), IoError);
  EXPECT_THROW(parse_ply(head + "element vertex 0\n" + xyz + "end_header\n"), IoError);
  EXPECT_THROW(parse_ply(head + "element vertex 1\n" + xyz), IoError);
  EXPECT_THROW(parse_ply(head + "element vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n"), IoError);
  const std::string dup = head + "element vertex 2\n" + xyz + "property int marker_id\nend_header\n0 0 0 3\n1 1 1 3\n";
  EXPECT_THROW(parse_ply(dup), IoError);
}

TEST(Ply, CloudIssues) {
  PointCloud c;
  EXPECT_FALSE(c.issues().empty());
  c.points = {{0, 0, 0}, {1, 1, 1}};
  c.marker_ids = {2};
  EXPECT_EQ(c.issues().size(), 1u);
  c.marker_ids = {2, 2};
  EXPECT_EQ(c.issues().size(), 1u);
  c.marker_ids = {2, -1};
  EXPECT_TRUE(c.issues().empty());
  EXPECT_THROW(ply_to_string(PointCloud{}), ConfigError);
}

// ---------------------------------------------------------------------------
// Alignment

TEST(Kabsch, IdentityAndTranslation) {
  std::mt19937_64 rng(1);
  const auto src = random_points(rng, 6, 100.0);
  const Alignment same = kabsch_align(labeled(src), labeled(src));
  EXPECT_LT((same.transform.R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(same.transform.t.norm(), 1e-12);
  EXPECT_LT(same.rms_mm, 1e-12);
  EXPECT_EQ(same.common_markers, 6u);

  auto dst = src;
  for (auto& p : dst) p += Eigen::Vector3d(1, 2, 3);
  const Alignment shift = kabsch_align(labeled(src), labeled(dst));
  EXPECT_LT((shift.transform.R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((shift.transform.t - Eigen::Vector3d(1, 2, 3)).norm(), 1e-12);
  EXPECT_LT(shift.rms_mm, 1e-12);
}

TEST(Kabsch, RecoversRandomRigidTransforms) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> count(3, 12);
  std::uniform_real_distribution<double> shift(-2000.0, 2000.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto src = random_points(rng, static_cast<std::size_t>(count(rng)), 500.0);
    const Eigen::Matrix3d R0 = random_rotation(rng);
    const Eigen::Vector3d t0(shift(rng), shift(rng), shift(rng));
    std::vector<Eigen::Vector3d> dst;
    for (const auto& p : src) dst.push_back(R0 * p + t0);
    const Alignment a = kabsch_align(labeled(src), labeled(dst));
    EXPECT_LT((a.transform.R - R0).cwiseAbs().maxCoeff(), 1e-9) << trial;
    EXPECT_LT((a.transform.t - t0).cwiseAbs().maxCoeff(), 1e-9) << trial;
    EXPECT_LT(a.rms_mm, 1e-9) << trial;
    EXPECT_TRUE(a.transform.issues().empty());
    for (std::size_t i = 0; i < src.size(); ++i) EXPECT_LT((a.transform.apply(src[i]) - dst[i]).norm(), 1e-9);
  }
}

TEST(Kabsch, MirrorImageGivesProperRotation) {
  const std::vector<Eigen::Vector3d> src = {{0, 0, 0}, {10, 0, 0}, {0, 10, 0}, {0, 0, 10}};
  std::vector<Eigen::Vector3d> dst;
  for (const auto& p : src) dst.emplace_back(p.x(), p.y(), -p.z());
  const Alignment a = kabsch_align(labeled(src), labeled(dst));
  EXPECT_NEAR(a.transform.R.determinant(), 1.0, 1e-12);
  EXPECT_GT(a.rms_mm, 1.0);
}

TEST(Kabsch, OnlyCommonLabelsAreUsed) {
  std::mt19937_64 rng(3);
  const auto pts = random_points(rng, 5, 50.0);
  auto src = labeled(pts);
  auto dst = labeled(pts);
  src[100] = {1e3, 0, 0};
  dst[200] = {0, 1e3, 0};
  const Alignment a = kabsch_align(src, dst);
  EXPECT_EQ(a.common_markers, 5u);
  EXPECT_LT(a.rms_mm, 1e-12);
}

TEST(Kabsch, DegenerateInputs) {
  const std::map<int, Eigen::Vector3d> two = {{1, {0, 0, 0}}, {2, {1, 0, 0}}};
  EXPECT_THROW(kabsch_align(two, two), NumericalError);
  std::map<int, Eigen::Vector3d> a = two, b = two;
  a[3] = {0, 1, 0};
  b[4] = {0, 1, 0};
  EXPECT_THROW(kabsch_align(a, b), NumericalError);
  const std::map<int, Eigen::Vector3d> line = {{1, {0, 0, 0}}, {2, {1, 1, 1}}, {3, {2, 2, 2}}, {4, {5, 5, 5}}};
  EXPECT_THROW(kabsch_align(line, line), NumericalError);
}

// ---------------------------------------------------------------------------
// Nearest neighbours

TEST(KdTree, MatchesBruteForceExactly) {
  std::mt19937_64 rng(11);
  auto pts = random_points(rng, 10000, 50.0);
  // Duplicates and lattice points create distance ties.
  for (int i = 0; i < 200; ++i) pts.push_back(pts[static_cast<std::size_t>(i) * 7]);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) pts.emplace_back(i, j, 0.0);
  const KdTree tree(pts);
  auto queries = random_points(rng, 2000, 60.0);
  for (int i = 0; i < 100; ++i) queries.emplace_back(i % 10 + 0.5, i / 10 + 0.5, 0.0);
  for (const auto& q : queries)
    for (std::size_t k : {1u, 12u, 40u}) ASSERT_EQ(tree.knn(q, k), brute_force_knn(pts, q, k));
}

TEST(KdTree, SmallAndDegenerateSets) {
  const std::vector<Eigen::Vector3d> one = {{1, 1, 1}};
  const KdTree t1(one);
  EXPECT_EQ(t1.knn({0, 0, 0}, 12).size(), 1u);
  const std::vector<Eigen::Vector3d> same(50, Eigen::Vector3d(2, 2, 2));
  const KdTree t2(same);
  EXPECT_EQ(t2.knn({0, 0, 0}, 12), brute_force_knn(same, {0, 0, 0}, 12));
  const std::vector<Eigen::Vector3d> none;
  const KdTree t3(none);
  EXPECT_TRUE(t3.knn({0, 0, 0}, 3).empty());
}

// ---------------------------------------------------------------------------
// Deviation

TEST(Deviation, SelfComparisonIsZero) {
  std::mt19937_64 rng(8);
  PointCloud c;
  c.points = random_points(rng, 3000, 40.0);
  const DeviationReport r = cloud_deviation(c, c, {});
  for (const auto& p : r.points) {
    EXPECT_NE(p.flag, DeviationFlag::excluded);
    EXPECT_NEAR(p.signed_mm, 0.0, 1e-9);
  }
  EXPECT_EQ(r.summary.excluded, 0u);
  EXPECT_LT(r.summary.max_abs_mm, 1e-9);
}

TEST(Deviation, PlanarOffset) {
  const PointCloud ref = grid_plane(101, 0.5);
  const PointCloud test = grid_plane(101, 0.5, [](double, double) { return 0.05; });
  const DeviationReport r = cloud_deviation(ref, test, {});
  for (const auto& p : r.points) {
    ASSERT_EQ(p.flag, DeviationFlag::ok);
    EXPECT_NEAR(p.signed_mm, 0.05, 1e-6);
    EXPECT_EQ(p.neighbor_count, 12u);
  }
  const PointCloud below = grid_plane(101, 0.5, [](double, double) { return -0.05; });
  EXPECT_NEAR(cloud_deviation(ref, below, {}).summary.mean_mm, -0.05, 1e-6);
}

TEST(Deviation, SignFollowsTheViewpoint) {
  const PointCloud ref = grid_plane(41, 0.5);
  const PointCloud test = grid_plane(41, 0.5, [](double, double) { return 0.05; });
  DeviationOptions opt;
  opt.viewpoint = Eigen::Vector3d(0, 0, -1000);
  EXPECT_NEAR(cloud_deviation(ref, test, {}, opt).summary.mean_mm, -0.05, 1e-6);
}

TEST(Deviation, GaussianBump) {
  const double height = 0.4, sigma = 5.0;
  const auto bump = [&](double x, double y) {
    return height * std::exp(-((x - 3.0) * (x - 3.0) + (y + 2.0) * (y + 2.0)) / (2.0 * sigma * sigma));
  };
  const PointCloud ref = grid_plane(161, 0.5);
  const PointCloud test = grid_plane(161, 0.5, bump);
  const DeviationReport r = cloud_deviation(ref, test, {});
  EXPECT_NEAR(r.summary.max_abs_mm, height, 0.01);
  double peak = -1.0;
  Eigen::Vector3d at;
  for (const auto& p : r.points) {
    ASSERT_EQ(p.flag, DeviationFlag::ok);
    if (p.signed_mm > peak) {
      peak = p.signed_mm;
      at = p.position;
    }
    const double d = std::hypot(p.position.x() - 3.0, p.position.y() + 2.0);
    if (d > 4.0 * sigma) {
      EXPECT_LT(std::abs(p.signed_mm), 0.01);
    }
    // Analytic oracle: a point on the bump over a flat reference deviates by its height.
    EXPECT_NEAR(p.signed_mm, bump(p.position.x(), p.position.y()), 0.01);
  }
  EXPECT_NEAR(peak, height, 0.01);
  EXPECT_LT(std::hypot(at.x() - 3.0, at.y() + 2.0), 1.0);
}

TEST(Deviation, IndexedEqualsBruteForce) {
  std::mt19937_64 rng(21);
  PointCloud ref, test;
  ref.points = random_points(rng, 10000, 30.0);
  for (auto& p : ref.points) p.z() = 0.02 * p.x() + 0.3 * std::sin(p.y() / 7.0) + 0.1 * p.z() / 30.0;
  test.points = random_points(rng, 4000, 32.0);
  for (auto& p : test.points) p.z() = 0.02 * p.x() + 0.3 * std::sin(p.y() / 7.0) + 0.05;
  const RigidTransform T{Eigen::AngleAxisd(0.01, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix(),
                         {0.1, -0.2, 0.05}};
  DeviationOptions fast, slow;
  fast.threads = 4;
  slow.use_index = false;
  slow.max_dist_mm = fast.max_dist_mm = 1.5;
  const DeviationReport a = cloud_deviation(ref, test, T, fast);
  const DeviationReport b = cloud_deviation(ref, test, T, slow);
  ASSERT_EQ(a.points.size(), b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_EQ(a.points[i].flag, b.points[i].flag);
    EXPECT_EQ(a.points[i].neighbor_count, b.points[i].neighbor_count);
    EXPECT_EQ(a.points[i].position, b.points[i].position);
    if (a.points[i].flag != DeviationFlag::excluded) {
      EXPECT_EQ(a.points[i].signed_mm, b.points[i].signed_mm);
    }
  }
  EXPECT_EQ(deviation_to_csv(a), deviation_to_csv(b));
  EXPECT_GT(a.summary.excluded, 0u);
}

TEST(Deviation, ExclusionAndCollinearFallback) {
  PointCloud line;
  for (int i = 0; i < 30; ++i) line.points.emplace_back(i, 0, 0);
  PointCloud test;
  test.points = {{5.2, 0, 3}, {5, 0, 30}};
  const DeviationReport r = cloud_deviation(line, test, {});
  EXPECT_EQ(r.points[0].flag, DeviationFlag::point_to_point);
  EXPECT_NEAR(r.points[0].signed_mm, std::hypot(0.2, 3.0), 1e-12);
  EXPECT_EQ(r.points[1].flag, DeviationFlag::excluded);
  EXPECT_TRUE(std::isnan(r.points[1].signed_mm));
  EXPECT_EQ(r.summary.excluded, 1u);
  EXPECT_EQ(r.summary.point_to_point, 1u);
  EXPECT_EQ(r.summary.count, 1u);
  const std::string csv = deviation_to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kDeviationHeader);
  EXPECT_NE(csv.find("\n1,5,0,30,,12,excluded\n"), std::string::npos);
}

TEST(Deviation, SummaryIsRecomputable) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 0.03);
  const PointCloud ref = grid_plane(81, 0.5);
  PointCloud test = grid_plane(81, 0.5);
  for (auto& p : test.points) p.z() += noise(rng);
  test.points.emplace_back(0, 0, 50);
  const DeviationReport r = cloud_deviation(ref, test, {});
  double sum = 0.0, ss = 0.0, mx = 0.0;
  std::size_t n = 0, hi = 0, excl = 0;
  std::vector<double> mags;
  for (const auto& p : r.points) {
    if (p.flag == DeviationFlag::excluded) {
      ++excl;
      continue;
    }
    ++n;
    sum += p.signed_mm;
    ss += p.signed_mm * p.signed_mm;
    mx = std::max(mx, std::abs(p.signed_mm));
    if (std::abs(p.signed_mm) > r.summary.highlight_mm) ++hi;
    mags.push_back(std::abs(p.signed_mm));
  }
  std::sort(mags.begin(), mags.end());
  const double p95 = mags[static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
  EXPECT_EQ(r.summary.count, n);
  EXPECT_EQ(r.summary.excluded, excl);
  EXPECT_EQ(excl, 1u);
  EXPECT_EQ(r.summary.highlighted, hi);
  EXPECT_NEAR(r.summary.mean_mm, sum / static_cast<double>(n), 1e-12);
  EXPECT_NEAR(r.summary.rms_mm, std::sqrt(ss / static_cast<double>(n)), 1e-12);
  EXPECT_NEAR(r.summary.max_abs_mm, mx, 1e-12);
  EXPECT_NEAR(r.summary.p95_abs_mm, p95, 1e-12);
  EXPECT_NEAR(r.summary.rms_mm, 0.03, 0.003);
  const auto j = summary_to_json(r.summary);
  EXPECT_EQ(j.at("excluded").get<std::size_t>(), 1u);
  EXPECT_DOUBLE_EQ(j.at("p95_abs_mm").get<double>(), r.summary.p95_abs_mm);
}

TEST(Deviation, Preconditions) {
  const PointCloud ok = grid_plane(5, 1.0);
  EXPECT_THROW(cloud_deviation(PointCloud{}, ok, {}), ConfigError);
  EXPECT_THROW(cloud_deviation(ok, PointCloud{}, {}), ConfigError);
  RigidTransform bad;
  bad.R(0, 0) = 2.0;
  EXPECT_THROW(cloud_deviation(ok, ok, bad), ConfigError);
  DeviationOptions opt;
  opt.max_dist_mm = 0.0;
  opt.neighbors = 2;
  try {
    cloud_deviation(ok, ok, {}, opt);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.issues().size(), 2u);
  }
}
