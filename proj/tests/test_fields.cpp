#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "dic3d/fields.hpp"

using namespace dic3d;

namespace {

using DisplacementFn = std::function<Eigen::Vector3d(double x, double y)>;

/// nx x ny lattice at `pitch` mm on a plane tilted 12.5 degrees about cam0's
/// y axis, 900 mm away; displacement given in surface coordinates.
Field3D plane_field(int nx, int ny, double pitch, const DisplacementFn& d, int frame = 0, double fps = 2.0) {
  const Eigen::Matrix3d R = Eigen::AngleAxisd(12.5 * M_PI / 180.0, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const Eigen::Vector3d e1 = R * Eigen::Vector3d::UnitX();
  const Eigen::Vector3d n = R * -Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d e2 = n.cross(e1);
  const Eigen::Vector3d origin(0.0, 0.0, 900.0);
  Field3D f;
  f.nx = nx;
  f.ny = ny;
  f.frame = frame;
  f.time_s = frame / fps;
  std::vector<Eigen::Vector3d> pts;
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const double x = pitch * (ix - 0.5 * (nx - 1));
      const double y = -pitch * (iy - 0.5 * (ny - 1));
      Point3D p;
      p.ix = ix;
      p.iy = iy;
      p.position = origin + x * e1 + y * e2;
      p.displacement = d(x, y);
      p.valid = true;
      f.points.push_back(p);
      pts.push_back(p.position);
    }
  f.surface = fit_surface_frame(pts, CameraModel{});
  return f;
}

Field3D uniform_eyy(double eyy_ue, int frame = 0) {
  return plane_field(20, 20, 5.0, [&](double, double y) { return Eigen::Vector3d(0.0, eyy_ue * 1e-6 * y, 0.0); },
                     frame);
}

GaugeSpec rect_gauge(const std::string& id, double x0, double y0, double x1, double y1,
                     GaugeComponent c = GaugeComponent::eyy) {
  GaugeSpec g;
  g.id = id;
  g.region = RectRegion{x0, y0, x1, y1};
  g.component = c;
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Strain

TEST(StrainField, SurfaceCoordinatesMatchConstruction) {
  const auto f = plane_field(9, 7, 5.0, [](double, double) { return Eigen::Vector3d::Zero(); });
  const auto& p = f.at(8, 0);
  EXPECT_NEAR(f.surface_xy(p).x(), 20.0, 1e-9);
  EXPECT_NEAR(f.surface_xy(p).y(), 15.0, 1e-9);
}

TEST(StrainField, UniformTranslationIsStrainFree) {
  const auto f = plane_field(15, 15, 6.0, [](double, double) { return Eigen::Vector3d(0.3, -0.2, 0.05); });
  const auto g = strain_field(f);
  for (const auto& p : g.points) {
    ASSERT_TRUE(p.valid);
    for (const auto* t : {&p.engineering, &p.green}) {
      EXPECT_NEAR(t->exx, 0.0, 1.0);
      EXPECT_NEAR(t->eyy, 0.0, 1.0);
      EXPECT_NEAR(t->exy, 0.0, 1.0);
    }
  }
}

TEST(StrainField, LinearStretchIsExact) {
  const auto f = plane_field(15, 12, 6.0, [](double, double y) { return Eigen::Vector3d(0.0, 0.001 * y, 0.0); });
  const auto g = strain_field(f);
  for (const auto& p : g.points) {
    ASSERT_TRUE(p.valid);
    EXPECT_NEAR(p.engineering.eyy, 1000.0, 1.0);
    EXPECT_NEAR(p.engineering.exx, 0.0, 1.0);
    EXPECT_NEAR(p.engineering.exy, 0.0, 1.0);
    EXPECT_NEAR(p.green.eyy, 1000.5, 1.0);
  }
}

TEST(StrainField, RigidRotationGreenLagrangeIsZero) {
  const double th = 0.01, c = std::cos(th), s = std::sin(th);
  const auto f = plane_field(15, 15, 6.0, [&](double x, double y) {
    return Eigen::Vector3d((c - 1) * x - s * y, s * x + (c - 1) * y, 0.0);
  });
  const auto g = strain_field(f);
  for (const auto& p : g.points) {
    ASSERT_TRUE(p.valid);
    EXPECT_LT(std::abs(p.green.exx), 1.0);
    EXPECT_LT(std::abs(p.green.eyy), 1.0);
    EXPECT_LT(std::abs(p.green.exy), 1.0);
    EXPECT_NEAR(p.engineering.exx, -50.0, 1.0);
    EXPECT_NEAR(p.engineering.eyy, -50.0, 1.0);
  }
}

TEST(StrainField, RigidTiltAndTranslationGreenLagrangeIsZero) {
  // Rotation about the in-plane x axis by 0.02 rad plus a translation.
  const double th = 0.02, c = std::cos(th), s = std::sin(th);
  const auto f = plane_field(15, 15, 6.0, [&](double, double y) {
    return Eigen::Vector3d(0.1, (c - 1) * y + 0.05, s * y - 0.02);
  });
  for (const auto& p : strain_field(f).points) {
    ASSERT_TRUE(p.valid);
    EXPECT_LT(std::abs(p.green.exx), 1.0);
    EXPECT_LT(std::abs(p.green.eyy), 1.0);
    EXPECT_LT(std::abs(p.green.exy), 1.0);
  }
}

TEST(StrainField, ShearIsHalfTheAngleChange) {
  const auto f = plane_field(11, 11, 5.0, [](double x, double y) { return Eigen::Vector3d(4e-4 * y, 2e-4 * x, 0.0); });
  for (const auto& p : strain_field(f).points) EXPECT_NEAR(p.engineering.exy, 300.0, 1e-6);
}

TEST(StrainField, WindowLargerThanLatticeRejected) {
  const auto f = plane_field(4, 10, 5.0, [](double, double) { return Eigen::Vector3d::Zero(); });
  EXPECT_THROW(strain_field(f, 5), ConfigError);
  EXPECT_THROW(strain_field(f, 4), ConfigError);
  EXPECT_NO_THROW(strain_field(f, 3));
}

TEST(StrainField, CoverageRuleIsSixtyPercent) {
  auto f = plane_field(5, 5, 5.0, [](double, double y) { return Eigen::Vector3d(0.0, 2e-4 * y, 0.0); });
  for (int i = 0; i < 10; ++i) f.points[static_cast<std::size_t>(i * 2 + (i >= 5))].valid = false;
  auto g = strain_field(f);
  EXPECT_TRUE(g.at(2, 2).valid);  // 15 of 25 valid
  EXPECT_NEAR(g.at(2, 2).engineering.eyy, 200.0, 1e-6);
  f.points[24].valid = false;
  g = strain_field(f);
  EXPECT_FALSE(g.at(2, 2).valid);  // 14 of 25
}

TEST(StrainField, TwoDimensionalFieldUsesPixels) {
  DisplacementField2D d;
  d.lattice = {20, 20, 6, 12, 12};
  for (int iy = 0; iy < 12; ++iy)
    for (int ix = 0; ix < 12; ++ix) {
      SubsetResult r;
      r.x = d.lattice.x(ix);
      r.y = d.lattice.y(iy);
      r.warp.u = 5e-4 * r.x;
      r.warp.v = -2e-4 * r.y + 0.3;
      r.valid = true;
      d.points.push_back(r);
    }
  const auto g = strain_field(d);
  EXPECT_EQ(g.coordinate_units, "px");
  for (const auto& p : g.points) {
    EXPECT_NEAR(p.engineering.exx, 500.0, 1e-6);
    EXPECT_NEAR(p.engineering.eyy, -200.0, 1e-6);
    EXPECT_FALSE(p.w_valid);
  }
}

// ---------------------------------------------------------------------------
// Virtual gauges

TEST(VirtualGauge, UniformFieldAnyRegion) {
  const auto g = strain_field(uniform_eyy(200.0));
  for (const auto& gauge : {rect_gauge("a", 0, 0, 19, 19), rect_gauge("b", 3, 4, 7, 15), rect_gauge("c", 18, 18, 40, 40)}) {
    const auto r = virtual_gauge(g, gauge);
    EXPECT_NEAR(r.value, 200.0 + 0.02, 1e-6);  // green-lagrange adds eyy^2 / 2
    EXPECT_EQ(r.coverage, 1.0);
    EXPECT_TRUE(r.reliable);
  }
  auto eng = rect_gauge("e", 0, 0, 19, 19);
  eng.formulation = StrainFormulation::engineering;
  EXPECT_NEAR(virtual_gauge(g, eng).value, 200.0, 1e-6);
}

TEST(VirtualGauge, MaskedBandLowersCoverage) {
  auto f = uniform_eyy(200.0);
  // Invalid band of 3 columns across a 10-column gauge.
  auto g = strain_field(f);
  auto grid = g;
  for (auto& p : grid.points)
    if (p.ix >= 6 && p.ix <= 8) p.valid = false;
  auto gauge = rect_gauge("band", 2, 5, 11, 14);
  gauge.formulation = StrainFormulation::engineering;
  const auto r = virtual_gauge(grid, gauge);
  EXPECT_NEAR(r.coverage, 0.7, 1e-12);
  EXPECT_NEAR(r.value, 200.0, 1e-6);
  EXPECT_TRUE(r.reliable);
  gauge.min_coverage = 0.8;
  EXPECT_FALSE(virtual_gauge(grid, gauge).reliable);
}

TEST(VirtualGauge, RegionInsideHoleIsError) {
  auto grid = strain_field(uniform_eyy(200.0));
  for (auto& p : grid.points)
    if (p.ix >= 5 && p.ix <= 10 && p.iy >= 5 && p.iy <= 10) p.valid = false;
  EXPECT_THROW(virtual_gauge(grid, rect_gauge("hole", 6, 6, 9, 9)), NumericalError);
  EXPECT_THROW(virtual_gauge(grid, rect_gauge("outside", 30, 30, 40, 40)), ConfigError);
}

TEST(VirtualGauge, ConstantFieldProperty) {
  auto grid = strain_field(uniform_eyy(-150.0));
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 19.0), pick(0.0, 1.0);
  for (auto& p : grid.points)
    if (pick(rng) < 0.5) p.valid = false;
  int checked = 0;
  for (int k = 0; k < 200; ++k) {
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    GaugeSpec g;
    g.id = "r";
    if (k % 2) g.region = RectRegion{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
    else g.region = CircleRegion{a, c, 1.0 + 5.0 * pick(rng)};
    try {
      EXPECT_NEAR(virtual_gauge(grid, g).value, -150.0 + 0.01125, 1e-6);
      ++checked;
    } catch (const Error&) {
    }
  }
  EXPECT_GT(checked, 150);
}

TEST(VirtualGauge, WorldCoordinatesCircleAndMedian) {
  const auto f = plane_field(21, 21, 5.0, [](double x, double y) {
    return Eigen::Vector3d(0.0, 3e-4 * y, 0.001 * (x > 0 ? 5.0 : 1.0));
  });
  const auto grid = strain_field(f);
  GaugeSpec g;
  g.id = "w";
  g.coordinates = GaugeCoordinates::world;
  g.region = CircleRegion{0.0, 0.0, 7.5};  // mm: 5 columns each side of x=0 within reach
  g.component = GaugeComponent::eyy;
  g.formulation = StrainFormulation::engineering;
  auto r = virtual_gauge(grid, g);
  EXPECT_NEAR(r.value, 300.0, 1e-6);
  EXPECT_EQ(r.total_points, 9u);  // lattice points within 1.5 pitches
  g.component = GaugeComponent::w;
  g.region = RectRegion{-12.0, -1.0, 22.0, 1.0};  // x = -10..20: three at 1 um, four at 5 um
  r = virtual_gauge(grid, g);
  EXPECT_EQ(r.total_points, 7u);
  g.aggregate = GaugeAggregate::median;
  EXPECT_NEAR(virtual_gauge(grid, g).value, 5.0, 1e-9);
}

TEST(GaugeJson, ParsesAndReportsAllProblems) {
  const auto ok = gauges_from_json(nlohmann::json::parse(R"([
    {"id":"g1","shape":"rect","rect":[0,0,4,4],"component":"eyy"},
    {"id":"g2","shape":"circle","center":[10,5],"radius":3,"coordinates":"world","component":"W","aggregate":"median"}])"));
  ASSERT_EQ(ok.size(), 2u);
  EXPECT_EQ(ok[1].component, GaugeComponent::w);
  EXPECT_EQ(ok[1].coordinates, GaugeCoordinates::world);
  try {
    gauges_from_json(nlohmann::json::parse(R"([
      {"id":"a","shape":"hexagon"},
      {"shape":"rect","rect":[0,0,1]},
      {"id":"a","rect":[0,0,1,1],"component":"ezz","min_coverage":2}])"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_GE(e.issues().size(), 6u) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Time histories

TEST(TimeHistory, SingleFrameSingleRecord) {
  const auto h = time_history(std::vector<Field3D>{uniform_eyy(100.0)}, rect_gauge("g", 0, 0, 19, 19));
  ASSERT_EQ(h.records.size(), 1u);
  EXPECT_EQ(h.records[0].t_s, 0.0);
}

TEST(TimeHistory, StaticSequenceStaysAtZero) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> noise(0.0, 0.0003);
  std::vector<Field3D> fields;
  for (int k = 0; k < 10; ++k)
    fields.push_back(plane_field(20, 20, 6.0, [&](double, double) {
      return Eigen::Vector3d(noise(rng), noise(rng), noise(rng));
    }, k));
  const auto h = time_history(fields, rect_gauge("g", 2, 2, 17, 17));
  ASSERT_EQ(h.records.size(), fields.size());
  for (std::size_t i = 0; i < h.records.size(); ++i) {
    EXPECT_LT(std::abs(h.records[i].value), 10.0);
    if (i) {
      EXPECT_GT(h.records[i].t_s, h.records[i - 1].t_s);
    }
  }
}

TEST(TimeHistory, DropRampThenPlateau) {
  // 0 -> -200 ue over 60 s at 2 fps, then held 60 s, with measurement noise.
  std::mt19937_64 rng(2);
  std::normal_distribution<double> noise(0.0, 0.0003);
  std::vector<StrainGrid> grids;
  for (int k = 0; k < 240; ++k) {
    const double t = k / 2.0;
    const double e = -200e-6 * std::min(1.0, t / 60.0);
    grids.push_back(strain_field(plane_field(20, 20, 6.0, [&](double, double y) {
      return Eigen::Vector3d(noise(rng), e * y + noise(rng), noise(rng));
    }, k)));
  }
  auto gauge = rect_gauge("web", 3, 3, 16, 16);
  gauge.formulation = StrainFormulation::engineering;
  const auto h = time_history(grids, gauge);
  ASSERT_EQ(h.records.size(), 240u);
  EXPECT_NEAR(h.records[60].value, -100.0, 10.0);
  const auto p = detect_plateau(h);
  EXPECT_NEAR(p.mean, -200.0, 10.0);
  EXPECT_LT(std::abs(p.slope_per_s), 0.2);
  EXPECT_EQ(p.count, 60u);
  GaugeHistory ramp = h;
  ramp.records.resize(100);
  EXPECT_THROW(detect_plateau(ramp), NumericalError);
}

TEST(TimeHistory, InvalidFramesAreFlaggedAndAllInvalidIsError) {
  std::vector<StrainGrid> grids;
  for (int k = 0; k < 3; ++k) grids.push_back(strain_field(uniform_eyy(50.0, k)));
  for (auto& p : grids[1].points) p.valid = false;
  const auto gauge = rect_gauge("g", 0, 0, 19, 19);
  const auto h = time_history(grids, gauge);
  EXPECT_FALSE(h.records[1].reliable);
  EXPECT_FALSE(std::isfinite(h.records[1].value));
  EXPECT_TRUE(h.records[2].reliable);
  const auto csv = histories_to_csv({h});
  EXPECT_NE(csv.find("g,1,0.5,,0,0\n"), std::string::npos) << csv;
  for (auto& g : grids)
    for (auto& p : g.points) p.valid = false;
  EXPECT_THROW(time_history(grids, gauge), NumericalError);
}

TEST(TimeHistory, TimesMustIncrease) {
  std::vector<StrainGrid> grids{strain_field(uniform_eyy(1.0, 3)), strain_field(uniform_eyy(1.0, 2))};
  EXPECT_THROW(time_history(grids, rect_gauge("g", 0, 0, 19, 19)), ConfigError);
}

TEST(TimeHistory, CsvRoundTrip) {
  std::vector<StrainGrid> grids;
  for (int k = 0; k < 4; ++k) grids.push_back(strain_field(uniform_eyy(-20.0 * k, k)));
  const auto a = time_history(grids, rect_gauge("A", 0, 0, 9, 9));
  const auto b = time_history(grids, rect_gauge("B", 10, 10, 19, 19));
  const auto back = histories_from_csv(detail::parse_csv(histories_to_csv({a, b})));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].gauge_id, "B");
  ASSERT_EQ(back[0].records.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back[0].records[i].value, a.records[i].value);
}

// ---------------------------------------------------------------------------
// Out-of-plane profiles

TEST(Profile, FlatFieldHasZeroAmplitude) {
  const auto f = plane_field(20, 20, 6.0, [](double, double) { return Eigen::Vector3d(0.01, 0.0, 0.02); });
  const auto p = out_of_plane_profile(f, {0, 0}, {19, 19}, 50);
  EXPECT_NEAR(p.amplitude_um, 0.0, 1e-9);
  EXPECT_EQ(p.valid_count, 50u);
  EXPECT_NEAR(p.samples.back().s_mm, 6.0 * 19 * std::sqrt(2.0), 1e-9);
}

TEST(Profile, ParabolicBowAlongDiagonal) {
  const double half_diag = 6.0 * 10.0 * std::sqrt(2.0);
  const auto f = plane_field(21, 21, 6.0, [&](double x, double y) {
    return Eigen::Vector3d(0.0, 0.0, 0.050 * (1.0 - (x * x + y * y) / (half_diag * half_diag)));
  });
  const auto p = out_of_plane_profile(f, {0, 0}, {20, 20}, 41);
  // Stations on lattice nodes reproduce the parabola exactly.
  EXPECT_NEAR(p.amplitude_um, 50.0, 1e-9);
  EXPECT_NEAR(p.samples[20].w_um, 50.0, 1e-9);
  EXPECT_NEAR(p.samples[0].w_um, 0.0, 1e-9);
}

TEST(Profile, LowConfidenceAgainstNoiseFloor) {
  const double half_diag = 6.0 * 9.5 * std::sqrt(2.0);
  auto bow = [&](double amp_mm) {
    return plane_field(20, 20, 6.0, [=](double x, double y) {
      return Eigen::Vector3d(0.0, 0.0, amp_mm * (1.0 - (x * x + y * y) / (half_diag * half_diag)));
    });
  };
  const auto small = out_of_plane_profile(bow(0.004), {0, 0}, {19, 19}, 39, 1.2);
  EXPECT_TRUE(small.low_confidence);
  EXPECT_NEAR(small.confidence_threshold_um, 2.0 * 1.2 * noise_range_factor(39), 1e-12);
  const auto big = out_of_plane_profile(bow(0.050), {0, 0}, {19, 19}, 39, 1.2);
  EXPECT_FALSE(big.low_confidence);
  EXPECT_FALSE(out_of_plane_profile(bow(0.004), {0, 0}, {19, 19}, 39).low_confidence);
}

TEST(Profile, NoiseRangeFactorMatchesSimulation) {
  // Mean range of n unit Gaussians, for the n used in practice.
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  for (int n : {30, 60, 120}) {
    double sum = 0.0;
    for (int t = 0; t < 4000; ++t) {
      double lo = 1e9, hi = -1e9;
      for (int i = 0; i < n; ++i) {
        const double v = g(rng);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      sum += hi - lo;
    }
    EXPECT_NEAR(noise_range_factor(n), sum / 4000, 0.1) << n;
  }
}

TEST(Profile, Errors) {
  auto f = plane_field(10, 10, 6.0, [](double, double) { return Eigen::Vector3d::Zero(); });
  EXPECT_THROW(out_of_plane_profile(f, {0, 0}, {10, 9}, 20), ConfigError);
  EXPECT_THROW(out_of_plane_profile(f, {-0.5, 0}, {9, 9}, 20), ConfigError);
  EXPECT_THROW(out_of_plane_profile(f, {0, 0}, {9, 9}, 1), ConfigError);
  for (auto& p : f.points) p.valid = false;
  EXPECT_THROW(out_of_plane_profile(f, {0, 0}, {9, 9}, 20), NumericalError);
}

TEST(Profile, StationsOverHolesAreInvalid) {
  auto f = plane_field(10, 10, 6.0, [](double, double) { return Eigen::Vector3d(0.0, 0.0, 0.01); });
  f.points[f.index(4, 4)].valid = false;
  const auto p = out_of_plane_profile(f, {0, 0}, {9, 9}, 10);
  EXPECT_FALSE(p.samples[4].valid);
  EXPECT_TRUE(p.samples[3].valid);  // (4, 4) carries zero weight at station 3
  EXPECT_EQ(p.valid_count, 9u);
  const auto csv = profile_to_csv(p);
  EXPECT_NE(csv.find("\n4,"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Dead load

namespace {
BearingSpec worked_bearing() {
  BearingSpec b;
  b.E = 29000.0;
  b.area = 17.2414;
  return b;
}
}  // namespace

TEST(DeadLoad, WorkedCases) {
  const auto b = worked_bearing();
  EXPECT_EQ(expected_strain(0.0, b), 0.0);
  EXPECT_EQ(expected_strain(100.0, b), 100.0 / (17.2414 * 29000.0) * 1e6);
  EXPECT_EQ(detail::fmt_fixed(expected_strain(100.0, b), 1), "200.0");
  EXPECT_EQ(detail::fmt_fixed(expected_strain(8.0, b), 1), "16.0");
}

TEST(DeadLoad, BackCalculation) {
  auto b = worked_bearing();
  // A = 17.2414 in2 closes the identity to six significant digits.
  EXPECT_EQ(detail::fmt_fixed(back_calculate_reaction(200.0, b).force, 3), "100.000");
  EXPECT_DOUBLE_EQ(back_calculate_reaction(200.0, b).force, 200.0e-6 * 29000.0 * 17.2414);
  EXPECT_FALSE(back_calculate_reaction(200.0, b).share_ratio.has_value());
  EXPECT_THROW(dead_load_share(200.0, b), ConfigError);
  b.tributary_dead_load = 100.0;
  const auto r0 = back_calculate_reaction(0.0, b);
  EXPECT_EQ(r0.force, 0.0);
  EXPECT_EQ(*r0.share_ratio, 0.0);
  EXPECT_EQ(detail::fmt_fixed(dead_load_share(200.0, b), 3), "1.000");
  EXPECT_EQ(dead_load_share(-200.0, b), dead_load_share(200.0, b));
  EXPECT_LT(back_calculate_reaction(-200.0, b).force, 0.0);
}

TEST(DeadLoad, InverseRoundTripAllUnitSystems) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> load(-500.0, 500.0), area(1.0, 50.0);
  for (int k = 0; k < 1000; ++k) {
    BearingSpec b;
    b.force_unit = k % 2 ? ForceUnit::kN : ForceUnit::kip;
    b.E_unit = (k / 2) % 2 ? StressUnit::MPa : StressUnit::ksi;
    b.area_unit = (k / 4) % 2 ? AreaUnit::mm2 : AreaUnit::in2;
    b.E = b.E_unit == StressUnit::MPa ? 200000.0 : 29000.0;
    b.area = area(rng) * (b.area_unit == AreaUnit::mm2 ? 645.16 : 1.0);
    const double P = load(rng);
    const double back = back_calculate_reaction(expected_strain(P, b), b).force;
    EXPECT_LE(std::abs(back - P), 1e-9 * std::abs(P));
  }
}

TEST(DeadLoad, UnitConversionsAgree) {
  BearingSpec si;
  si.force_unit = ForceUnit::kN;
  si.E_unit = StressUnit::MPa;
  si.area_unit = AreaUnit::mm2;
  si.E = 29000.0 * units::kMpaPerKsi;
  si.area = 17.2414 * 645.16;
  const double kn = 100.0 * 4.4482216152605;
  EXPECT_NEAR(expected_strain(kn, si), expected_strain(100.0, worked_bearing()), 1e-12 * 200.0);
}

TEST(DeadLoad, InvalidSpecRejected) {
  BearingSpec b;
  b.E = 0.0;
  b.area = -1.0;
  try {
    expected_strain(1.0, b);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.issues().size(), 2u);
  }
}
