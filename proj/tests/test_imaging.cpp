#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <random>

#include "dic3d/correlation.hpp"
#include "dic3d/imaging.hpp"

namespace fs = std::filesystem;
using namespace dic3d;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "dic3d_test_imaging";
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::string& header, const std::vector<unsigned char>& payload) {
  std::ofstream out(p, std::ios::binary);
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

GrayImage from_function(int w, int h, auto&& f) {
  std::vector<double> d(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d[static_cast<std::size_t>(y) * w + x] = f(x, y);
  return GrayImage(w, h, std::move(d));
}

// Cubic B-spline basis centred at 0.
double beta3(double x) {
  x = std::abs(x);
  if (x < 1.0) return 2.0 / 3.0 - x * x + 0.5 * x * x * x;
  if (x < 2.0) return (2.0 - x) * (2.0 - x) * (2.0 - x) / 6.0;
  return 0.0;
}

// Independent oracle: interpolating spline from a dense solve on a signal
// padded far beyond the border, so boundary handling plays no role.
double dense_spline_oracle(auto&& signal, double x, int pad = 60, int n = 64) {
  const int m = n + 2 * pad;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd s(m);
  for (int i = 0; i < m; ++i) {
    a(i, i) = 4.0 / 6.0;
    if (i > 0) a(i, i - 1) = 1.0 / 6.0;
    if (i + 1 < m) a(i, i + 1) = 1.0 / 6.0;
    s(i) = signal(i - pad);
  }
  const Eigen::VectorXd c = a.fullPivLu().solve(s);
  double v = 0.0;
  for (int i = 0; i < m; ++i) v += c(i) * beta3(x - (i - pad));
  return v;
}

}  // namespace

TEST(Pgm, Reads8BitAndNormalizes) {
  const auto p = temp_dir() / "tiny.pgm";
  write_bytes(p, "P5\n2 2\n255\n", {0, 128, 255, 64});
  const auto img = read_image(p.string());
  ASSERT_EQ(img.width(), 2);
  ASSERT_EQ(img.height(), 2);
  EXPECT_EQ(img(0, 0), 0.0);
  EXPECT_NEAR(img(1, 0), 0.50196, 1e-5);
  EXPECT_EQ(img(0, 1), 1.0);
  EXPECT_NEAR(img(1, 1), 0.25098, 1e-5);
}

TEST(Pgm, Reads16BitBigEndian) {
  const auto p = temp_dir() / "sixteen.pgm";
  write_bytes(p, "P5\n1 1\n65535\n", {0x80, 0x00});
  EXPECT_DOUBLE_EQ(read_image(p.string())(0, 0), 32768.0 / 65535.0);
  EXPECT_NEAR(read_image(p.string())(0, 0), 0.500008, 1e-6);
}

TEST(Pgm, ErrorsAreDistinct) {
  const auto dir = temp_dir();
  auto kind_of = [](const fs::path& p) {
    try {
      read_image(p.string());
    } catch (const PgmError& e) {
      return static_cast<int>(e.pgm_kind());
    }
    return -1;
  };
  write_bytes(dir / "trunc.pgm", "P5\n10 10\n255\n", std::vector<unsigned char>(50, 7));
  EXPECT_EQ(kind_of(dir / "trunc.pgm"), static_cast<int>(PgmErrorKind::truncated_payload));
  write_bytes(dir / "p2.pgm", "P2\n2 2\n255\n", {1, 2, 3, 4});
  EXPECT_EQ(kind_of(dir / "p2.pgm"), static_cast<int>(PgmErrorKind::malformed_header));
  write_bytes(dir / "badw.pgm", "P5\nx 2\n255\n", {1, 2, 3, 4});
  EXPECT_EQ(kind_of(dir / "badw.pgm"), static_cast<int>(PgmErrorKind::malformed_header));
  write_bytes(dir / "maxval.pgm", "P5\n2 2\n1000\n", std::vector<unsigned char>(8, 0));
  EXPECT_EQ(kind_of(dir / "maxval.pgm"), static_cast<int>(PgmErrorKind::unsupported_maxval));
  EXPECT_THROW(read_image((dir / "does_not_exist.pgm").string()), IoError);
}

TEST(Pgm, HeaderCommentsAreSkipped) {
  const auto p = temp_dir() / "comment.pgm";
  write_bytes(p, "P5\n# made by hand\n1 2\n255\n", {255, 0});
  const auto img = read_image(p.string());
  EXPECT_EQ(img.height(), 2);
  EXPECT_EQ(img(0, 0), 1.0);
}

TEST(Pgm, RoundTripWithinQuantization) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto img = from_function(64, 64, [&](int, int) { return u(rng); });
  const auto p = temp_dir() / "rt16.pgm";
  write_image(img, p.string(), 65535);
  const auto back = read_image(p.string());
  double worst = 0.0;
  for (std::size_t i = 0; i < img.pixels().size(); ++i)
    worst = std::max(worst, std::abs(img.pixels()[i] - back.pixels()[i]));
  EXPECT_LE(worst, 1.0 / 131070.0);

  write_image(img, p.string(), 255);
  const auto back8 = read_image(p.string());
  worst = 0.0;
  for (std::size_t i = 0; i < img.pixels().size(); ++i)
    worst = std::max(worst, std::abs(img.pixels()[i] - back8.pixels()[i]));
  EXPECT_LE(worst, 1.0 / 510.0);
}

TEST(Pgm, ConstantImageStaysConstant) {
  const GrayImage img(16, 8, 0.5);
  const auto p = temp_dir() / "const.pgm";
  write_image(img, p.string());
  const auto back = read_image(p.string());
  for (double v : back.pixels()) EXPECT_EQ(v, 32768.0 / 65535.0);
  EXPECT_LE(std::abs(back(0, 0) - 0.5), 1.0 / 131070.0);
}

TEST(Pgm, LargeImageKeepsDimensions) {
  const GrayImage img(2448, 2048, 0.25);
  const auto p = temp_dir() / "large.pgm";
  write_image(img, p.string());
  const auto back = read_image(p.string());
  EXPECT_EQ(back.width(), 2448);
  EXPECT_EQ(back.height(), 2048);
}

TEST(GrayImage, RejectsInvalidContent) {
  EXPECT_THROW(GrayImage(0, 4), ConfigError);
  EXPECT_THROW(GrayImage(2, 2, std::vector<double>{0.0, 0.1, 0.2}), ConfigError);
  EXPECT_THROW(GrayImage(1, 2, std::vector<double>{0.0, 1.5}), ConfigError);
  EXPECT_THROW(GrayImage(1, 1, std::vector<double>{std::nan("")}), ConfigError);
}

TEST(Speckle, DeterministicPerSeed) {
  SpeckleSpec spec;
  spec.rng_seed = 42;
  const auto a = synthesize_speckle(spec, 128, 96);
  const auto b = synthesize_speckle(spec, 128, 96);
  EXPECT_TRUE(a == b);
  spec.rng_seed = 43;
  EXPECT_FALSE(a == synthesize_speckle(spec, 128, 96));
}

TEST(Speckle, MeanBetweenLevels) {
  const SpeckleSpec spec;
  const auto img = synthesize_speckle(spec, 256, 256);
  double mean = 0.0;
  for (double v : img.pixels()) mean += v;
  mean /= static_cast<double>(img.pixels().size());
  EXPECT_GT(mean, spec.foreground());
  EXPECT_LT(mean, spec.background());
}

namespace {

double min_window_std(const GrayImage& img, int n) {
  // Summed-area tables over every n x n window.
  const int w = img.width(), h = img.height();
  const auto at = [&](int xx, int yy) { return static_cast<std::size_t>(yy) * (w + 1) + xx; };
  std::vector<double> s1((w + 1) * (h + 1), 0.0), s2((w + 1) * (h + 1), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = img(x, y);
      s1[at(x + 1, y + 1)] = v + s1[at(x, y + 1)] + s1[at(x + 1, y)] - s1[at(x, y)];
      s2[at(x + 1, y + 1)] = v * v + s2[at(x, y + 1)] + s2[at(x + 1, y)] - s2[at(x, y)];
    }
  double min_std = 1.0;
  for (int y = 0; y + n <= h; ++y)
    for (int x = 0; x + n <= w; ++x) {
      const auto box = [&](const std::vector<double>& s) {
        return s[at(x + n, y + n)] - s[at(x, y + n)] - s[at(x + n, y)] + s[at(x, y)];
      };
      const double m = box(s1) / (n * n);
      min_std = std::min(min_std, std::sqrt(std::max(0.0, box(s2) / (n * n) - m * m)));
    }
  return min_std;
}

}  // namespace

TEST(Speckle, EverySubsetIsCorrelatable) {
  const auto img = synthesize_speckle(SpeckleSpec{}, 512, 512);
  EXPECT_GT(min_window_std(img, 35), 0.05);
}

TEST(Speckle, EverySmallSubsetIsCorrelatable) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SpeckleSpec spec;
    spec.rng_seed = seed;
    const auto img = synthesize_speckle(spec, 512, 512);
    for (int n : {21, 27}) EXPECT_GT(min_window_std(img, n), 0.05) << "seed " << seed << " subset " << n;
  }
}

TEST(Speckle, RenderedTranslationMatchesResampling) {
  const SpeckleSpec spec;
  const auto img = synthesize_speckle(spec, 128, 128);
  EXPECT_EQ(render_speckle(spec, 128, 128, DeformationMap::identity()), img);
  const auto map = DeformationMap::translation(0.3, -0.45);
  const auto rendered = render_speckle(spec, 128, 128, map);
  const auto resampled = warp_image(img, map);
  double worst = 0.0;
  for (int y = 8; y < 120; ++y)
    for (int x = 8; x < 120; ++x) worst = std::max(worst, std::abs(rendered(x, y) - resampled(x, y)));
  EXPECT_LT(worst, 5e-3);
}

TEST(Speckle, IntegerTranslationIsExact) {
  const SpeckleSpec spec;
  const auto img = synthesize_speckle(spec, 96, 96);
  const auto moved = render_speckle(spec, 96, 96, DeformationMap::translation(3.0, -2.0));
  for (int y = 10; y < 86; ++y)
    for (int x = 10; x < 86; ++x) EXPECT_NEAR(moved(x, y), img(x - 3, y + 2), 1e-12);
}

TEST(Speckle, NearBlankPatternIsFlaggedDownstream) {
  SpeckleSpec spec;
  spec.density = 0.0001;
  const auto img = synthesize_speckle(spec, 128, 128);
  SubsetMatcher m(img, img, CorrelationConfig{});
  EXPECT_LT(m.subset_std(64, 64), CorrelationConfig{}.min_subset_std);
  EXPECT_EQ(m.refine(64, 64, {}).status, SubsetStatus::flat);
}

TEST(Speckle, RejectsBadSpecAndArea) {
  SpeckleSpec spec;
  spec.contrast = 0.0;
  EXPECT_THROW(synthesize_speckle(spec, 8, 8), ConfigError);
  EXPECT_THROW(synthesize_speckle(SpeckleSpec{}, 0, 8), ConfigError);
}

TEST(Interpolate, ExactAtNodes) {
  const auto img = synthesize_speckle(SpeckleSpec{}, 64, 64);
  const SplineImage s(img);
  EXPECT_EQ(s.value(10, 20), img(10, 20));
  // The spline itself (not only the node shortcut) passes through the samples.
  EXPECT_NEAR(s.value(10.0 + 1e-12, 20.0), img(10, 20), 1e-10);
}

TEST(Interpolate, ReproducesLinearRamp) {
  const int w = 64;
  const auto img = from_function(w, 32, [&](int x, int) { return static_cast<double>(x) / w; });
  EXPECT_NEAR(interpolate(img, 10.5, 12.0), 10.5 / w, 1e-12);
  // Degree-1 reproduction holds across the whole interior.
  const auto plane = from_function(w, w, [&](int x, int y) { return 0.1 + 0.004 * x + 0.009 * y; });
  const SplineImage s(plane);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(2.0, w - 3.0);
  for (int i = 0; i < 2000; ++i) {
    const double x = u(rng), y = u(rng);
    ASSERT_NEAR(s.value(x, y), 0.1 + 0.004 * x + 0.009 * y, 1e-12) << x << "," << y;
  }
}

TEST(Interpolate, QuadraticRampMatchesDenseOracle) {
  const int w = 64;
  auto quad = [&](double x) { return (x / w) * (x / w); };
  const double oracle = dense_spline_oracle([&](int k) { return quad(k); }, 10.5);
  EXPECT_NEAR(oracle, quad(10.5), 1e-12);  // interpolating cubic splines reproduce quadratics
  const auto img = from_function(w, 32, [&](int x, int) { return quad(x); });
  EXPECT_NEAR(interpolate(img, 10.5, 16.0), oracle, 1e-9);
  EXPECT_NEAR(interpolate(img, 40.25, 16.0), quad(40.25), 1e-9);
}

TEST(Interpolate, RejectsCoordinatesInMargin) {
  const GrayImage img(32, 32, 0.5);
  EXPECT_THROW(interpolate(img, 1.5, 10.0), DomainError);
  EXPECT_THROW(interpolate(img, 10.0, 29.5), DomainError);
  EXPECT_NO_THROW(interpolate(img, 2.0, 29.0));
}

TEST(Interpolate, SmoothBetweenSamples) {
  // C2 continuity: second differences across a node agree from both sides.
  const auto img = synthesize_speckle(SpeckleSpec{}, 64, 64);
  const SplineImage s(img);
  const double h = 1e-4;
  for (int x = 10; x < 20; ++x) {
    const double left = (s.value(x - 2 * h, 30.3) - 2 * s.value(x - h, 30.3) + s.value(x, 30.3)) / (h * h);
    const double right = (s.value(x, 30.3) - 2 * s.value(x + h, 30.3) + s.value(x + 2 * h, 30.3)) / (h * h);
    EXPECT_NEAR(left, right, 1e-2 * (1.0 + std::abs(left)));
  }
}

TEST(Warp, IdentityReturnsInput) {
  const auto img = synthesize_speckle(SpeckleSpec{}, 96, 80);
  const auto out = warp_image(img, DeformationMap::identity());
  double worst = 0.0;
  for (int y = 2; y < 78; ++y)
    for (int x = 2; x < 94; ++x) worst = std::max(worst, std::abs(out(x, y) - img(x, y)));
  EXPECT_LT(worst, 1e-12);
}

TEST(Warp, IntegerShiftIsExact) {
  const auto img = synthesize_speckle(SpeckleSpec{}, 96, 80);
  const auto out = warp_image(img, DeformationMap::translation(3, 4));
  for (int y = 8; y < 76; ++y)
    for (int x = 8; x < 92; ++x) ASSERT_EQ(out(x, y), img(x - 3, y - 4));
}

TEST(Warp, TwoQuarterShiftsMatchOneHalfShift) {
  const auto img = synthesize_speckle(SpeckleSpec{}, 128, 128);
  const auto twice = warp_image(warp_image(img, DeformationMap::translation(0.25, 0.0)),
                                DeformationMap::translation(0.25, 0.0));
  const auto once = warp_image(img, DeformationMap::translation(0.5, 0.0));
  double worst = 0.0;
  for (int y = 8; y < 120; ++y)
    for (int x = 8; x < 120; ++x) worst = std::max(worst, std::abs(twice(x, y) - once(x, y)));
  EXPECT_LT(worst, 1e-3);
}

TEST(Warp, ShiftThereAndBack) {
  const auto img = synthesize_speckle(SpeckleSpec{}, 128, 128);
  const auto back = warp_image(warp_image(img, DeformationMap::translation(0.3, -0.7)),
                               DeformationMap::translation(-0.3, 0.7));
  double worst = 0.0;
  for (int y = 8; y < 120; ++y)
    for (int x = 8; x < 120; ++x) worst = std::max(worst, std::abs(back(x, y) - img(x, y)));
  EXPECT_LT(worst, 5e-3);
}

TEST(DeformationMap, InverseUndoesForward) {
  const Eigen::Vector2d c(50.0, 40.0);
  Eigen::Matrix2d g;
  g << 0.002, -0.001, 0.0005, 0.003;
  GridDisplacement grid{0.0, 0.0, 10.0, 11, 11, {}, {}};
  for (int i = 0; i < 121; ++i) {
    grid.u.push_back(0.01 * std::sin(i * 0.3));
    grid.v.push_back(0.02 * std::cos(i * 0.2));
  }
  const std::vector<DeformationMap> maps{DeformationMap::identity(), DeformationMap::translation(1.5, -2.25),
                                         DeformationMap::affine(g, {0.3, -0.2}, c), DeformationMap::rotation(0.01, c),
                                         DeformationMap::bow(0.8, c, 60.0), DeformationMap::gridded(grid)};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (const auto& m : maps)
    for (int i = 0; i < 200; ++i) {
      const Eigen::Vector2d p(u(rng), u(rng));
      ASSERT_LT((m.inverse(m.forward(p)) - p).norm(), 1e-9);
    }
}

TEST(DeformationMap, SingularAffineIsRejected) {
  Eigen::Matrix2d g;
  g << -1.0, 0.0, 0.0, 0.0;
  const auto m = DeformationMap::affine(g, {0, 0}, {0, 0});
  EXPECT_THROW(m.inverse({1.0, 1.0}), NumericalError);
  const GrayImage img(16, 16, 0.5);
  EXPECT_THROW(warp_image(img, m), NumericalError);
}
