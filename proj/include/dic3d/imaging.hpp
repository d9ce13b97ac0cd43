#pragma once

// Grayscale images: PGM I/O, synthetic speckle, cubic B-spline sampling and
// ground-truth warping.

#include <Eigen/Core>
#include <Eigen/LU>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dic3d/error.hpp"

namespace dic3d {

class GrayImage {
 public:
  GrayImage() = default;

  GrayImage(int width, int height, double fill = 0.0)
      : GrayImage(width, height, std::vector<double>(checked_area(width, height), fill)) {}

  GrayImage(int width, int height, std::vector<double> intensities)
      : width_(width), height_(height), data_(std::move(intensities)) {
    if (data_.size() != checked_area(width, height))
      throw ConfigError("GrayImage: intensity count " + std::to_string(data_.size()) +
                        " does not match " + std::to_string(width) + "x" + std::to_string(height));
    for (double v : data_)
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw ConfigError("GrayImage: intensities must be finite and within [0, 1]");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return data_.empty(); }
  double operator()(int x, int y) const { return data_[index(x, y)]; }
  std::span<const double> pixels() const noexcept { return data_; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  static std::size_t checked_area(int w, int h) {
    if (w <= 0 || h <= 0)
      throw ConfigError("GrayImage: zero-area image " + std::to_string(w) + "x" + std::to_string(h));
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  }
  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// PGM (P5) I/O

enum class PgmErrorKind { malformed_header, truncated_payload, unsupported_maxval };

class PgmError : public IoError {
 public:
  PgmError(PgmErrorKind kind, const std::string& what) : IoError(what), kind_(kind) {}
  PgmErrorKind pgm_kind() const noexcept { return kind_; }

 private:
  PgmErrorKind kind_;
};

namespace detail {

inline bool pgm_read_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c = in.get();
  for (;;) {
    while (c != EOF && std::isspace(c)) c = in.get();
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    break;
  }
  while (c != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  // The single whitespace after the maxval token has been consumed here.
  return !tok.empty() && c != EOF;
}

inline long pgm_header_int(std::istream& in, const std::string& path, const char* what) {
  std::string tok;
  if (!pgm_read_token(in, tok))
    throw PgmError(PgmErrorKind::malformed_header, path + ": missing " + what);
  long v = 0;
  for (char ch : tok) {
    if (ch < '0' || ch > '9' || v > 100'000'000)
      throw PgmError(PgmErrorKind::malformed_header, path + ": bad " + what + " '" + tok + "'");
    v = v * 10 + (ch - '0');
  }
  return v;
}

}  // namespace detail

inline GrayImage read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  if (!detail::pgm_read_token(in, magic) || magic != "P5")
    throw PgmError(PgmErrorKind::malformed_header, path + ": not a binary PGM (P5)");
  const long w = detail::pgm_header_int(in, path, "width");
  const long h = detail::pgm_header_int(in, path, "height");
  const long maxval = detail::pgm_header_int(in, path, "maxval");
  if (w <= 0 || h <= 0)
    throw PgmError(PgmErrorKind::malformed_header, path + ": non-positive dimensions");
  if (maxval != 255 && maxval != 65535)
    throw PgmError(PgmErrorKind::unsupported_maxval,
                   path + ": unsupported maxval " + std::to_string(maxval) + " (need 255 or 65535)");
  const std::size_t count = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw PgmError(PgmErrorKind::truncated_payload,
                   path + ": truncated payload, expected " + std::to_string(raw.size()) +
                       " bytes, got " + std::to_string(in.gcount()));
  std::vector<double> data(count);
  const double scale = static_cast<double>(maxval);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned sample = bytes_per == 2 ? (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1]
                                           : raw[i];
    data[i] = std::min(1.0, sample / scale);
  }
  return GrayImage(static_cast<int>(w), static_cast<int>(h), std::move(data));
}

/// Writes a P5 PGM; maxval 65535 stores big-endian 16-bit samples.
inline void write_image(const GrayImage& image, const std::string& path, int maxval = 65535) {
  if (maxval != 255 && maxval != 65535) throw ConfigError("write_image: maxval must be 255 or 65535");
  if (image.empty()) throw ConfigError("write_image: empty image");
  std::string header = "P5\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) +
                       "\n" + std::to_string(maxval) + "\n";
  const auto px = image.pixels();
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(px.size() * bytes_per);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const auto q = static_cast<unsigned>(std::lround(px[i] * maxval));
    if (bytes_per == 2) {
      raw[2 * i] = static_cast<unsigned char>(q >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
    } else {
      raw[i] = static_cast<unsigned char>(q);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Synthetic speckle

struct SpeckleSpec {
  double density = 40.0;       ///< expected speckles per 100x100 px window
  double radius_px = 2.5;      ///< mean speckle radius
  double radius_jitter = 0.2;  ///< radius varies uniformly by +/- this fraction
  double contrast = 0.8;       ///< background/foreground gap
  double edge_sigma_px = 1.4;  ///< Gaussian blur applied to the disk pattern
  double position_jitter = 0.4;  ///< centre offset range within its grid cell, as a fraction of the cell
  std::uint64_t rng_seed = 1;

  void validate() const {
    std::vector<std::string> issues;
    if (!(density > 0.0)) issues.push_back("speckle density must be > 0");
    if (!(radius_px >= 1.0)) issues.push_back("speckle radius_px must be >= 1");
    if (!(radius_jitter >= 0.0 && radius_jitter < 1.0)) issues.push_back("speckle radius_jitter must be in [0, 1)");
    if (!(contrast > 0.0 && contrast <= 1.0)) issues.push_back("speckle contrast must be in (0, 1]");
    if (!(position_jitter >= 0.0 && position_jitter <= 1.0)) issues.push_back("speckle position_jitter must be in [0, 1]");
    if (!(edge_sigma_px > 0.0)) issues.push_back("speckle edge_sigma_px must be > 0");
    if (!issues.empty()) throw ConfigError(std::move(issues));
  }

  double background() const noexcept { return 0.5 + 0.5 * contrast; }
  double foreground() const noexcept { return 0.5 - 0.5 * contrast; }
};

/// Additive Gaussian sensor noise, clamped to [0, 1]; deterministic per seed.
inline GrayImage add_gaussian_noise(const GrayImage& image, double sigma, std::uint64_t seed) {
  if (sigma <= 0.0) return image;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> data(image.pixels().begin(), image.pixels().end());
  for (double& v : data) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return GrayImage(image.width(), image.height(), std::move(data));
}

/// Sample standard deviation of the square window of half-width `half` at (cx, cy).
inline double window_std(const GrayImage& image, int cx, int cy, int half) {
  double sum = 0.0, sum2 = 0.0;
  int n = 0;
  for (int y = cy - half; y <= cy + half; ++y)
    for (int x = cx - half; x <= cx + half; ++x) {
      const double v = image(x, y);
      sum += v;
      sum2 += v * v;
      ++n;
    }
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sum2 / n - mean * mean));
}

// ---------------------------------------------------------------------------
// Cubic B-spline interpolation

class DomainError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

namespace detail {

inline constexpr double kSplinePole = -0.26794919243112270;  // sqrt(3) - 2

/// In-place interpolating prefilter for one line with mirror boundaries.
inline void prefilter_mirror(std::span<double> c) {
  const auto n = static_cast<long>(c.size());
  if (n < 2) return;
  constexpr double z = kSplinePole;
  constexpr double gain = (1.0 - z) * (1.0 - 1.0 / z);
  for (double& v : c) v *= gain;

  // Causal initialisation: truncated sum once z^k drops below 1e-17.
  constexpr long horizon = 30;
  double sum = c[0];
  if (horizon < n) {
    double zn = z;
    for (long k = 1; k < horizon; ++k) {
      sum += zn * c[static_cast<std::size_t>(k)];
      zn *= z;
    }
  } else {
    double zn = z;
    const double iz = 1.0 / z;
    double z2n = std::pow(z, static_cast<double>(n - 1));
    sum = c[0] + z2n * c[static_cast<std::size_t>(n - 1)];
    z2n *= z2n * iz;
    for (long k = 1; k < n - 1; ++k) {
      sum += (zn + z2n) * c[static_cast<std::size_t>(k)];
      zn *= z;
      z2n *= iz;
    }
    sum /= 1.0 - zn * zn;
  }
  c[0] = sum;
  for (long k = 1; k < n; ++k) c[static_cast<std::size_t>(k)] += z * c[static_cast<std::size_t>(k - 1)];
  const auto last = static_cast<std::size_t>(n - 1);
  c[last] = (z / (z * z - 1.0)) * (z * c[last - 1] + c[last]);
  for (long k = n - 2; k >= 0; --k) {
    const auto i = static_cast<std::size_t>(k);
    c[i] = z * (c[i + 1] - c[i]);
  }
}

/// Coefficients for one line. The signal is first extended by point-symmetric
/// reflection so that polynomials of degree <= 1 are reproduced up to the border.
inline void prefilter_line(std::span<const double> in, std::span<double> out, std::vector<double>& scratch) {
  const std::size_t n = in.size();
  if (n == 1) {
    out[0] = in[0];
    return;
  }
  const std::size_t pad = std::min<std::size_t>(n - 1, 24);
  scratch.assign(n + 2 * pad, 0.0);
  for (std::size_t k = 0; k < n; ++k) scratch[pad + k] = in[k];
  for (std::size_t j = 1; j <= pad; ++j) {
    scratch[pad - j] = 2.0 * in[0] - in[j];
    scratch[pad + n - 1 + j] = 2.0 * in[n - 1] - in[n - 1 - j];
  }
  prefilter_mirror(scratch);
  for (std::size_t k = 0; k < n; ++k) out[k] = scratch[pad + k];
}

inline void bspline_weights(double t, double w[4]) noexcept {
  const double t2 = t * t;
  const double t3 = t2 * t;
  const double s = 1.0 - t;
  w[0] = s * s * s / 6.0;
  w[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0;
  w[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0;
  w[3] = t3 / 6.0;
}

}  // namespace detail

/// Prefiltered cubic B-spline representation of an image. Samples are only
/// taken at least `kMargin` px inside every border.
class SplineImage {
 public:
  static constexpr int kMargin = 2;

  SplineImage() = default;

  explicit SplineImage(const GrayImage& image)
      : width_(image.width()), height_(image.height()),
        samples_(image.pixels().begin(), image.pixels().end()), coef_(samples_.size()) {
    const auto w = static_cast<std::size_t>(width_);
    const auto h = static_cast<std::size_t>(height_);
    std::vector<double> scratch, line_in, line_out;
    for (std::size_t y = 0; y < h; ++y) {
      std::span<const double> row(samples_.data() + y * w, w);
      detail::prefilter_line(row, std::span<double>(coef_.data() + y * w, w), scratch);
    }
    line_in.resize(h);
    line_out.resize(h);
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t y = 0; y < h; ++y) line_in[y] = coef_[y * w + x];
      detail::prefilter_line(line_in, line_out, scratch);
      for (std::size_t y = 0; y < h; ++y) coef_[y * w + x] = line_out[y];
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }

  bool in_domain(double x, double y) const noexcept {
    return x >= kMargin && y >= kMargin && x <= width_ - 1 - kMargin && y <= height_ - 1 - kMargin;
  }

  double value(double x, double y) const {
    if (!in_domain(x, y))
      throw DomainError("interpolate: (" + std::to_string(x) + ", " + std::to_string(y) +
                        ") outside the interior margin");
    return sample(x, y);
  }

  /// Unchecked evaluation; caller guarantees in_domain(x, y).
  double sample(double x, double y) const noexcept {
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const int ix = static_cast<int>(fx);
    const int iy = static_cast<int>(fy);
    const double tx = x - fx;
    const double ty = y - fy;
    if (tx == 0.0 && ty == 0.0) return samples_[static_cast<std::size_t>(iy) * width_ + ix];
    double wx[4], wy[4];
    detail::bspline_weights(tx, wx);
    detail::bspline_weights(ty, wy);
    const double* base = coef_.data() + static_cast<std::size_t>(iy - 1) * width_ + (ix - 1);
    double acc = 0.0;
    for (int j = 0; j < 4; ++j) {
      const double* row = base + static_cast<std::ptrdiff_t>(j) * width_;
      acc += wy[j] * (wx[0] * row[0] + wx[1] * row[1] + wx[2] * row[2] + wx[3] * row[3]);
    }
    return acc;
  }

  /// Spline gradient at an integer node (interior nodes only).
  Eigen::Vector2d node_gradient(int x, int y) const noexcept {
    const auto at = [&](int xx, int yy) { return coef_[static_cast<std::size_t>(yy) * width_ + xx]; };
    constexpr double a = 1.0 / 6.0, b = 4.0 / 6.0;
    const double gx = 0.5 * (a * (at(x + 1, y - 1) - at(x - 1, y - 1)) + b * (at(x + 1, y) - at(x - 1, y)) +
                             a * (at(x + 1, y + 1) - at(x - 1, y + 1)));
    const double gy = 0.5 * (a * (at(x - 1, y + 1) - at(x - 1, y - 1)) + b * (at(x, y + 1) - at(x, y - 1)) +
                             a * (at(x + 1, y + 1) - at(x + 1, y - 1)));
    return {gx, gy};
  }

  double node(int x, int y) const noexcept { return samples_[static_cast<std::size_t>(y) * width_ + x]; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> samples_;
  std::vector<double> coef_;
};

/// One-off evaluation. Builds the coefficient image on every call; keep a
/// SplineImage around for repeated sampling.
inline double interpolate(const GrayImage& image, double x, double y) {
  return SplineImage(image).value(x, y);
}

// ---------------------------------------------------------------------------
// Ground-truth deformation maps

/// Displacements sampled on a regular grid, bilinear in between and clamped
/// to the edge values outside.
struct GridDisplacement {
  double origin_x = 0.0, origin_y = 0.0, spacing = 1.0;
  int nx = 0, ny = 0;
  std::vector<double> u, v;

  Eigen::Vector2d at(double x, double y) const {
    const double gx = std::clamp((x - origin_x) / spacing, 0.0, static_cast<double>(nx - 1));
    const double gy = std::clamp((y - origin_y) / spacing, 0.0, static_cast<double>(ny - 1));
    const int i0 = std::min(static_cast<int>(gx), std::max(nx - 2, 0));
    const int j0 = std::min(static_cast<int>(gy), std::max(ny - 2, 0));
    const int i1 = std::min(i0 + 1, nx - 1), j1 = std::min(j0 + 1, ny - 1);
    const double tx = gx - i0, ty = gy - j0;
    auto lerp2 = [&](const std::vector<double>& f) {
      auto F = [&](int i, int j) { return f[static_cast<std::size_t>(j) * nx + i]; };
      return (1 - ty) * ((1 - tx) * F(i0, j0) + tx * F(i1, j0)) + ty * ((1 - tx) * F(i0, j1) + tx * F(i1, j1));
    };
    return {lerp2(u), lerp2(v)};
  }
};

/// Continuous mapping x -> x + u(x) over the image plane.
class DeformationMap {
 public:
  struct Identity {};
  struct Affine {
    Eigen::Matrix2d gradient = Eigen::Matrix2d::Zero();
    Eigen::Vector2d shift = Eigen::Vector2d::Zero();
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
  };
  /// In-plane sag: v = amplitude * (1 - |x - center|^2 / radius^2), u = 0.
  struct Bow {
    double amplitude = 0.0;
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
    double radius = 1.0;
  };

  static DeformationMap identity() { return DeformationMap(Identity{}); }
  static DeformationMap translation(double dx, double dy) {
    return DeformationMap(Affine{Eigen::Matrix2d::Zero(), {dx, dy}, {0.0, 0.0}});
  }
  static DeformationMap affine(const Eigen::Matrix2d& gradient, const Eigen::Vector2d& shift,
                               const Eigen::Vector2d& center) {
    return DeformationMap(Affine{gradient, shift, center});
  }
  static DeformationMap rotation(double theta, const Eigen::Vector2d& center) {
    Eigen::Matrix2d g;
    g << std::cos(theta) - 1.0, -std::sin(theta), std::sin(theta), std::cos(theta) - 1.0;
    return DeformationMap(Affine{g, {0.0, 0.0}, center});
  }
  static DeformationMap bow(double amplitude, const Eigen::Vector2d& center, double radius) {
    return DeformationMap(Bow{amplitude, center, radius});
  }
  static DeformationMap gridded(GridDisplacement grid) { return DeformationMap(std::move(grid)); }

  Eigen::Vector2d displacement(const Eigen::Vector2d& p) const {
    return std::visit(
        [&](const auto& m) -> Eigen::Vector2d {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, Identity>) {
            return Eigen::Vector2d::Zero();
          } else if constexpr (std::is_same_v<M, Affine>) {
            return m.shift + m.gradient * (p - m.center);
          } else if constexpr (std::is_same_v<M, Bow>) {
            return {0.0, m.amplitude * (1.0 - (p - m.center).squaredNorm() / (m.radius * m.radius))};
          } else {
            return m.at(p.x(), p.y());
          }
        },
        family_);
  }

  Eigen::Vector2d forward(const Eigen::Vector2d& p) const { return p + displacement(p); }

  /// Reference position that maps onto `q`. Affine families invert in closed
  /// form; the others by fixed-point iteration, which fails for maps that are
  /// not contractive perturbations of the identity.
  Eigen::Vector2d inverse(const Eigen::Vector2d& q) const {
    if (std::holds_alternative<Identity>(family_)) return q;
    if (const auto* a = std::get_if<Affine>(&family_)) {
      const Eigen::Matrix2d jac = Eigen::Matrix2d::Identity() + a->gradient;
      if (std::abs(jac.determinant()) < 1e-12) throw NumericalError("deformation map: singular affine map is not invertible");
      if (a->gradient.isZero(0.0)) return q - a->shift;
      return a->center + jac.inverse() * (q - a->center - a->shift);
    }
    Eigen::Vector2d p = q;
    for (int it = 0; it < 200; ++it) {
      const Eigen::Vector2d next = q - displacement(p);
      if ((next - p).norm() < 1e-13 * (1.0 + q.norm())) return next;
      p = next;
    }
    throw NumericalError("deformation map: inverse did not converge (map not invertible)");
  }

 private:
  using Family = std::variant<Identity, Affine, Bow, GridDisplacement>;
  explicit DeformationMap(Family f) : family_(std::move(f)) {}
  Family family_;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Three uniforms in [0, 1) that depend only on the seed and the grid cell.
inline std::array<double, 3> cell_uniforms(std::uint64_t seed, int gx, int gy) noexcept {
  std::uint64_t state = splitmix64(seed ^ splitmix64((static_cast<std::uint64_t>(static_cast<std::uint32_t>(gx)) << 32) |
                                                     static_cast<std::uint32_t>(gy)));
  std::array<double, 3> out{};
  for (double& v : out) {
    state = splitmix64(state);
    v = static_cast<double>(state >> 11) * 0x1.0p-53;
  }
  return out;
}

/// exp(-x) * I0(x) for x >= 0, relative error below 2e-7.
inline double scaled_bessel_i0(double x) noexcept {
  if (x < 3.75) {
    const double t = (x / 3.75) * (x / 3.75);
    return std::exp(-x) *
           (1.0 + t * (3.5156229 + t * (3.0899424 + t * (1.2067492 + t * (0.2659732 + t * (0.0360768 + t * 0.0045813))))));
  }
  const double t = 3.75 / x;
  return (0.39894228 + t * (0.01328592 + t * (0.00225319 + t * (-0.00157565 + t * (0.00916281 +
         t * (-0.02057706 + t * (0.02635537 + t * (-0.01647633 + t * 0.00392377)))))))) / std::sqrt(x);
}

template <int N>
struct GaussLegendre {
  std::array<double, N> node{}, weight{};
  GaussLegendre() {
    for (int i = 0; i < N; ++i) {
      double x = std::cos(M_PI * (i + 0.75) / (N + 0.5));
      double dp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= N; ++k) {
          const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        dp = N * (x * p1 - p0) / (x * x - 1.0);
        const double dx = p1 / dp;
        x -= dx;
        if (std::abs(dx) < 1e-15) break;
      }
      node[static_cast<std::size_t>(i)] = x;
      weight[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
  }
};

/// Fraction of a unit Gaussian (std sigma) centred at distance d from the
/// centre of a disk of radius r that falls inside the disk.
inline double blurred_disk(double d, double r, double sigma) noexcept {
  static const GaussLegendre<20> gl;
  const double lo = std::max(0.0, d - 7.0 * sigma);
  const double hi = std::min(r, d + 7.0 * sigma);
  if (hi <= lo) return 0.0;
  const double s2 = sigma * sigma;
  const double half = 0.5 * (hi - lo), mid = 0.5 * (hi + lo);
  double acc = 0.0;
  for (std::size_t i = 0; i < gl.node.size(); ++i) {
    const double rho = mid + half * gl.node[i];
    const double e = rho - d;
    acc += gl.weight[i] * rho / s2 * std::exp(-0.5 * e * e / s2) * scaled_bessel_i0(rho * d / s2);
  }
  return std::min(1.0, acc * half);
}

}  // namespace detail

/// Dark Gaussian-blurred disks on a bright background, carried through
/// `map`. Each disk is mapped by the local linearisation of `map` at its
/// centre. One speckle per jittered grid cell of side 100/sqrt(density) px,
/// so the expected count per 100x100 window equals `density` and no large
/// window is left empty.
inline GrayImage render_speckle(const SpeckleSpec& spec, int width, int height, const DeformationMap& map) {
  spec.validate();
  if (width <= 0 || height <= 0)
    throw ConfigError("synthesize_speckle: zero-area image " + std::to_string(width) + "x" + std::to_string(height));

  const double cell = 100.0 / std::sqrt(spec.density);
  const double blur_reach = 7.0 * spec.edge_sigma_px;
  double max_shift = 0.0;
  for (double x : {0.0, 0.5 * width, 1.0 * width})
    for (double y : {0.0, 0.5 * height, 1.0 * height}) max_shift = std::max(max_shift, map.displacement({x, y}).norm());
  const double max_r = spec.radius_px * (1.0 + spec.radius_jitter) + blur_reach + max_shift;
  const int cx0 = static_cast<int>(std::floor(-max_r / cell)) - 1;
  const int cy0 = cx0;
  const int cx1 = static_cast<int>(std::ceil((width + max_r) / cell)) + 1;
  const int cy1 = static_cast<int>(std::ceil((height + max_r) / cell)) + 1;

  std::vector<double> clear(static_cast<std::size_t>(width) * height, 1.0);  // product of (1 - coverage)
  for (int gy = cy0; gy < cy1; ++gy) {
    for (int gx = cx0; gx < cx1; ++gx) {
      const auto u = detail::cell_uniforms(spec.rng_seed, gx, gy);
      const Eigen::Vector2d c((gx + 0.5 + spec.position_jitter * (u[0] - 0.5)) * cell,
                              (gy + 0.5 + spec.position_jitter * (u[1] - 0.5)) * cell);
      const double r = spec.radius_px * (1.0 + spec.radius_jitter * (2.0 * u[2] - 1.0));
      const Eigen::Vector2d mc = map.forward(c);
      Eigen::Matrix2d jac;
      jac.col(0) = 0.5 * (map.forward(c + Eigen::Vector2d(1, 0)) - map.forward(c - Eigen::Vector2d(1, 0)));
      jac.col(1) = 0.5 * (map.forward(c + Eigen::Vector2d(0, 1)) - map.forward(c - Eigen::Vector2d(0, 1)));
      const Eigen::Matrix2d inv = jac.inverse();
      const double reach = (r + blur_reach) * jac.cwiseAbs().rowwise().sum().maxCoeff();
      const int x0 = std::max(0, static_cast<int>(std::floor(mc.x() - reach)));
      const int x1 = std::min(width - 1, static_cast<int>(std::ceil(mc.x() + reach)));
      const int y0 = std::max(0, static_cast<int>(std::floor(mc.y() - reach)));
      const int y1 = std::min(height - 1, static_cast<int>(std::ceil(mc.y() + reach)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double d = (inv * Eigen::Vector2d(x - mc.x(), y - mc.y())).norm();
          if (d >= r + blur_reach) continue;
          clear[static_cast<std::size_t>(y) * width + x] *= 1.0 - detail::blurred_disk(d, r, spec.edge_sigma_px);
        }
      }
    }
  }
  const double bg = spec.background();
  const double fg = spec.foreground();
  std::vector<double> data(clear.size());
  for (std::size_t i = 0; i < clear.size(); ++i) data[i] = std::clamp(fg + (bg - fg) * clear[i], 0.0, 1.0);
  return GrayImage(width, height, std::move(data));
}

inline GrayImage synthesize_speckle(const SpeckleSpec& spec, int width, int height) {
  return render_speckle(spec, width, height, DeformationMap::identity());
}

/// Deformed image g with g(x + u(x)) = f(x). Pixels whose source falls outside
/// the interpolation domain sample the clamped source position.
inline GrayImage warp_image(const GrayImage& image, const DeformationMap& map) {
  const SplineImage spline(image);
  const int w = image.width(), h = image.height();
  if (w <= 2 * SplineImage::kMargin || h <= 2 * SplineImage::kMargin)
    throw ConfigError("warp_image: image too small for the interpolation margin");
  const double lo = SplineImage::kMargin;
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d src = map.inverse({static_cast<double>(x), static_cast<double>(y)});
      const double sx = std::clamp(src.x(), lo, w - 1.0 - lo);
      const double sy = std::clamp(src.y(), lo, h - 1.0 - lo);
      out[static_cast<std::size_t>(y) * w + x] = std::clamp(spline.sample(sx, sy), 0.0, 1.0);
    }
  }
  return GrayImage(w, h, std::move(out));
}

}  // namespace dic3d
