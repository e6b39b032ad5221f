#pragma once

// Two-dimensional densities defined by grayscale images.
//
// Pixels sit on the nodes of a regular grid spanning the domain box; the
// top image row maps to the highest x2. The density is the bilinear
// interpolant of max(intensity / max_intensity, floor), and the energy is
// its negative log. Outside the box the energy continues from the clamped
// point with a quadratic wall of stiffness `wall_stiffness`.

#include "snf/energy.hpp"
#include "snf/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

namespace snf {

struct GrayImage {
  int rows = 0;
  int cols = 0;
  std::vector<double> pixels;  // row-major, row 0 = top

  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }
};

struct DomainBox {
  double lo = -2.5;
  double hi = 2.5;
};

namespace detail {

inline std::string next_pgm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw std::runtime_error("pgm: unexpected end of file");
  return tok;
}

inline int parse_pgm_int(const std::string& tok) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(tok, &used);
  } catch (const std::exception&) {
    throw std::runtime_error("pgm: expected integer, got '" + tok + "'");
  }
  if (used != tok.size()) throw std::runtime_error("pgm: expected integer, got '" + tok + "'");
  return v;
}

}  // namespace detail

/// Reads an 8-bit PGM, binary (P5) or ASCII (P2).
inline GrayImage read_pgm(std::istream& in) {
  const std::string magic = detail::next_pgm_token(in);
  if (magic != "P5" && magic != "P2") throw std::runtime_error("pgm: unsupported magic " + magic);
  GrayImage img;
  img.cols = detail::parse_pgm_int(detail::next_pgm_token(in));
  img.rows = detail::parse_pgm_int(detail::next_pgm_token(in));
  const int maxval = detail::parse_pgm_int(detail::next_pgm_token(in));
  if (img.cols <= 0 || img.rows <= 0) throw std::runtime_error("pgm: empty image");
  if (maxval <= 0 || maxval > 255) throw std::runtime_error("pgm: only 8-bit images supported");
  const std::size_t n = static_cast<std::size_t>(img.rows) * img.cols;
  img.pixels.resize(n);
  if (magic == "P5") {
    // exactly one whitespace byte was consumed after maxval
    std::vector<unsigned char> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
      throw std::runtime_error("pgm: truncated pixel data");
    }
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = raw[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const int v = detail::parse_pgm_int(detail::next_pgm_token(in));
      if (v < 0 || v > maxval) throw std::runtime_error("pgm: pixel out of range");
      img.pixels[i] = v;
    }
  }
  return img;
}

inline GrayImage read_pgm_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path + "'");
  return read_pgm(in);
}

inline void write_pgm(std::ostream& out, const GrayImage& img, bool binary = true) {
  out << (binary ? "P5" : "P2") << "\n" << img.cols << " " << img.rows << "\n255\n";
  for (int r = 0; r < img.rows; ++r) {
    for (int c = 0; c < img.cols; ++c) {
      const auto v = static_cast<int>(std::clamp(std::lround(img.at(r, c)), 0L, 255L));
      if (binary) {
        out.put(static_cast<char>(static_cast<unsigned char>(v)));
      } else {
        out << v << (c + 1 == img.cols ? '\n' : ' ');
      }
    }
  }
}

class GridImage final : public Energy {
 public:
  static constexpr double kDefaultWallStiffness = 100.0;

  GridImage(const GrayImage& image, DomainBox box, double floor,
            double wall_stiffness = kDefaultWallStiffness)
      : box_(box), floor_(floor), stiffness_(wall_stiffness) {
    if (image.rows <= 0 || image.cols <= 0 ||
        image.pixels.size() != static_cast<std::size_t>(image.rows) * image.cols) {
      throw std::invalid_argument("load_image_energy: empty pixel grid");
    }
    if (!(floor > 0.0)) throw std::invalid_argument("load_image_energy: floor must be > 0");
    if (!(box.hi > box.lo)) throw std::invalid_argument("load_image_energy: empty domain");
    nx_ = image.cols;
    ny_ = image.rows;
    const double peak = *std::max_element(image.pixels.begin(), image.pixels.end());
    density_.resize(nx_, ny_);
    for (int iy = 0; iy < ny_; ++iy) {
      for (int ix = 0; ix < nx_; ++ix) {
        const double v = peak > 0.0 ? image.at(ny_ - 1 - iy, ix) / peak : 0.0;
        density_(ix, iy) = std::max(v, floor_);
      }
    }
    hx_ = nx_ > 1 ? (box_.hi - box_.lo) / (nx_ - 1) : 0.0;
    hy_ = ny_ > 1 ? (box_.hi - box_.lo) / (ny_ - 1) : 0.0;
    build_cell_table();
  }

  std::string_view kind() const override { return "image"; }
  int dim() const override { return 2; }
  const DomainBox& box() const { return box_; }
  double floor() const { return floor_; }
  int nodes_x() const { return nx_; }
  int nodes_y() const { return ny_; }
  /// Floored, max-normalized density at grid node (ix, iy); iy = 0 is the bottom row.
  double node_density(int ix, int iy) const { return density_(ix, iy); }

  /// Bilinear density at a point inside the box.
  double density(double x1, double x2) const { return local(x1, x2).f; }

  /// Draws points from the density restricted to the domain box.
  Matrix sample(Eigen::Index n, RngStream& rng) const {
    Matrix out(2, n);
    const int cx = std::max(nx_ - 1, 1);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double target = rng.uniform() * cell_cdf_.back();
      const auto it = std::upper_bound(cell_cdf_.begin(), cell_cdf_.end(), target);
      const auto cell = std::min<std::ptrdiff_t>(it - cell_cdf_.begin(),
                                                 static_cast<std::ptrdiff_t>(cell_cdf_.size()) - 1);
      const int ix = static_cast<int>(cell % cx);
      const int iy = static_cast<int>(cell / cx);
      const double x0 = box_.lo + ix * hx_;
      const double y0 = box_.lo + iy * hy_;
      const double wx = nx_ > 1 ? hx_ : box_.hi - box_.lo;
      const double wy = ny_ > 1 ? hy_ : box_.hi - box_.lo;
      const double bound = cell_max_[static_cast<std::size_t>(cell)];
      while (true) {
        const double px = x0 + rng.uniform() * wx;
        const double py = y0 + rng.uniform() * wy;
        if (rng.uniform() * bound <= density(px, py)) {
          out(0, k) = px;
          out(1, k) = py;
          break;
        }
      }
    }
    return out;
  }

 protected:
  double do_value(ConstVectorRef y) const override {
    const double cx = std::clamp(y[0], box_.lo, box_.hi);
    const double cy = std::clamp(y[1], box_.lo, box_.hi);
    const double dx = y[0] - cx;
    const double dy = y[1] - cy;
    return -std::log(local(cx, cy).f) + 0.5 * stiffness_ * (dx * dx + dy * dy);
  }

  Vector do_gradient(ConstVectorRef y) const override {
    const double cx = std::clamp(y[0], box_.lo, box_.hi);
    const double cy = std::clamp(y[1], box_.lo, box_.hi);
    const Local l = local(cx, cy);
    Vector g(2);
    g[0] = cx == y[0] ? -l.fx / l.f : stiffness_ * (y[0] - cx);
    g[1] = cy == y[1] ? -l.fy / l.f : stiffness_ * (y[1] - cy);
    return g;
  }

  Vector do_hessian_vector(ConstVectorRef y, ConstVectorRef v) const override {
    const double cx = std::clamp(y[0], box_.lo, box_.hi);
    const double cy = std::clamp(y[1], box_.lo, box_.hi);
    const bool in_x = cx == y[0];
    const bool in_y = cy == y[1];
    const Local l = local(cx, cy);
    // Hessian of -log f: -(d2 f)/f + grad f grad f^T / f^2; d2f has no diagonal.
    const double inv = 1.0 / l.f;
    const double gx = l.fx * inv;
    const double gy = l.fy * inv;
    double hxx = gx * gx;
    double hyy = gy * gy;
    double hxy = -l.fxy * inv + gx * gy;
    if (!in_x) {
      hxx = stiffness_;
      hxy = 0.0;
    }
    if (!in_y) {
      hyy = stiffness_;
      hxy = 0.0;
    }
    Vector hv(2);
    hv[0] = hxx * v[0] + hxy * v[1];
    hv[1] = hxy * v[0] + hyy * v[1];
    return hv;
  }

 private:
  struct Local {
    double f, fx, fy, fxy;
  };

  // Cell index and fractional offset along one axis.
  static void locate(double x, double lo, double h, int n, int& i, double& t) {
    if (n == 1) {
      i = 0;
      t = 0.0;
      return;
    }
    const double s = (x - lo) / h;
    i = std::clamp(static_cast<int>(std::floor(s)), 0, n - 2);
    t = s - i;
  }

  Local local(double x1, double x2) const {
    int ix, iy;
    double u, w;
    locate(x1, box_.lo, hx_, nx_, ix, u);
    locate(x2, box_.lo, hy_, ny_, iy, w);
    const int jx = std::min(ix + 1, nx_ - 1);
    const int jy = std::min(iy + 1, ny_ - 1);
    const double f00 = density_(ix, iy);
    const double f10 = density_(jx, iy);
    const double f01 = density_(ix, jy);
    const double f11 = density_(jx, jy);
    Local l;
    l.f = (1 - u) * (1 - w) * f00 + u * (1 - w) * f10 + (1 - u) * w * f01 + u * w * f11;
    l.fx = nx_ > 1 ? ((1 - w) * (f10 - f00) + w * (f11 - f01)) / hx_ : 0.0;
    l.fy = ny_ > 1 ? ((1 - u) * (f01 - f00) + u * (f11 - f10)) / hy_ : 0.0;
    l.fxy = (nx_ > 1 && ny_ > 1) ? (f11 - f10 - f01 + f00) / (hx_ * hy_) : 0.0;
    return l;
  }

  void build_cell_table() {
    const int cx = std::max(nx_ - 1, 1);
    const int cy = std::max(ny_ - 1, 1);
    double acc = 0.0;
    for (int iy = 0; iy < cy; ++iy) {
      for (int ix = 0; ix < cx; ++ix) {
        const int jx = std::min(ix + 1, nx_ - 1);
        const int jy = std::min(iy + 1, ny_ - 1);
        const double a = density_(ix, iy), b = density_(jx, iy), c = density_(ix, jy),
                     d = density_(jx, jy);
        acc += 0.25 * (a + b + c + d);  // cells share one area
        cell_cdf_.push_back(acc);
        cell_max_.push_back(std::max({a, b, c, d}));
      }
    }
  }

  DomainBox box_;
  double floor_;
  double stiffness_;
  int nx_ = 0;
  int ny_ = 0;
  double hx_ = 0.0;
  double hy_ = 0.0;
  Eigen::MatrixXd density_;  // (ix, iy)
  std::vector<double> cell_cdf_;
  std::vector<double> cell_max_;
};

inline std::shared_ptr<const GridImage> load_image_energy(const GrayImage& pixels,
                                                          DomainBox box = {},
                                                          double floor = 1e-3) {
  return std::make_shared<const GridImage>(pixels, box, floor);
}

}  // namespace snf
