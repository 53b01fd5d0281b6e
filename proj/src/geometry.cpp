#include "opama/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "opama/error.hpp"

namespace opama {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

std::int64_t wrap_index(std::int64_t i, std::int64_t n) {
  const std::int64_t r = i % n;
  return r < 0 ? r + n : r;
}

std::int64_t clamp_index(std::int64_t i, std::int64_t n) { return std::clamp<std::int64_t>(i, 0, n - 1); }

// Ray through pixel (row, col) of an S x S pinhole image with the given basis
// and half-extent tan(fov/2).
Vec3 pinhole_ray(const Basis& b, double half_extent, std::int64_t row, std::int64_t col,
                 std::int64_t size) {
  const double a = (2.0 * (static_cast<double>(col) + 0.5) / static_cast<double>(size) - 1.0) * half_extent;
  const double c = (1.0 - 2.0 * (static_cast<double>(row) + 0.5) / static_cast<double>(size)) * half_extent;
  return normalized({b.forward[0] + a * b.right[0] + c * b.up[0],
                     b.forward[1] + a * b.right[1] + c * b.up[1],
                     b.forward[2] + a * b.right[2] + c * b.up[2]});
}

// Projects d onto the image plane of basis b. Returns false behind the camera
// or outside the [-1, 1]^2 frustum; otherwise sets continuous pixel coords.
bool project_to_plane(const Basis& b, double half_extent, const Vec3& d, std::int64_t size,
                      double& x, double& y) {
  const double zf = dot(d, b.forward);
  if (zf <= 0.0) return false;
  const double a = dot(d, b.right) / zf / half_extent;
  const double c = dot(d, b.up) / zf / half_extent;
  if (std::abs(a) > 1.0 || std::abs(c) > 1.0) return false;
  const auto s = static_cast<double>(size);
  x = (a + 1.0) * 0.5 * s - 0.5;
  y = (1.0 - c) * 0.5 * s - 0.5;
  return true;
}

// Bilinear sample of [S, S, C] with clamping on both axes.
void sample_clamped_bilinear(const Tensor& img, double x, double y, double* out) {
  const auto h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const double fx = x - fx0, fy = y - fy0;
  const auto x0 = static_cast<std::int64_t>(fx0), y0 = static_cast<std::int64_t>(fy0);
  const std::int64_t xa = clamp_index(x0, w), xb = clamp_index(x0 + 1, w);
  const std::int64_t ya = clamp_index(y0, h), yb = clamp_index(y0 + 1, h);
  const auto data = img.data();
  for (std::int64_t k = 0; k < ch; ++k) {
    const double p00 = data[(ya * w + xa) * ch + k], p01 = data[(ya * w + xb) * ch + k];
    const double p10 = data[(yb * w + xa) * ch + k], p11 = data[(yb * w + xb) * ch + k];
    out[k] = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11);
  }
}

double sample_clamped_nearest(const Tensor& mask, double x, double y) {
  const auto h = mask.dim(0), w = mask.dim(1);
  const std::int64_t xi = clamp_index(static_cast<std::int64_t>(std::floor(x + 0.5)), w);
  const std::int64_t yi = clamp_index(static_cast<std::int64_t>(std::floor(y + 0.5)), h);
  return mask[static_cast<std::size_t>(yi * w + xi)];
}

void check_image(const Tensor& pixels, const Tensor& mask, const char* who) {
  if (!pixels.defined() || pixels.rank() != 3)
    throw DimensionError(std::string(who) + ": pixels must be [H,W,C]");
  if (!mask.defined() || mask.shape() != Shape{pixels.dim(0), pixels.dim(1)})
    throw DimensionError(std::string(who) + ": mask must be [H,W] matching pixels " +
                         shape_str(pixels.shape()));
}

void check_equirect(const EquirectImage& img, const char* who) {
  check_image(img.pixels, img.mask, who);
  if (img.width() != 2 * img.height())
    throw DimensionError(std::string(who) + ": equirect width must be twice the height, got " +
                         shape_str(img.pixels.shape()));
}

}  // namespace

EquirectImage::EquirectImage(std::int64_t width, std::int64_t height, std::int64_t channels)
    : pixels(Shape{height, width, channels}), mask(Shape{height, width}) {
  if (width != 2 * height || height < 1)
    throw DimensionError("EquirectImage: width must be twice the height, got " +
                         std::to_string(width) + "x" + std::to_string(height));
}

EquirectImage::EquirectImage(Tensor px) : pixels(std::move(px)) {
  if (pixels.rank() != 3 || pixels.dim(1) != 2 * pixels.dim(0))
    throw DimensionError("EquirectImage: pixels must be [H,2H,C], got " + shape_str(pixels.shape()));
  mask = Tensor(Shape{pixels.dim(0), pixels.dim(1)}, 1.0);
}

std::size_t EquirectImage::unknown_count() const {
  std::size_t n = 0;
  for (double m : mask.data()) n += m < 0.5 ? 1 : 0;
  return n;
}

char face_name(Face f) { return "FLBRUD"[static_cast<int>(f)]; }

void validate(const ViewCoords& c) {
  if (!(c.lon >= -180.0 && c.lon < 180.0))
    throw ContractError("view lon must be in [-180, 180), got " + std::to_string(c.lon));
  if (!(c.lat >= -90.0 && c.lat <= 90.0))
    throw ContractError("view lat must be in [-90, 90], got " + std::to_string(c.lat));
  if (!(c.fov > 0.0 && c.fov <= 120.0))
    throw ContractError("view fov must be in (0, 120], got " + std::to_string(c.fov));
}

double wrap_lon(double lon_deg) {
  double r = std::fmod(lon_deg + 180.0, 360.0);
  if (r < 0) r += 360.0;
  r -= 180.0;
  return r >= 180.0 ? r - 360.0 : r;
}

Vec3 dir_from_lonlat(double lon, double lat) {
  return {std::cos(lat) * std::sin(lon), std::sin(lat), std::cos(lat) * std::cos(lon)};
}

Vec3 dir_from_equirect(std::int64_t u, std::int64_t v, std::int64_t width, std::int64_t height) {
  if (u < 0 || u >= width || v < 0 || v >= height)
    throw ContractError("dir_from_equirect: pixel (" + std::to_string(u) + "," + std::to_string(v) +
                        ") outside " + std::to_string(width) + "x" + std::to_string(height));
  const double lon = 2.0 * kPi * (static_cast<double>(u) + 0.5) / static_cast<double>(width) - kPi;
  const double lat = kPi / 2.0 - kPi * (static_cast<double>(v) + 0.5) / static_cast<double>(height);
  return dir_from_lonlat(lon, lat);
}

void equirect_coords(const Vec3& d, std::int64_t width, std::int64_t height, double& x, double& y) {
  const double lon = std::atan2(d[0], d[2]);
  const double lat = std::asin(std::clamp(d[1], -1.0, 1.0));
  x = (lon + kPi) / (2.0 * kPi) * static_cast<double>(width) - 0.5;
  y = (kPi / 2.0 - lat) / kPi * static_cast<double>(height) - 0.5;
}

void sample_wrap_bilinear(const Tensor& img, double x, double y, double* out) {
  const auto h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const double fx = x - fx0, fy = y - fy0;
  const auto x0 = static_cast<std::int64_t>(fx0), y0 = static_cast<std::int64_t>(fy0);
  const std::int64_t xa = wrap_index(x0, w), xb = wrap_index(x0 + 1, w);
  const std::int64_t ya = clamp_index(y0, h), yb = clamp_index(y0 + 1, h);
  const auto data = img.data();
  for (std::int64_t k = 0; k < ch; ++k) {
    const double p00 = data[(ya * w + xa) * ch + k], p01 = data[(ya * w + xb) * ch + k];
    const double p10 = data[(yb * w + xa) * ch + k], p11 = data[(yb * w + xb) * ch + k];
    out[k] = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11);
  }
}

double sample_wrap_nearest(const Tensor& mask, double x, double y) {
  const auto h = mask.dim(0), w = mask.dim(1);
  const std::int64_t xi = wrap_index(static_cast<std::int64_t>(std::floor(x + 0.5)), w);
  const std::int64_t yi = clamp_index(static_cast<std::int64_t>(std::floor(y + 0.5)), h);
  return mask[static_cast<std::size_t>(yi * w + xi)];
}

Basis face_basis(Face f) {
  switch (f) {
    case Face::F: return {{0, 0, 1}, {1, 0, 0}, {0, 1, 0}};
    case Face::R: return {{1, 0, 0}, {0, 0, -1}, {0, 1, 0}};
    case Face::B: return {{0, 0, -1}, {-1, 0, 0}, {0, 1, 0}};
    case Face::L: return {{-1, 0, 0}, {0, 0, 1}, {0, 1, 0}};
    case Face::U: return {{0, 1, 0}, {1, 0, 0}, {0, 0, -1}};
    case Face::D: return {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}};
  }
  throw ContractError("face_basis: unknown face");
}

Basis view_basis(const ViewCoords& c) {
  const double lon = c.lon * kDeg, lat = c.lat * kDeg;
  Basis b;
  b.forward = dir_from_lonlat(lon, lat);
  b.right = {std::cos(lon), 0.0, -std::sin(lon)};
  b.up = cross(b.forward, b.right);
  return b;
}

Face dominant_face(const Vec3& d) {
  // candidates in tie-break priority order
  const std::array<std::pair<Face, double>, 6> cand{{{Face::F, d[2]},
                                                     {Face::R, d[0]},
                                                     {Face::B, -d[2]},
                                                     {Face::L, -d[0]},
                                                     {Face::U, d[1]},
                                                     {Face::D, -d[1]}}};
  Face best = Face::F;
  double best_v = -1.0;
  for (const auto& [f, v] : cand)
    if (v > best_v) {
      best_v = v;
      best = f;
    }
  return best;
}

CubeMap equirect_to_cubemap(const EquirectImage& img, std::int64_t face_size) {
  check_equirect(img, "equirect_to_cubemap");
  if (face_size < 4) throw ContractError("equirect_to_cubemap: face_size must be >= 4");
  const auto ch = img.channels(), w = img.width(), h = img.height();
  CubeMap cube;
  cube.face_size = face_size;
  for (Face f : kFaceOrder) {
    const Basis b = face_basis(f);
    Tensor face(Shape{face_size, face_size, ch});
    Tensor mask(Shape{face_size, face_size});
    auto fd = face.data();
    auto md = mask.data();
    for (std::int64_t r = 0; r < face_size; ++r)
      for (std::int64_t c = 0; c < face_size; ++c) {
        const Vec3 d = pinhole_ray(b, 1.0, r, c, face_size);
        double x, y;
        equirect_coords(d, w, h, x, y);
        sample_wrap_bilinear(img.pixels, x, y, fd.data() + (r * face_size + c) * ch);
        md[static_cast<std::size_t>(r * face_size + c)] = sample_wrap_nearest(img.mask, x, y);
      }
    cube.faces[static_cast<int>(f)] = face;
    cube.masks[static_cast<int>(f)] = mask;
  }
  return cube;
}

EquirectImage cubemap_to_equirect(const CubeMap& cube, std::int64_t width, std::int64_t height) {
  if (width != 2 * height || height < 1)
    throw DimensionError("cubemap_to_equirect: width must be twice the height");
  const auto s = cube.face_size;
  for (Face f : kFaceOrder) check_image(cube.face(f), cube.mask(f), "cubemap_to_equirect");
  const auto ch = cube.face(Face::F).dim(2);
  for (Face f : kFaceOrder)
    if (cube.face(f).shape() != Shape{s, s, ch})
      throw DimensionError("cubemap_to_equirect: faces must share extent and channels");
  EquirectImage out(width, height, ch);
  auto pd = out.pixels.data();
  auto md = out.mask.data();
  for (std::int64_t v = 0; v < height; ++v)
    for (std::int64_t u = 0; u < width; ++u) {
      const Vec3 d = dir_from_equirect(u, v, width, height);
      const Face f = dominant_face(d);
      const Basis b = face_basis(f);
      const double zf = dot(d, b.forward);
      const double a = dot(d, b.right) / zf, c = dot(d, b.up) / zf;
      const double x = (a + 1.0) * 0.5 * static_cast<double>(s) - 0.5;
      const double y = (1.0 - c) * 0.5 * static_cast<double>(s) - 0.5;
      sample_clamped_bilinear(cube.face(f), x, y, pd.data() + (v * width + u) * ch);
      md[static_cast<std::size_t>(v * width + u)] = sample_clamped_nearest(cube.mask(f), x, y);
    }
  return out;
}

NFoVView extract_nfov(const EquirectImage& img, const ViewCoords& coords, std::int64_t out_size) {
  check_equirect(img, "extract_nfov");
  validate(coords);
  if (out_size < 1) throw ContractError("extract_nfov: out_size must be positive");
  const auto ch = img.channels(), w = img.width(), h = img.height();
  const Basis b = view_basis(coords);
  const double half = std::tan(coords.fov * kDeg / 2.0);
  NFoVView view{coords, Tensor(Shape{out_size, out_size, ch}), Tensor(Shape{out_size, out_size})};
  auto vd = view.image.data();
  auto md = view.mask.data();
  for (std::int64_t r = 0; r < out_size; ++r)
    for (std::int64_t c = 0; c < out_size; ++c) {
      const Vec3 d = pinhole_ray(b, half, r, c, out_size);
      double x, y;
      equirect_coords(d, w, h, x, y);
      sample_wrap_bilinear(img.pixels, x, y, vd.data() + (r * out_size + c) * ch);
      md[static_cast<std::size_t>(r * out_size + c)] = sample_wrap_nearest(img.mask, x, y);
    }
  return view;
}

bool in_frustum(const ViewCoords& coords, std::int64_t u, std::int64_t v, std::int64_t width,
                std::int64_t height) {
  const Basis b = view_basis(coords);
  double x, y;
  return project_to_plane(b, std::tan(coords.fov * kDeg / 2.0), dir_from_equirect(u, v, width, height),
                          1, x, y);
}

EquirectImage composite_nfov(const EquirectImage& img, const NFoVView& view,
                             CompositeOptions options) {
  check_equirect(img, "composite_nfov");
  validate(view.coords);
  if (view.image.rank() != 3 || view.image.dim(0) != view.image.dim(1) ||
      view.image.dim(2) != img.channels())
    throw DimensionError("composite_nfov: view image " + shape_str(view.image.shape()) +
                         " incompatible with panorama " + shape_str(img.pixels.shape()));
  const auto ch = img.channels(), w = img.width(), h = img.height(), s = view.image.dim(0);
  EquirectImage out;
  out.pixels = img.pixels.detach();
  out.mask = img.mask.detach();
  auto pd = out.pixels.data();
  auto md = out.mask.data();
  const Basis b = view_basis(view.coords);
  const double half = std::tan(view.coords.fov * kDeg / 2.0);
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u) {
      const auto idx = static_cast<std::size_t>(v * w + u);
      if (options.only_unknown && md[idx] >= 0.5) continue;
      double x, y;
      if (!project_to_plane(b, half, dir_from_equirect(u, v, w, h), s, x, y)) continue;
      sample_clamped_bilinear(view.image, x, y, pd.data() + idx * static_cast<std::size_t>(ch));
      md[idx] = 1.0;
    }
  return out;
}

Tensor coord_channels(const ViewCoords& coords, std::int64_t out_size) {
  validate(coords);
  const Basis b = view_basis(coords);
  const double half = std::tan(coords.fov * kDeg / 2.0);
  Tensor out(Shape{out_size, out_size, 3});
  auto od = out.data();
  for (std::int64_t r = 0; r < out_size; ++r)
    for (std::int64_t c = 0; c < out_size; ++c) {
      const Vec3 d = pinhole_ray(b, half, r, c, out_size);
      std::copy(d.begin(), d.end(), od.begin() + (r * out_size + c) * 3);
    }
  return out;
}

Tensor coord_channels(Face face, std::int64_t out_size) {
  const Basis b = face_basis(face);
  Tensor out(Shape{out_size, out_size, 3});
  auto od = out.data();
  for (std::int64_t r = 0; r < out_size; ++r)
    for (std::int64_t c = 0; c < out_size; ++c) {
      const Vec3 d = pinhole_ray(b, 1.0, r, c, out_size);
      std::copy(d.begin(), d.end(), od.begin() + (r * out_size + c) * 3);
    }
  return out;
}

}  // namespace opama
