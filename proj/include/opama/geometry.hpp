#pragma once

// Panorama geometry: equirectangular images, cubemaps and perspective (NFoV)
// views over a shared spherical convention.
//
// Convention: +y up, +z forward at (lon, lat) = (0, 0), +x at lon = +90.
// Cube faces F(+z), R(+x), B(-z), L(-x), U(+y), D(-y), all with zero roll.
// Pixel centers sit at half-integer offsets. Colors are sampled bilinearly,
// masks with nearest neighbor.

#include <array>
#include <cstdint>
#include <string>

#include "opama/tensor.hpp"

namespace opama {

using Vec3 = std::array<double, 3>;

/// Full-sphere equirectangular image. pixels [H, W, C] in [0, 1]; mask [H, W]
/// with 1 = known, 0 = unknown.
struct EquirectImage {
  Tensor pixels;
  Tensor mask;

  EquirectImage() = default;
  /// Blank (all unknown, zero color) panorama.
  EquirectImage(std::int64_t width, std::int64_t height, std::int64_t channels = 3);
  /// Fully known panorama holding `pixels`.
  explicit EquirectImage(Tensor pixels);

  std::int64_t width() const { return pixels.dim(1); }
  std::int64_t height() const { return pixels.dim(0); }
  std::int64_t channels() const { return pixels.dim(2); }
  std::size_t unknown_count() const;
};

enum class Face { F = 0, L = 1, B = 2, R = 3, U = 4, D = 5 };

inline constexpr std::array<Face, 6> kFaceOrder{Face::F, Face::L, Face::B,
                                                Face::R, Face::U, Face::D};
char face_name(Face f);

struct CubeMap {
  std::int64_t face_size = 0;
  std::array<Tensor, 6> faces;  // [S, S, C], indexed by Face
  std::array<Tensor, 6> masks;  // [S, S]

  const Tensor& face(Face f) const { return faces[static_cast<int>(f)]; }
  const Tensor& mask(Face f) const { return masks[static_cast<int>(f)]; }
};

struct ViewCoords {
  double lon = 0.0;  // degrees, [-180, 180)
  double lat = 0.0;  // degrees, [-90, 90]
  double fov = 90.0;  // degrees, (0, 120]
};

/// Throws ContractError when a coordinate is outside its range.
void validate(const ViewCoords& c);
/// Wraps lon into [-180, 180).
double wrap_lon(double lon_deg);

struct NFoVView {
  ViewCoords coords;
  Tensor image;  // [S, S, C]
  Tensor mask;   // [S, S]
};

/// Unit direction through the center of equirect pixel (u, v).
Vec3 dir_from_equirect(std::int64_t u, std::int64_t v, std::int64_t width, std::int64_t height);
Vec3 dir_from_lonlat(double lon_rad, double lat_rad);

/// Continuous equirect pixel coordinates (pixel centers at integers) of a
/// direction.
void equirect_coords(const Vec3& d, std::int64_t width, std::int64_t height, double& x, double& y);

/// Bilinear sample of an [H, W, C] image at continuous pixel coordinates,
/// wrapping in x and clamping in y. Writes C values to `out`.
void sample_wrap_bilinear(const Tensor& img, double x, double y, double* out);
/// Nearest-neighbor sample of an [H, W] mask, wrapping in x and clamping in y.
double sample_wrap_nearest(const Tensor& mask, double x, double y);

/// Camera basis of a face or a view: forward, right, up.
struct Basis {
  Vec3 forward, right, up;
};
Basis face_basis(Face f);
Basis view_basis(const ViewCoords& c);

/// Face whose axis has the largest |component|; ties resolved F>R>B>L>U>D.
Face dominant_face(const Vec3& d);

CubeMap equirect_to_cubemap(const EquirectImage& img, std::int64_t face_size);
EquirectImage cubemap_to_equirect(const CubeMap& cube, std::int64_t width, std::int64_t height);

NFoVView extract_nfov(const EquirectImage& img, const ViewCoords& coords, std::int64_t out_size);

struct CompositeOptions {
  /// Leave pixels that are already known untouched.
  bool only_unknown = false;
};

/// Overwrites every equirect pixel whose ray falls inside the view frustum
/// with a bilinear sample of the view image and marks it known.
EquirectImage composite_nfov(const EquirectImage& img, const NFoVView& view,
                             CompositeOptions options = {});

/// True when the ray through equirect pixel (u, v) lies inside the frustum.
bool in_frustum(const ViewCoords& coords, std::int64_t u, std::int64_t v, std::int64_t width,
                std::int64_t height);

/// Per-pixel unit ray directions [S, S, 3] of a view or a cube face.
Tensor coord_channels(const ViewCoords& coords, std::int64_t out_size);
Tensor coord_channels(Face face, std::int64_t out_size);

}  // namespace opama
