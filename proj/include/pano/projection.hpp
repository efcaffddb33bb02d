#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pano/tensor.hpp"

namespace pano {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double d) { return d * kPi / 180.0; }

// Per-pixel class ids; kIgnoreId marks unlabeled pixels.
struct LabelMap {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> ids;

    std::uint8_t at(int i, int j) const { return ids[static_cast<std::size_t>(i) * w + j]; }
};

struct SphereCoord {
    double lat = 0.0;  // radians, [-pi/2, pi/2]
    double lon = 0.0;  // radians, [-pi, pi)
};

// Tangent-patch arrangement: centers, per-side FoV, patch resolution.
struct TangentLayout {
    std::vector<SphereCoord> centers;
    double patch_fov = 0.0;  // radians per side
    int patch_h = 0;
    int patch_w = 0;
};

// Fractional ERP source coordinates for each output pixel. u wraps modulo
// the ERP width at sampling time; v is already clamped to [0, H).
struct SampleGrid {
    int h = 0;
    int w = 0;
    int erp_h = 0;
    int erp_w = 0;
    std::vector<float> u;
    std::vector<float> v;
    std::vector<std::uint8_t> valid;
};

// Full-sphere equirectangular image. Column u covers longitude
// 2*pi*(u+0.5)/W - pi, row v latitude pi/2 - pi*(v+0.5)/H. Width must be
// divisible by 4 so the image splits into 90-degree slabs.
struct ErpImage {
    Tensor pixels;  // [3,H,W], values in [0,1]
    std::optional<LabelMap> labels;

    int height() const { return pixels.dim(1); }
    int width() const { return pixels.dim(2); }

    static ErpImage make(Tensor pixels, std::optional<LabelMap> labels = std::nullopt);
};

// ---- sphere <-> ERP pixel coordinates ----
double erp_col_to_lon(double u, int erp_w);
double erp_row_to_lat(double v, int erp_h);
// Latitude is clamped to +-(pi/2 - 1e-6) before the row lookup; u is
// returned unwrapped (the sampler wraps).
void sphere_to_erp(double lat, double lon, int erp_h, int erp_w, double& u, double& v);

// ---- gnomonic projection ----

// Inverse gnomonic: plane (x, y) on the tangent plane at `center` to sphere
// coordinates. x points east, y toward the north pole.
SphereCoord gnomonic_plane_to_sphere(const SphereCoord& center, double x, double y);

// Forward gnomonic: sphere direction to tangent-plane coordinates. Returns
// false when the direction lies on or behind the tangent hemisphere.
bool gnomonic_sphere_to_plane(const SphereCoord& center, const SphereCoord& p, double& x,
                              double& y);

// True when the direction projects inside the square patch frustum.
bool patch_contains(const SphereCoord& center, double patch_fov, const SphereCoord& p);

// 18 tangent patches: 6 per latitude row {-60, 0, +60} degrees, rows
// staggered by 30 degrees, 80-degree per-side FoV, 64x64 pixels.
TangentLayout default_layout();
TangentLayout layout_from_id(const std::string& id);

// Sample grid for one tangent patch against an ERP of the given dims.
SampleGrid gnomonic_grid(const SphereCoord& center, double fov, int patch_h, int patch_w,
                         int erp_h, int erp_w);

std::vector<SampleGrid> layout_grids(const TangentLayout& layout, int erp_h, int erp_w);

// ---- sampling ----

// Bilinear sampling with longitudinal wrap. Any channel count.
Tensor project_image(const Tensor& pixels, const SampleGrid& grid);
// Nearest-neighbor sampling for class ids.
LabelMap project_labels(const LabelMap& labels, const SampleGrid& grid);

// ---- fixed-FoV slabs ----

// Splits [C,H,W] into `parts` contiguous vertical slabs, left to right.
std::vector<Tensor> split_width(const Tensor& t, int parts);
// Four 90-degree slabs; pure slicing, no resampling.
std::vector<Tensor> erp_to_ffp(const Tensor& pixels);
// Width-wise concatenation in slab order; exact inverse of the split.
Tensor stitch_ffp(const std::vector<Tensor>& parts);

// Identity-coordinate grids for the supported slab FoVs
// {60, 72, 90, 120, 180, 360} degrees; 90 reproduces erp_to_ffp.
std::vector<SampleGrid> ffp_grid_for_fov(double fov_deg, int erp_h, int erp_w);

int ffp_slab_count(double fov_deg);

}  // namespace pano
