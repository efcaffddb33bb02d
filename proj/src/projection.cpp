#include "pano/projection.hpp"

#include <algorithm>
#include <cmath>

#include "pano/errors.hpp"
#include "pano/util.hpp"

namespace pano {

namespace {
constexpr double kLatClamp = kPi / 2.0 - 1e-6;
}

ErpImage ErpImage::make(Tensor pixels, std::optional<LabelMap> labels) {
    if (!pixels.defined() || pixels.rank() != 3 || pixels.dim(0) != 3)
        throw DimensionError("ErpImage: pixels must be [3,H,W]");
    if (pixels.dim(2) % 4 != 0)
        throw DimensionError("ErpImage: width " + std::to_string(pixels.dim(2)) +
                             " not divisible by 4");
    if (labels && (labels->h != pixels.dim(1) || labels->w != pixels.dim(2)))
        throw DimensionError("ErpImage: label dims do not match pixels");
    ErpImage img;
    img.pixels = std::move(pixels);
    img.labels = std::move(labels);
    return img;
}

double erp_col_to_lon(double u, int erp_w) { return 2.0 * kPi * (u + 0.5) / erp_w - kPi; }
double erp_row_to_lat(double v, int erp_h) { return kPi / 2.0 - kPi * (v + 0.5) / erp_h; }

void sphere_to_erp(double lat, double lon, int erp_h, int erp_w, double& u, double& v) {
    lat = std::clamp(lat, -kLatClamp, kLatClamp);
    u = (lon + kPi) / (2.0 * kPi) * erp_w - 0.5;
    v = (kPi / 2.0 - lat) / kPi * erp_h - 0.5;
    v = std::clamp(v, 0.0, static_cast<double>(erp_h - 1));
}

SphereCoord gnomonic_plane_to_sphere(const SphereCoord& center, double x, double y) {
    const double rho = std::hypot(x, y);
    if (rho < 1e-12) return center;
    const double c = std::atan(rho);
    const double sin_c = std::sin(c), cos_c = std::cos(c);
    const double sin_p0 = std::sin(center.lat), cos_p0 = std::cos(center.lat);
    double sin_phi = cos_c * sin_p0 + y * sin_c * cos_p0 / rho;
    sin_phi = std::clamp(sin_phi, -1.0, 1.0);
    SphereCoord out;
    out.lat = std::asin(sin_phi);
    out.lon = center.lon + std::atan2(x * sin_c, rho * cos_p0 * cos_c - y * sin_p0 * sin_c);
    if (out.lon >= kPi) out.lon -= 2.0 * kPi;
    if (out.lon < -kPi) out.lon += 2.0 * kPi;
    return out;
}

bool gnomonic_sphere_to_plane(const SphereCoord& center, const SphereCoord& p, double& x,
                              double& y) {
    const double dlon = p.lon - center.lon;
    const double cos_c = std::sin(center.lat) * std::sin(p.lat) +
                         std::cos(center.lat) * std::cos(p.lat) * std::cos(dlon);
    if (cos_c <= 1e-9) return false;
    x = std::cos(p.lat) * std::sin(dlon) / cos_c;
    y = (std::cos(center.lat) * std::sin(p.lat) -
         std::sin(center.lat) * std::cos(p.lat) * std::cos(dlon)) /
        cos_c;
    return true;
}

bool patch_contains(const SphereCoord& center, double patch_fov, const SphereCoord& p) {
    double x, y;
    if (!gnomonic_sphere_to_plane(center, p, x, y)) return false;
    const double t = std::tan(patch_fov / 2.0);
    return std::abs(x) <= t && std::abs(y) <= t;
}

TangentLayout default_layout() {
    TangentLayout layout;
    layout.patch_fov = deg_to_rad(80.0);
    layout.patch_h = 64;
    layout.patch_w = 64;
    // Rows at -60/0/+60 degrees so the polar caps stay inside the +-60
    // rows' frusta; the staggered rows interleave the equatorial seams.
    for (double lat_deg : {-60.0, 0.0, 60.0}) {
        const double stagger = lat_deg == 0.0 ? 0.0 : 30.0;
        for (int k = 0; k < 6; ++k) {
            double lon_deg = -180.0 + 60.0 * k + stagger;
            if (lon_deg >= 180.0) lon_deg -= 360.0;
            layout.centers.push_back({deg_to_rad(lat_deg), deg_to_rad(lon_deg)});
        }
    }
    return layout;
}

TangentLayout layout_from_id(const std::string& id) {
    if (id == "default") return default_layout();
    throw ConfigError("unknown tangent layout id: " + id);
}

SampleGrid gnomonic_grid(const SphereCoord& center, double fov, int patch_h, int patch_w,
                         int erp_h, int erp_w) {
    if (!(fov > 0.0) || fov >= kPi)
        throw GeometryError("gnomonic_grid: FoV must lie in (0, pi), got " + std::to_string(fov));
    if (std::abs(center.lat) >= kPi / 2.0)
        throw GeometryError("gnomonic_grid: center latitude must lie strictly inside (-pi/2, pi/2)");
    if (patch_h < 1 || patch_w < 1 || erp_h < 1 || erp_w < 1)
        throw DimensionError("gnomonic_grid: bad dimensions");

    SampleGrid grid;
    grid.h = patch_h;
    grid.w = patch_w;
    grid.erp_h = erp_h;
    grid.erp_w = erp_w;
    const std::size_t n = static_cast<std::size_t>(patch_h) * patch_w;
    grid.u.resize(n);
    grid.v.resize(n);
    grid.valid.assign(n, 1);

    const double t = std::tan(fov / 2.0);
    for (int i = 0; i < patch_h; ++i) {
        const double y = (1.0 - 2.0 * (i + 0.5) / patch_h) * t;
        for (int j = 0; j < patch_w; ++j) {
            const double x = (2.0 * (j + 0.5) / patch_w - 1.0) * t;
            const SphereCoord s = gnomonic_plane_to_sphere(center, x, y);
            double u, v;
            sphere_to_erp(s.lat, s.lon, erp_h, erp_w, u, v);
            grid.u[static_cast<std::size_t>(i) * patch_w + j] = static_cast<float>(u);
            grid.v[static_cast<std::size_t>(i) * patch_w + j] = static_cast<float>(v);
        }
    }
    return grid;
}

std::vector<SampleGrid> layout_grids(const TangentLayout& layout, int erp_h, int erp_w) {
    std::vector<SampleGrid> grids(layout.centers.size());
    parallel_for(layout.centers.size(), [&](std::size_t i) {
        grids[i] = gnomonic_grid(layout.centers[i], layout.patch_fov, layout.patch_h,
                                 layout.patch_w, erp_h, erp_w);
    });
    return grids;
}

namespace {

inline int wrap_col(int u, int w) {
    u %= w;
    return u < 0 ? u + w : u;
}

}  // namespace

Tensor project_image(const Tensor& pixels, const SampleGrid& grid) {
    if (!pixels.defined() || pixels.rank() != 3)
        throw DimensionError("project_image: pixels must be rank 3");
    const int C = pixels.dim(0), H = pixels.dim(1), W = pixels.dim(2);
    if (H != grid.erp_h || W != grid.erp_w)
        throw DimensionError("project_image: grid built for " + std::to_string(grid.erp_h) + "x" +
                             std::to_string(grid.erp_w) + ", image is " + std::to_string(H) + "x" +
                             std::to_string(W));
    Tensor out = Tensor::zeros({C, grid.h, grid.w});
    auto dst = out.raw_data();
    auto src = pixels.data();
    const std::size_t n = static_cast<std::size_t>(grid.h) * grid.w;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    parallel_for(n, [&](std::size_t p) {
        if (!grid.valid[p]) return;
        double u = grid.u[p];
        const double v = std::clamp(static_cast<double>(grid.v[p]), 0.0, static_cast<double>(H - 1));
        u -= std::floor(u / W) * W;  // wrap into [0, W)
        const int u0 = static_cast<int>(std::floor(u));
        const double fu = u - u0;
        const int ua = wrap_col(u0, W), ub = wrap_col(u0 + 1, W);
        const int v0 = static_cast<int>(std::floor(v));
        const int va = std::clamp(v0, 0, H - 1), vb = std::min(va + 1, H - 1);
        const double fv = v - v0;
        for (int c = 0; c < C; ++c) {
            const float* plane_c = &src[static_cast<std::size_t>(c) * plane];
            const double top = plane_c[va * W + ua] * (1.0 - fu) + plane_c[va * W + ub] * fu;
            const double bot = plane_c[vb * W + ua] * (1.0 - fu) + plane_c[vb * W + ub] * fu;
            dst[static_cast<std::size_t>(c) * n + p] =
                static_cast<float>(top * (1.0 - fv) + bot * fv);
        }
    });
    return out;
}

LabelMap project_labels(const LabelMap& labels, const SampleGrid& grid) {
    if (labels.h != grid.erp_h || labels.w != grid.erp_w)
        throw DimensionError("project_labels: grid/label dims mismatch");
    LabelMap out;
    out.h = grid.h;
    out.w = grid.w;
    out.ids.assign(static_cast<std::size_t>(grid.h) * grid.w, kIgnoreId);
    const int H = labels.h, W = labels.w;
    for (std::size_t p = 0; p < out.ids.size(); ++p) {
        if (!grid.valid[p]) continue;
        const int u = wrap_col(static_cast<int>(std::lround(grid.u[p])), W);
        const int v = std::clamp(static_cast<int>(std::lround(grid.v[p])), 0, H - 1);
        out.ids[p] = labels.ids[static_cast<std::size_t>(v) * W + u];
    }
    return out;
}

std::vector<Tensor> split_width(const Tensor& t, int parts) {
    if (!t.defined() || t.rank() != 3)
        throw DimensionError("split_width: rank-3 tensor required");
    if (parts < 1 || t.dim(2) % parts != 0)
        throw DimensionError("split_width: width " + std::to_string(t.dim(2)) +
                             " not divisible into " + std::to_string(parts) + " slabs");
    const int sw = t.dim(2) / parts;
    std::vector<Tensor> out;
    out.reserve(parts);
    for (int k = 0; k < parts; ++k) out.push_back(slice_width(t, k * sw, (k + 1) * sw));
    return out;
}

std::vector<Tensor> erp_to_ffp(const Tensor& pixels) { return split_width(pixels, 4); }

Tensor stitch_ffp(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("stitch_ffp: empty slab list");
    return concat_width(parts);
}

int ffp_slab_count(double fov_deg) {
    for (int fov : {60, 72, 90, 120, 180, 360})
        if (fov_deg == fov) return 360 / fov;
    throw ConfigError("ffp FoV must be one of {60,72,90,120,180,360} degrees, got " +
                      std::to_string(fov_deg));
}

std::vector<SampleGrid> ffp_grid_for_fov(double fov_deg, int erp_h, int erp_w) {
    const int parts = ffp_slab_count(fov_deg);
    if (erp_w % parts != 0)
        throw DimensionError("ffp_grid_for_fov: width " + std::to_string(erp_w) +
                             " not divisible into " + std::to_string(parts) + " slabs");
    const int sw = erp_w / parts;
    std::vector<SampleGrid> grids;
    grids.reserve(parts);
    for (int k = 0; k < parts; ++k) {
        SampleGrid g;
        g.h = erp_h;
        g.w = sw;
        g.erp_h = erp_h;
        g.erp_w = erp_w;
        const std::size_t n = static_cast<std::size_t>(erp_h) * sw;
        g.u.resize(n);
        g.v.resize(n);
        g.valid.assign(n, 1);
        for (int i = 0; i < erp_h; ++i)
            for (int j = 0; j < sw; ++j) {
                g.u[static_cast<std::size_t>(i) * sw + j] = static_cast<float>(k * sw + j);
                g.v[static_cast<std::size_t>(i) * sw + j] = static_cast<float>(i);
            }
        grids.push_back(std::move(g));
    }
    return grids;
}

}  // namespace pano
