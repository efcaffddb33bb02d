#include "pano/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "pano/errors.hpp"
#include "pano/pngio.hpp"
#include "pano/util.hpp"

namespace pano {

namespace {

std::uint32_t mix32(std::uint32_t x) {
    x ^= x >> 16;
    x *= 0x7feb352dU;
    x ^= x >> 15;
    x *= 0x846ca68bU;
    x ^= x >> 16;
    return x;
}

// Counter-based uniform in [0,1): pure function of (seed, index, salt), so
// rasterization stays deterministic under any parallel schedule.
float hash01(std::uint32_t seed, std::uint32_t index, std::uint32_t salt) {
    return static_cast<float>(mix32(seed ^ mix32(index * 0x9E3779B9U + salt)) >> 8) /
           static_cast<float>(1 << 24);
}

float hash_gaussian(std::uint32_t seed, std::uint32_t index, std::uint32_t salt) {
    const float u1 = std::max(hash01(seed, index, salt * 2 + 1), 1e-7f);
    const float u2 = hash01(seed, index, salt * 2 + 2);
    return std::sqrt(-2.0f * std::log(u1)) * std::cos(2.0f * static_cast<float>(kPi) * u2);
}

double wrap_lon(double d) {
    while (d > kPi) d -= 2.0 * kPi;
    while (d < -kPi) d += 2.0 * kPi;
    return d;
}

struct Rgb {
    float r, g, b;
};

Rgb base_color(std::uint8_t cls) {
    switch (cls) {
        case kSky: return {0.53f, 0.71f, 0.92f};
        case kGround: return {0.36f, 0.30f, 0.20f};
        case kBuilding: return {0.55f, 0.55f, 0.60f};
        case kObject: return {0.80f, 0.25f, 0.20f};
        default: return {0.24f, 0.24f, 0.28f};  // road
    }
}

Rgb apply_style(Rgb c, const StyleParams& style, std::uint32_t noise_seed, std::uint32_t index) {
    auto contrast = [&](float v) { return (v - 0.5f) * style.contrast + 0.5f; };
    c = {contrast(c.r), contrast(c.g), contrast(c.b)};
    const float h = style.hue_shift;
    c = {(1 - h) * c.r + h * c.g, (1 - h) * c.g + h * c.b, (1 - h) * c.b + h * c.r};
    if (style.noise_sigma > 0.0f) {
        c.r += style.noise_sigma * hash_gaussian(noise_seed, index, 11);
        c.g += style.noise_sigma * hash_gaussian(noise_seed, index, 12);
        c.b += style.noise_sigma * hash_gaussian(noise_seed, index, 13);
    }
    c.r = std::clamp(c.r, 0.0f, 1.0f);
    c.g = std::clamp(c.g, 0.0f, 1.0f);
    c.b = std::clamp(c.b, 0.0f, 1.0f);
    return c;
}

}  // namespace

SceneGeometry scene_geometry(unsigned seed) {
    std::mt19937 rng(seed ^ 0xA5A5F00Du);
    auto uni = [&rng](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    SceneGeometry g;
    g.horizon_lat = uni(0.03, 0.12);
    g.road_lon = uni(-kPi, kPi);
    g.road_half_width = uni(0.12, 0.25);
    const int nb = std::uniform_int_distribution<int>(3, 6)(rng);
    for (int i = 0; i < nb; ++i) {
        SceneGeometry::Building b;
        b.lon = uni(-kPi, kPi);
        b.half_w = uni(0.15, 0.45);
        b.top_lat = g.horizon_lat + uni(0.15, 0.55);
        g.buildings.push_back(b);
    }
    const int no = std::uniform_int_distribution<int>(4, 8)(rng);
    for (int i = 0; i < no; ++i) {
        SceneGeometry::Blob o;
        o.lat = uni(-0.55, 0.15);
        o.lon = uni(-kPi, kPi);
        o.radius = uni(0.06, 0.16);
        g.objects.push_back(o);
    }
    return g;
}

std::uint8_t class_at(const SceneGeometry& g, double lat, double lon) {
    for (const auto& o : g.objects) {
        const double cosd = std::sin(o.lat) * std::sin(lat) +
                            std::cos(o.lat) * std::cos(lat) * std::cos(lon - o.lon);
        if (cosd > std::cos(o.radius)) return kObject;
    }
    if (lat > g.horizon_lat) {
        for (const auto& b : g.buildings)
            if (lat <= b.top_lat && std::abs(wrap_lon(lon - b.lon)) < b.half_w) return kBuilding;
        return kSky;
    }
    if (std::abs(wrap_lon(lon - g.road_lon)) < g.road_half_width) return kRoad;
    return kGround;
}

ErpImage generate_erp(const SceneSpec& spec, int height, int width, bool target_style) {
    if (width % 8 != 0 || width % 4 != 0)
        throw DimensionError("generate_erp: width must be divisible by 8 and 4, got " +
                             std::to_string(width));
    if (height < 1) throw DimensionError("generate_erp: bad height");
    const SceneGeometry geo = scene_geometry(spec.seed);
    const StyleParams& style = target_style ? spec.target_style : spec.source_style;
    const std::uint32_t noise_seed = spec.seed ^ (target_style ? 0x51F1E1u : 0x0u);

    Tensor pixels = Tensor::zeros({3, height, width});
    auto px = pixels.raw_data();
    LabelMap labels;
    labels.h = height;
    labels.w = width;
    labels.ids.assign(static_cast<std::size_t>(height) * width, 0);
    const std::size_t plane = static_cast<std::size_t>(height) * width;

    parallel_for(static_cast<std::size_t>(height), [&](std::size_t row) {
        const double lat = erp_row_to_lat(static_cast<double>(row), height);
        const float shade = 1.0f - 0.2f * static_cast<float>(std::abs(lat) / (kPi / 2.0));
        for (int col = 0; col < width; ++col) {
            const double lon = erp_col_to_lon(static_cast<double>(col), width);
            const std::uint32_t idx = static_cast<std::uint32_t>(row * width + col);
            const std::uint8_t cls = class_at(geo, lat, lon);
            labels.ids[idx] = cls;
            Rgb c = base_color(cls);
            const float jitter = 0.08f * (hash01(spec.seed, idx, 3) - 0.5f);
            c.r = (c.r + jitter) * shade;
            c.g = (c.g + jitter) * shade;
            c.b = (c.b + jitter) * shade;
            c = apply_style(c, style, noise_seed, idx);
            px[0 * plane + idx] = c.r;
            px[1 * plane + idx] = c.g;
            px[2 * plane + idx] = c.b;
        }
    });
    return ErpImage::make(std::move(pixels), std::move(labels));
}

CropView pinhole_crop_view(const SceneSpec& spec, int index) {
    CropView view;
    view.scene = spec;
    view.scene.seed = spec.seed * 2654435761u + 1000003u * static_cast<unsigned>(index) + 17u;
    std::mt19937 rng(view.scene.seed ^ 0xC0FFEEu);
    view.center.lat = std::uniform_real_distribution<double>(-0.6, 0.6)(rng);
    view.center.lon = std::uniform_real_distribution<double>(-kPi, kPi)(rng);
    return view;
}

std::vector<LabeledImage> generate_pinhole_crops(const SceneSpec& spec, int n, int size) {
    if (size % 8 != 0)
        throw DimensionError("generate_pinhole_crops: size must be divisible by 8, got " +
                             std::to_string(size));
    std::vector<LabeledImage> crops;
    crops.reserve(n);
    for (int i = 0; i < n; ++i) {
        const CropView view = pinhole_crop_view(spec, i);
        const ErpImage erp = generate_erp(view.scene, view.erp_h, view.erp_w,
                                          /*target_style=*/false);
        const SampleGrid grid =
            gnomonic_grid(view.center, view.fov, size, size, view.erp_h, view.erp_w);
        LabeledImage crop;
        crop.image = project_image(erp.pixels, grid);
        crop.labels = project_labels(*erp.labels, grid);
        crops.push_back(std::move(crop));
    }
    return crops;
}

// ---- dataset directories ----

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string index_name(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05d.png", prefix, i);
    return buf;
}

void save_dataset(const std::string& dir, const char* kind,
                  const std::vector<std::pair<const Tensor*, const LabelMap*>>& items,
                  const SceneSpec& spec) {
    fs::create_directories(dir);
    json manifest;
    manifest["kind"] = kind;
    manifest["count"] = items.size();
    manifest["seed"] = spec.seed;
    manifest["classes"] = kNumClasses;
    manifest["target_style"] = {{"hue_shift", spec.target_style.hue_shift},
                                {"noise_sigma", spec.target_style.noise_sigma},
                                {"contrast", spec.target_style.contrast}};
    json files = json::array();
    for (std::size_t i = 0; i < items.size(); ++i) {
        const std::string img = index_name("img", static_cast<int>(i));
        const std::string lab = index_name("lab", static_cast<int>(i));
        write_rgb_png((fs::path(dir) / img).string(), *items[i].first);
        write_gray_png((fs::path(dir) / lab).string(), *items[i].second);
        files.push_back({{"image", img}, {"labels", lab}});
    }
    manifest["files"] = std::move(files);
    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

json load_manifest(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw IoError("missing manifest.json in " + dir);
    json manifest;
    is >> manifest;
    return manifest;
}

}  // namespace

void save_erp_dataset(const std::string& dir, const std::vector<ErpImage>& images,
                      const SceneSpec& spec) {
    std::vector<std::pair<const Tensor*, const LabelMap*>> items;
    for (const auto& img : images) {
        if (!img.labels) throw DataError("save_erp_dataset: image lacks labels");
        items.emplace_back(&img.pixels, &*img.labels);
    }
    save_dataset(dir, "erp", items, spec);
}

void save_crop_dataset(const std::string& dir, const std::vector<LabeledImage>& crops,
                       const SceneSpec& spec) {
    std::vector<std::pair<const Tensor*, const LabelMap*>> items;
    for (const auto& crop : crops) items.emplace_back(&crop.image, &crop.labels);
    save_dataset(dir, "pinhole", items, spec);
}

std::vector<ErpImage> load_erp_dataset(const std::string& dir) {
    const json manifest = load_manifest(dir);
    std::vector<ErpImage> out;
    for (const auto& entry : manifest.at("files")) {
        Tensor pixels = read_rgb_png((fs::path(dir) / entry.at("image").get<std::string>()).string());
        LabelMap labels = read_gray_png((fs::path(dir) / entry.at("labels").get<std::string>()).string());
        out.push_back(ErpImage::make(std::move(pixels), std::move(labels)));
    }
    if (out.empty()) throw DataError(dir + ": dataset is empty");
    return out;
}

std::vector<LabeledImage> load_crop_dataset(const std::string& dir) {
    const json manifest = load_manifest(dir);
    std::vector<LabeledImage> out;
    for (const auto& entry : manifest.at("files")) {
        LabeledImage item;
        item.image = read_rgb_png((fs::path(dir) / entry.at("image").get<std::string>()).string());
        item.labels = read_gray_png((fs::path(dir) / entry.at("labels").get<std::string>()).string());
        out.push_back(std::move(item));
    }
    if (out.empty()) throw DataError(dir + ": dataset is empty");
    return out;
}

}  // namespace pano
