#pragma once

#include <string>
#include <vector>

#include "pano/model.hpp"
#include "pano/projection.hpp"

namespace pano {

inline constexpr int kNumClasses = 5;
enum ClassId : std::uint8_t { kSky = 0, kGround = 1, kBuilding = 2, kObject = 3, kRoad = 4 };

// Per-domain appearance shift.
struct StyleParams {
    float hue_shift = 0.0f;
    float noise_sigma = 0.0f;
    float contrast = 1.0f;
};

struct SceneSpec {
    unsigned seed = 7;
    StyleParams source_style{};                  // neutral pinhole domain
    StyleParams target_style{0.1f, 0.02f, 1.15f};  // panoramic domain shift
};

// Scene content placed in spherical coordinates so ERP rasterization picks
// up the polar distortion for free.
struct SceneGeometry {
    double horizon_lat = 0.0;
    double road_lon = 0.0;
    double road_half_width = 0.0;
    struct Building {
        double lon;
        double half_w;
        double top_lat;
    };
    std::vector<Building> buildings;
    struct Blob {
        double lat;
        double lon;
        double radius;
    };
    std::vector<Blob> objects;
};

SceneGeometry scene_geometry(unsigned seed);
std::uint8_t class_at(const SceneGeometry& g, double lat, double lon);

// Rasterizes the seeded scene to a labeled ERP. Width must be divisible by
// 8 and by 4. target_style selects the panoramic-domain appearance.
ErpImage generate_erp(const SceneSpec& spec, int height, int width, bool target_style = true);

// Deterministic per-crop view parameters; exposed so tests can rebuild the
// exact grid a crop was sampled through.
struct CropView {
    SceneSpec scene;      // per-crop scene seed
    SphereCoord center;
    double fov = deg_to_rad(70.0);
    int erp_h = 128;
    int erp_w = 512;
};
CropView pinhole_crop_view(const SceneSpec& spec, int index);

// Gnomonic 70-degree views of seeded scenes in the source style; labels are
// nearest-neighbor projections of the scene's ERP label map.
std::vector<LabeledImage> generate_pinhole_crops(const SceneSpec& spec, int n, int size);

// ---- dataset directories (paired image/label PNGs + manifest.json) ----

void save_erp_dataset(const std::string& dir, const std::vector<ErpImage>& images,
                      const SceneSpec& spec);
void save_crop_dataset(const std::string& dir, const std::vector<LabeledImage>& crops,
                       const SceneSpec& spec);
std::vector<ErpImage> load_erp_dataset(const std::string& dir);
std::vector<LabeledImage> load_crop_dataset(const std::string& dir);

}  // namespace pano
