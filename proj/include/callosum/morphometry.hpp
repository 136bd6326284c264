#pragma once

#include "callosum/dataset.hpp"
#include "callosum/image.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace callosum {

// Geometry of the metric grid over the downsampled slide.
struct MetricGridSpec {
    int metric_patch_px = 1024;
    int downsample_factor = 4;
    int down_width = 0;  // downsampled slide extent, px
    int down_height = 0;
    int gx = 0; // ceil(down extent / metric_patch_px)
    int gy = 0;

    struct CellRect {
        int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // downsampled px, half-open
        int width() const { return x1 - x0; }
        int height() const { return y1 - y0; }
        int64_t area() const { return static_cast<int64_t>(width()) * height(); }
    };
    CellRect cell_rect(int cx, int cy) const;

    double pitch_nm(double native_pixel_nm) const { return native_pixel_nm * downsample_factor; }
};

MetricGridSpec make_metric_grid(const MosaicManifest& m, int metric_patch_px,
                                int downsample_factor);

// 8-connected components of one class; label 0 is "not this class".
struct LabeledComponents {
    int width = 0;
    int height = 0;
    std::vector<int32_t> labels;
    std::vector<int64_t> areas; // areas[l-1] for label l

    int count() const { return static_cast<int>(areas.size()); }
};

LabeledComponents label_components(const ClassMask& mask, uint8_t class_id);

// sqrt(4 * area / pi)
double equivalent_diameter(int64_t area_px);

struct MorphometryRecord {
    bool computed = false; // false = cell not processed yet (resume support)
    bool roi = false;
    int64_t density = 0;      // axon components at or above the area filter
    double diam_mean = 0.0;   // px at metric pitch, valid iff density > 0
    double diam_std = 0.0;    // population std, valid iff density > 0
    double avf = 0.0;         // raw pixel ratios, unfiltered
    double mvf = 0.0;
    bool has_g = false;       // g undefined when avf == 0
    double g_ratio = 0.0;     // 1/sqrt(1 + mvf/avf)
    int64_t axon_px = 0;
    int64_t myelin_px = 0;
    int64_t total_px = 0;
};

// min_component_area filters density and the diameter stats only; avf/mvf
// are raw pixel ratios either way.
MorphometryRecord patch_metrics(const ClassMask& cell, bool roi, int min_component_area = 4);

struct MorphometryOptions {
    int metric_patch_px = 1024;
    int downsample_factor = 4;
    int min_component_area = 4;
};

struct SlideMorphometry {
    MetricGridSpec grid;
    std::vector<MorphometryRecord> records; // gy * gx, row-major

    MorphometryRecord& at(int cx, int cy) { return records[static_cast<size_t>(cy) * grid.gx + cx]; }
    const MorphometryRecord& at(int cx, int cy) const {
        return records[static_cast<size_t>(cy) * grid.gx + cx];
    }

    int64_t roi_cells() const;
    // aggregate whole-slide g-ratio from pooled pixel counts over ROI cells
    bool mean_g_ratio(double& out) const;
};

// Computes every ROI cell; cells already computed in `resume_from` (if given)
// are copied instead of recomputed. When checkpoint_csv is set, the record
// table is re-written atomically after every metric row, so an interrupted
// run loses at most one row of work. Missing labels for patches covering ROI
// cells are enumerated in one error before any computation.
SlideMorphometry slide_morphometry(const MosaicManifest& m, const MorphometryOptions& opt,
                                   const RoiMask& roi, int workers,
                                   const SlideMorphometry* resume_from = nullptr,
                                   const std::filesystem::path* checkpoint_csv = nullptr);

// `gx,gy,diam_mean,diam_std,density,avf,mvf,g_ratio,roi`; dash for absent
// fields; one row per computed cell, row-major.
std::string records_csv(const SlideMorphometry& s);
SlideMorphometry load_records_csv(const std::filesystem::path& path, const MetricGridSpec& grid);

// `SLIDE-SUMMARY v1 mean_g_ratio=<v> roi_cells=<n>`
std::string slide_summary(const SlideMorphometry& s);

struct DistributionMap {
    std::string name;
    int gx = 0;
    int gy = 0;
    std::vector<double> raw;        // undefined where !present
    std::vector<uint8_t> present;
    std::vector<double> normalized; // (v-min)/(max-min); constant map -> zeros
};

// Max-min normalization over present cells; errors when none are present.
DistributionMap normalize_map(const std::string& name, int gx, int gy,
                              const std::vector<double>& raw,
                              const std::vector<uint8_t>& present);

// Writes map_<metric>.pgm (pixel = round(255 * normalized), absent cells 0)
// and raw_<metric>.csv (grid of values, dash where absent) for diam_mean,
// diam_std, density, avf, mvf, g_ratio.
void render_maps(const SlideMorphometry& s, const std::filesystem::path& out_dir);

} // namespace callosum
