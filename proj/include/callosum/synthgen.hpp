#pragma once

#include "callosum/dataset.hpp"
#include "callosum/image.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace callosum {

// Parameters for one synthetic patch. Fibers are circles or, with
// elongation_prob, capsules (rectangle with semicircular caps) at random
// orientation. Placement uses rejection sampling; fibers never touch.
struct SyntheticSceneSpec {
    int patch_px = 512;
    int fiber_count = 0;
    double inner_radius_min = 6.0;
    double inner_radius_max = 14.0;
    double g_ratio_min = 0.55;
    double g_ratio_max = 0.75;
    double elongation_prob = 0.0;
    double node_prob = 0.0;
    double demyelination_prob = 0.0;
    double noise_level = 2.0;
    uint64_t seed = 0;

    // shape tunables
    double node_arc_deg = 30.0;      // full-thickness sheath gap
    double thinning_fraction = 0.3;  // residual thickness on the thinned half
    double min_gap_px = 2.0;         // clearance between outer boundaries
    int max_retries = 1000;          // per fiber, then infeasible-packing error

    void validate() const; // throws DataError
};

// Ground truth for one placed fiber. Areas are exact rasterized pixel
// counts, so summing them reproduces the mask's per-class totals.
struct FiberRecord {
    double cx = 0.0;
    double cy = 0.0;
    double orientation = 0.0; // radians, 0 for circles
    double inner_radius = 0.0;
    double outer_radius = 0.0;
    double half_length = 0.0; // straight-section half length, 0 for circles
    bool elongated = false;
    bool node = false;
    bool demyelinated = false;
    int64_t axon_area_px = 0;
    int64_t myelin_area_px = 0;

    double g_ratio() const { return inner_radius / outer_radius; }
};

struct SyntheticScene {
    Image8 image;
    ClassMask mask;
    std::vector<FiberRecord> fibers;
};

// Deterministic for a fixed spec (including seed).
SyntheticScene generate_scene(const SyntheticSceneSpec& spec);

// Generates one scene per grid cell (row-major specs, grid_nx * grid_ny of
// them, all with the same patch_px), writes images/, labels/, fibers.csv and
// manifest.txt under out_dir, and returns the manifest. Cells are
// independent scenes; distinct cells may be generated in parallel.
MosaicManifest generate_mosaic(const std::vector<SyntheticSceneSpec>& specs, int grid_nx,
                               int grid_ny, double pixel_nm,
                               const std::filesystem::path& out_dir);

// fibers.csv row order matches the manifest (row-major cells, then fiber id).
std::vector<std::pair<PatchCoord, FiberRecord>> load_fiber_records(
    const std::filesystem::path& csv_path);

} // namespace callosum
