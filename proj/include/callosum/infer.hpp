#pragma once

#include "callosum/dataset.hpp"
#include "callosum/image.hpp"
#include "callosum/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace callosum {

struct TileOrigin {
    int x = 0;
    int y = 0;
    bool operator==(const TileOrigin&) const = default;
};

// Row-major tile layout over a region. Origins are clamped so tiles stay
// inside the region wherever it is at least one tile wide; smaller regions
// get a single tile and reflective padding at predict time.
struct TilingPlan {
    int region_w = 0;
    int region_h = 0;
    int tile_px = 0;
    int stride_px = 0;
    int trim_px = 0; // zero-weight border band of interior tile edges
    std::vector<TileOrigin> origins;
};

TilingPlan plan_tiles(int region_w, int region_h, int tile_px, int stride_px);

// Raw (unnormalized) blend weight of a tile at region pixel (px, py); zero
// outside the tile and in trimmed bands. Tile edges on the region border
// keep their weight so every pixel has a positive-weight cover. Stitching
// normalizes per pixel, so effective weights always sum to 1.
double raw_weight(const TilingPlan& plan, size_t tile_index, int px, int py);

// Anything that can score one tile; lets tests swap the network for cheap
// fixed filters.
class TilePredictor {
  public:
    virtual ~TilePredictor() = default;
    virtual int tile_px() const = 0;
    virtual ProbabilityPair predict_tile(const Image8& tile) = 0;
};

class ModelTilePredictor : public TilePredictor {
  public:
    explicit ModelTilePredictor(const SegModel& model) : model_(&model) {}
    int tile_px() const override { return model_->config().input_px; }
    ProbabilityPair predict_tile(const Image8& tile) override;

  private:
    const SegModel* model_;
    std::vector<float> gray_;
    std::vector<float> probs_;
};

// Tiled inference over one region image: reflect-pads tiles that overhang,
// scores them in row-major order and blends overlaps. Where all covering
// tiles agree the blend returns that value bit-exactly.
ProbabilityPair predict_image(TilePredictor& pred, const Image8& region, int stride_px);

// Assembles patches [ix0, ix1) x [iy0, iy1) from the manifest and runs
// predict_image on the composed region.
ProbabilityPair predict_region(TilePredictor& pred, const MosaicManifest& m, int ix0, int ix1,
                               int iy0, int iy1, int stride_px);

// Sliding-band annotation bookkeeping, in patch rows. The pending band has
// been exported for proofreading but not ingested yet; proofread rows are
// the ingested bands and always lie inside the annotated range.
struct BandState {
    int annotated_begin = 0;
    int annotated_end = 0;
    int pending_begin = 0;
    int pending_end = 0;
    int proofread_begin = 0;
    int proofread_end = 0;
    int iteration = 0;

    bool pending_empty() const { return pending_end <= pending_begin; }
    void validate(int grid_ny) const; // throws DataError
    bool operator==(const BandState&) const = default;
};

void save_band_state(const BandState& state, const std::filesystem::path& path); // atomic
BandState load_band_state(const std::filesystem::path& path, int grid_ny);

struct BandExport {
    BandState state;
    std::filesystem::path band_dir; // empty when done
    bool done = false;              // no rows left to expand
    std::string notice;             // e.g. band clipped at the grid edge
};

// Predicts the next band_rows patch rows below the annotated range across
// the full grid width, thresholds to class masks and writes one
// pred_<ix>_<iy>.pgm per patch plus a BAND-INFO v1 sidecar into
// out_dir/band_<iteration>_<y0>_<y1>/. The manifest is not touched; rows
// become annotated only when the proofread files are ingested.
BandExport expand_band(TilePredictor& pred, const MosaicManifest& m, const BandState& state,
                       int band_rows, float threshold, int stride_px,
                       const std::filesystem::path& out_dir, const std::string& snapshot_id);

// Validates every corrected file of the pending band first (existence,
// size, class values) and reports all problems in one error, leaving the
// manifest and state untouched. Then copies the labels into the mosaic's
// labels/ directory, marks the rows annotated + proofread and rewrites the
// manifest atomically.
BandState ingest_corrections(MosaicManifest& m, const BandState& state,
                             const std::filesystem::path& corrected_dir,
                             const std::filesystem::path& manifest_path);

} // namespace callosum
