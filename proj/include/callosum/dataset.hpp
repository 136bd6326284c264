#pragma once

#include "callosum/image.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace callosum {

enum class SplitTag { train, val, test, unassigned };

const char* split_name(SplitTag tag);
std::optional<SplitTag> parse_split(const std::string& s);

struct PatchCoord {
    int ix = 0;
    int iy = 0;
    auto operator<=>(const PatchCoord&) const = default;
};

struct ManifestEntry {
    std::string image_path;          // relative to the manifest directory
    std::string label_path;          // empty = no label
    SplitTag split = SplitTag::unassigned;
    bool annotated = false;

    bool operator==(const ManifestEntry&) const = default;
};

// Row-major ordering so saved manifests list entries in scan order.
struct RowMajorLess {
    bool operator()(const PatchCoord& a, const PatchCoord& b) const {
        if (a.iy != b.iy) return a.iy < b.iy;
        return a.ix < b.ix;
    }
};

// The patch-grid index of a gigapixel slide.
struct MosaicManifest {
    int grid_nx = 0;
    int grid_ny = 0;
    int patch_px = 0;
    double pixel_nm = 0.0;
    std::map<PatchCoord, ManifestEntry, RowMajorLess> entries;
    std::filesystem::path base_dir; // directory of the manifest file, not serialized

    const ManifestEntry* find(int ix, int iy) const;
    ManifestEntry* find(int ix, int iy);
    std::filesystem::path resolve(const std::string& rel) const;
    void validate() const; // throws DataError on any invariant violation

    bool same_content(const MosaicManifest& other) const; // ignores base_dir
};

// Line-oriented tab-separated manifest:
//   CALLOSUM-MANIFEST v1 <grid_nx> <grid_ny> <patch_px> <pixel_nm>
//   ix<TAB>iy<TAB>image_path<TAB>label_path_or_dash<TAB>split_tag<TAB>annotated_0_or_1
MosaicManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const MosaicManifest& m, const std::filesystem::path& path); // atomic

struct YRange {
    int begin = 0;
    int end = 0; // exclusive
    bool empty() const { return end <= begin; }
};

// Tags entries with iy in the genu/body/splenium ranges as train/val/test;
// everything else becomes unassigned. Ranges must be disjoint and in bounds.
void assign_splits(MosaicManifest& m, YRange genu, YRange body, YRange splenium,
                   std::vector<std::string>* warnings = nullptr);

Image8 read_patch(const MosaicManifest& m, int ix, int iy);
ClassMask read_label(const MosaicManifest& m, int ix, int iy);

// Writes the label image for an entry that already has a label_path.
void write_label(const MosaicManifest& m, int ix, int iy, const ClassMask& mask);

// Majority vote over factor x factor blocks; ties prefer the higher class id
// so thin myelin survives reduction.
ClassMask downsample_labels(const ClassMask& mask, int factor);

} // namespace callosum
