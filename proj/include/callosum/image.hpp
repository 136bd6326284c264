#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace callosum {

// 8-bit single-channel raster, row-major.
struct Image8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;

    Image8() = default;
    Image8(int w, int h, uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<size_t>(w) * h, fill) {}

    uint8_t& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return pixels.size(); }
};

// Per-pixel semantic labels: 0 background, 1 myelinated axon, 2 myelin sheath.
struct ClassMask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> values;

    ClassMask() = default;
    ClassMask(int w, int h, uint8_t fill = 0)
        : width(w), height(h), values(static_cast<size_t>(w) * h, fill) {}

    uint8_t& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return values.size(); }
};

inline constexpr uint8_t kClassBackground = 0;
inline constexpr uint8_t kClassAxon = 1;
inline constexpr uint8_t kClassMyelin = 2;

// Two-channel per-pixel scores in [0,1]: model output for axon and myelin.
struct ProbabilityPair {
    int width = 0;
    int height = 0;
    std::vector<float> axon;
    std::vector<float> myelin;

    ProbabilityPair() = default;
    ProbabilityPair(int w, int h)
        : width(w), height(h),
          axon(static_cast<size_t>(w) * h, 0.f),
          myelin(static_cast<size_t>(w) * h, 0.f) {}
};

// Boolean grid at metric-patch resolution; true = inside the region of
// interest (corpus callosum in the intended workflow).
struct RoiMask {
    int gx = 0;
    int gy = 0;
    std::vector<uint8_t> inside;

    RoiMask() = default;
    RoiMask(int gx_, int gy_, bool fill = true)
        : gx(gx_), gy(gy_), inside(static_cast<size_t>(gx_) * gy_, fill ? 1 : 0) {}

    bool at(int x, int y) const { return inside[static_cast<size_t>(y) * gx + x] != 0; }
};

// Binary PGM (P5, maxval 255). Writes are atomic: temp file then rename.
Image8 read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image8& img);

ClassMask mask_from_image(const Image8& img); // validates values in {0,1,2}
Image8 image_from_mask(const ClassMask& mask);

RoiMask roi_from_image(const Image8& img); // nonzero = inside

} // namespace callosum
