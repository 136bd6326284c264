#include <doctest.h>

#include "callosum/errors.hpp"
#include "callosum/infer.hpp"
#include "callosum/rng.hpp"
#include "callosum/synthgen.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace callosum;

namespace {

std::filesystem::path infer_tmp_dir(const std::string& leaf) {
    auto dir = std::filesystem::temp_directory_path() / "callosum_infer_tests" / leaf;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

int reflect101(int c, int n) {
    if (n == 1) return 0;
    while (c < 0 || c >= n) {
        if (c < 0) c = -c;
        if (c >= n) c = 2 * (n - 1) - c;
    }
    return c;
}

// Box mean over (2r+1)^2 with reflect-101 padding; axon = mean/255.
ProbabilityPair box_filter(const Image8& img, int radius) {
    ProbabilityPair out(img.width, img.height);
    const int d = 2 * radius + 1;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double sum = 0.0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx)
                    sum += img.at(reflect101(x + dx, img.width), reflect101(y + dy, img.height));
            float a = static_cast<float>(sum / (d * d * 255.0));
            out.axon[static_cast<size_t>(y) * img.width + x] = a;
            out.myelin[static_cast<size_t>(y) * img.width + x] = 1.f - a;
        }
    return out;
}

struct BoxPredictor : TilePredictor {
    int tile;
    int radius;
    BoxPredictor(int t, int r) : tile(t), radius(r) {}
    int tile_px() const override { return tile; }
    ProbabilityPair predict_tile(const Image8& t) override { return box_filter(t, radius); }
};

// Deterministic content-dependent scores, recorded per call so tests can
// recompute the blend by hand.
struct RecordingPredictor : TilePredictor {
    int tile;
    std::vector<ProbabilityPair> outputs;
    explicit RecordingPredictor(int t) : tile(t) {}
    int tile_px() const override { return tile; }
    ProbabilityPair predict_tile(const Image8& t) override {
        ProbabilityPair o(tile, tile);
        for (size_t i = 0; i < t.pixels.size(); ++i) {
            o.axon[i] = static_cast<float>((t.pixels[i] * 31 + i * 7) % 101) / 100.f;
            o.myelin[i] = static_cast<float>((t.pixels[i] * 13 + i * 3) % 97) / 96.f;
        }
        outputs.push_back(o);
        return o;
    }
};

Image8 noise_image(int w, int h, uint64_t seed) {
    Image8 img(w, h);
    Rng rng(seed);
    for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.int_range(0, 255));
    return img;
}

MosaicManifest make_band_mosaic(const std::filesystem::path& dir, int nx, int ny) {
    std::vector<SyntheticSceneSpec> specs;
    for (int i = 0; i < nx * ny; ++i) {
        SyntheticSceneSpec spec;
        spec.patch_px = 32;
        spec.fiber_count = 1;
        spec.inner_radius_min = 3.0;
        spec.inner_radius_max = 5.0;
        spec.seed = 7000 + static_cast<uint64_t>(i);
        specs.push_back(spec);
    }
    return generate_mosaic(specs, nx, ny, 8.0, dir);
}

} // namespace

TEST_CASE("tiling plans") {
    SUBCASE("exact fit is a single full-weight tile") {
        TilingPlan plan = plan_tiles(1024, 1024, 1024, 1024);
        REQUIRE(plan.origins.size() == 1);
        CHECK(plan.origins[0] == TileOrigin{0, 0});
        for (int p : {0, 1, 511, 1023}) {
            double w = raw_weight(plan, 0, p, p);
            CHECK(w > 0.0);
            CHECK(w / w == doctest::Approx(1.0)); // sole cover normalizes to 1
        }
    }

    SUBCASE("1024x1536 at stride 512 tiles vertically") {
        TilingPlan plan = plan_tiles(1024, 1536, 1024, 512);
        REQUIRE(plan.origins.size() == 2);
        CHECK(plan.origins[0] == TileOrigin{0, 0});
        CHECK(plan.origins[1] == TileOrigin{0, 512});
    }

    SUBCASE("row-major origin order") {
        TilingPlan plan = plan_tiles(96, 96, 64, 32);
        REQUIRE(plan.origins.size() == 4);
        CHECK(plan.origins[0] == TileOrigin{0, 0});
        CHECK(plan.origins[1] == TileOrigin{32, 0});
        CHECK(plan.origins[2] == TileOrigin{0, 32});
        CHECK(plan.origins[3] == TileOrigin{32, 32});
    }

    SUBCASE("region smaller than the tile gets one padded tile") {
        TilingPlan plan = plan_tiles(100, 100, 1024, 512);
        REQUIRE(plan.origins.size() == 1);
        CHECK(plan.origins[0] == TileOrigin{0, 0});
    }

    SUBCASE("invalid parameters") {
        CHECK_THROWS_AS(plan_tiles(0, 100, 64, 32), UsageError);
        CHECK_THROWS_AS(plan_tiles(100, 100, 0, 32), UsageError);
        CHECK_THROWS_AS(plan_tiles(100, 100, 64, 0), UsageError);
        CHECK_THROWS_AS(plan_tiles(100, 100, 64, -5), UsageError);
        CHECK_THROWS_AS(plan_tiles(100, 100, 64, 65), UsageError);
    }

    SUBCASE("every pixel has positive total weight that normalizes to 1") {
        for (auto [w, h, tile, stride] :
             {std::array<int, 4>{96, 160, 64, 32}, std::array<int, 4>{70, 45, 64, 48},
              std::array<int, 4>{128, 128, 64, 64}, std::array<int, 4>{130, 70, 64, 40}}) {
            TilingPlan plan = plan_tiles(w, h, tile, stride);
            for (int py = 0; py < h; ++py)
                for (int px = 0; px < w; ++px) {
                    double total = 0.0;
                    for (size_t t = 0; t < plan.origins.size(); ++t)
                        total += raw_weight(plan, t, px, py);
                    REQUIRE(total > 0.0);
                    double effective = 0.0;
                    for (size_t t = 0; t < plan.origins.size(); ++t)
                        effective += raw_weight(plan, t, px, py) / total;
                    REQUIRE(effective == doctest::Approx(1.0).epsilon(1e-6));
                }
        }
    }

    SUBCASE("interior tile edges carry zero weight in the trim band") {
        TilingPlan plan = plan_tiles(128, 64, 64, 32);
        CHECK(plan.trim_px == 8);
        // middle tile along x starts at 32
        REQUIRE(plan.origins.size() == 3);
        CHECK(plan.origins[1] == TileOrigin{32, 0});
        CHECK(raw_weight(plan, 1, 32 + 3, 30) == 0.0);
        CHECK(raw_weight(plan, 1, 32 + 8, 30) > 0.0);
        CHECK(raw_weight(plan, 1, 32 + 55, 30) > 0.0);
        CHECK(raw_weight(plan, 1, 32 + 56, 30) == 0.0);
        // but the first tile keeps weight at the region border
        CHECK(raw_weight(plan, 0, 0, 30) > 0.0);
    }
}

TEST_CASE("predict_image invariants") {
    SUBCASE("constant region comes out constant") {
        Image8 region(48, 80, 200);
        BoxPredictor pred(32, 2);
        ProbabilityPair out = predict_image(pred, region, 16);
        const float expect = static_cast<float>(200.0 * 25 / (25 * 255.0));
        for (float a : out.axon) CHECK(a == expect);
        for (float m : out.myelin) CHECK(m == 1.f - expect);
    }

    SUBCASE("region equal to one tile is the tile prediction") {
        Image8 region = noise_image(32, 32, 5);
        BoxPredictor pred(32, 2);
        ProbabilityPair direct = pred.predict_tile(region);
        ProbabilityPair out = predict_image(pred, region, 32);
        CHECK(std::memcmp(out.axon.data(), direct.axon.data(), out.axon.size() * 4) == 0);
        CHECK(std::memcmp(out.myelin.data(), direct.myelin.data(), out.myelin.size() * 4) == 0);
    }

    SUBCASE("stride equal to tile concatenates tile outputs") {
        Image8 region = noise_image(64, 64, 6);
        BoxPredictor pred(32, 1);
        ProbabilityPair out = predict_image(pred, region, 32);
        for (int ty : {0, 32})
            for (int tx : {0, 32}) {
                Image8 tile(32, 32);
                for (int y = 0; y < 32; ++y)
                    for (int x = 0; x < 32; ++x) tile.at(x, y) = region.at(tx + x, ty + y);
                ProbabilityPair tp = pred.predict_tile(tile);
                for (int y = 0; y < 32; ++y)
                    for (int x = 0; x < 32; ++x) {
                        size_t ridx = static_cast<size_t>(ty + y) * 64 + tx + x;
                        size_t tidx = static_cast<size_t>(y) * 32 + x;
                        REQUIRE(out.axon[ridx] == tp.axon[tidx]);
                        REQUIRE(out.myelin[ridx] == tp.myelin[tidx]);
                    }
            }
    }

    SUBCASE("overlap column matches a by-hand weighted average of recorded outputs") {
        Image8 region = noise_image(64, 32, 7);
        RecordingPredictor pred(32);
        ProbabilityPair out = predict_image(pred, region, 16);
        TilingPlan plan = plan_tiles(64, 32, 32, 16);
        REQUIRE(pred.outputs.size() == plan.origins.size());

        for (int py = 0; py < 32; ++py)
            for (int px = 0; px < 64; ++px) {
                double num = 0.0, den = 0.0;
                float base = 0.f;
                bool has_base = false;
                for (size_t t = 0; t < plan.origins.size(); ++t) {
                    double w = raw_weight(plan, t, px, py);
                    if (w <= 0.0) continue;
                    int u = px - plan.origins[t].x;
                    int v = py - plan.origins[t].y;
                    float val = pred.outputs[t].axon[static_cast<size_t>(v) * 32 + u];
                    if (!has_base) {
                        has_base = true;
                        base = val;
                    }
                    num += w * (static_cast<double>(val) - base);
                    den += w;
                }
                REQUIRE(has_base);
                float expect = static_cast<float>(
                    std::clamp(static_cast<double>(base) + num / den, 0.0, 1.0));
                REQUIRE(out.axon[static_cast<size_t>(py) * 64 + px] == expect);
            }
    }

    SUBCASE("repeated runs are bit-identical") {
        Image8 region = noise_image(96, 64, 8);
        BoxPredictor pred(32, 2);
        ProbabilityPair a = predict_image(pred, region, 16);
        ProbabilityPair b = predict_image(pred, region, 16);
        CHECK(std::memcmp(a.axon.data(), b.axon.data(), a.axon.size() * 4) == 0);
        CHECK(std::memcmp(a.myelin.data(), b.myelin.data(), a.myelin.size() * 4) == 0);
    }

    SUBCASE("region smaller than the tile is padded reflectively") {
        Image8 region = noise_image(20, 12, 9);
        BoxPredictor pred(32, 1);
        ProbabilityPair out = predict_image(pred, region, 32);
        CHECK(out.width == 20);
        CHECK(out.height == 12);
        Image8 padded(32, 32);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                padded.at(x, y) = region.at(reflect101(x, 20), reflect101(y, 12));
        ProbabilityPair tp = pred.predict_tile(padded);
        for (int y = 0; y < 12; ++y)
            for (int x = 0; x < 20; ++x)
                REQUIRE(out.axon[static_cast<size_t>(y) * 20 + x] ==
                        tp.axon[static_cast<size_t>(y) * 32 + x]);
    }
}

TEST_CASE("tiled prediction matches the whole-image result away from borders") {
    Image8 region = noise_image(96, 96, 11);
    BoxPredictor pred(32, 3);
    ProbabilityPair whole = box_filter(region, 3);
    ProbabilityPair tiled = predict_image(pred, region, 16);

    const int margin = 32 / 4;
    int checked = 0;
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x) {
            if (x < margin || y < margin || x >= 96 - margin || y >= 96 - margin) continue;
            size_t i = static_cast<size_t>(y) * 96 + x;
            REQUIRE(tiled.axon[i] == whole.axon[i]);
            REQUIRE(tiled.myelin[i] == whole.myelin[i]);
            ++checked;
        }
    CHECK(checked == 80 * 80);
}

TEST_CASE("predict_region assembles patches from the manifest") {
    auto dir = infer_tmp_dir("region");
    MosaicManifest m = make_band_mosaic(dir, 2, 2);

    Image8 composed(64, 64);
    for (int iy = 0; iy < 2; ++iy)
        for (int ix = 0; ix < 2; ++ix) {
            Image8 patch = read_patch(m, ix, iy);
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    composed.at(ix * 32 + x, iy * 32 + y) = patch.at(x, y);
        }

    BoxPredictor pred(32, 2);
    ProbabilityPair via_region = predict_region(pred, m, 0, 2, 0, 2, 16);
    ProbabilityPair via_image = predict_image(pred, composed, 16);
    CHECK(std::memcmp(via_region.axon.data(), via_image.axon.data(),
                      via_region.axon.size() * 4) == 0);

    CHECK_THROWS_AS(predict_region(pred, m, 0, 3, 0, 2, 16), UsageError);
    CHECK_THROWS_AS(predict_region(pred, m, 1, 1, 0, 2, 16), UsageError);

    MosaicManifest holey = m;
    holey.entries.erase(PatchCoord{1, 1});
    CHECK_THROWS_AS(predict_region(pred, holey, 0, 2, 0, 2, 16), DataError);
}

TEST_CASE("band state validation and persistence") {
    BandState st;
    st.annotated_end = 4;
    st.pending_begin = 4;
    st.pending_end = 6;
    st.proofread_begin = 2;
    st.proofread_end = 4;
    st.iteration = 3;
    CHECK_NOTHROW(st.validate(10));

    BandState bad = st;
    bad.pending_begin = 5; // gap between annotated edge and band
    CHECK_THROWS_AS(bad.validate(10), DataError);

    bad = st;
    bad.proofread_end = 5; // outside annotated
    CHECK_THROWS_AS(bad.validate(10), DataError);

    bad = st;
    bad.pending_end = 11;
    CHECK_THROWS_AS(bad.validate(10), DataError);

    bad = st;
    bad.annotated_begin = -1;
    CHECK_THROWS_AS(bad.validate(10), DataError);

    auto dir = infer_tmp_dir("state");
    save_band_state(st, dir / "band.state");
    BandState loaded = load_band_state(dir / "band.state", 10);
    CHECK(loaded == st);
    CHECK(!std::filesystem::exists(dir / "band.state.tmp"));

    std::ofstream(dir / "junk.state") << "BAND-STATE v2\n";
    CHECK_THROWS_AS(load_band_state(dir / "junk.state", 10), DataError);
    std::ofstream(dir / "short.state") << "BAND-STATE v1\nannotated 0 2\n";
    CHECK_THROWS_AS(load_band_state(dir / "short.state", 10), DataError);
    CHECK_THROWS_AS(load_band_state(dir / "absent.state", 10), DataError);
}

TEST_CASE("band expansion cycle") {
    auto dir = infer_tmp_dir("band");
    MosaicManifest m = make_band_mosaic(dir, 2, 5);
    // rows >= 2 start unannotated, as on a fresh slide
    for (auto& [coord, entry] : m.entries)
        if (coord.iy >= 2) {
            entry.annotated = false;
            entry.label_path.clear();
        }
    const auto manifest_path = dir / "manifest.txt";
    save_manifest(m, manifest_path);

    BandState st;
    st.annotated_end = 2;

    BoxPredictor pred(32, 2);
    auto bands_dir = dir / "bands";

    SUBCASE("export then ingest advances the state") {
        BandExport ex = expand_band(pred, m, st, 2, 0.5f, 16, bands_dir, "snap-1");
        CHECK(!ex.done);
        CHECK(ex.notice.empty());
        CHECK(ex.state.pending_begin == 2);
        CHECK(ex.state.pending_end == 4);
        CHECK(ex.state.annotated_end == 2);
        CHECK(ex.state.iteration == 1);
        CHECK(ex.band_dir.filename().string() == "band_000_2_4");

        for (int iy : {2, 3})
            for (int ix : {0, 1})
                CHECK(std::filesystem::exists(
                    ex.band_dir / ("pred_" + std::to_string(ix) + "_" + std::to_string(iy) + ".pgm")));

        std::ifstream info(ex.band_dir / "BAND-INFO");
        REQUIRE(info.good());
        std::stringstream content;
        content << info.rdbuf();
        std::string text = content.str();
        CHECK(text.find("BAND-INFO v1\n") == 0);
        CHECK(text.find("y_begin 2\n") != std::string::npos);
        CHECK(text.find("y_end 4\n") != std::string::npos);
        CHECK(text.find("threshold 0.5\n") != std::string::npos);
        CHECK(text.find("snapshot snap-1\n") != std::string::npos);
        CHECK(text.find("pixel_nm 8\n") != std::string::npos);
        CHECK(text.find("stride_px 16\n") != std::string::npos);

        // exported predictions are valid class masks
        ClassMask one = mask_from_image(read_pgm(ex.band_dir / "pred_0_2.pgm"));
        CHECK(one.width == 32);

        // the manifest was not touched by the export
        MosaicManifest on_disk = load_manifest(manifest_path);
        CHECK(!on_disk.find(0, 2)->annotated);

        // a second export before ingest is rejected
        CHECK_THROWS_AS(expand_band(pred, m, ex.state, 2, 0.5f, 16, bands_dir, "snap-1"),
                        UsageError);

        // accepted corrections: the exported files themselves
        BandState ingested = ingest_corrections(m, ex.state, ex.band_dir, manifest_path);
        CHECK(ingested.annotated_end == 4);
        CHECK(ingested.pending_empty());
        CHECK(ingested.proofread_begin == 2);
        CHECK(ingested.proofread_end == 4);
        CHECK_NOTHROW(ingested.validate(5));

        MosaicManifest after = load_manifest(manifest_path);
        CHECK(after.find(1, 3)->annotated);
        CHECK(after.find(1, 3)->label_path == "labels/label_1_3.pgm");
        ClassMask stored = read_label(after, 0, 2);
        CHECK(stored.values == one.values);
        CHECK(!after.find(0, 4)->annotated);

        // next band is clipped at the grid edge
        BandExport ex2 = expand_band(pred, m, ingested, 2, 0.5f, 16, bands_dir, "snap-1");
        CHECK(!ex2.done);
        CHECK(ex2.notice.find("clipped") != std::string::npos);
        CHECK(ex2.state.pending_begin == 4);
        CHECK(ex2.state.pending_end == 5);
        CHECK(ex2.band_dir.filename().string() == "band_001_4_5");

        BandState done_state = ingest_corrections(m, ex2.state, ex2.band_dir, manifest_path);
        CHECK(done_state.annotated_end == 5);
        BandExport fin = expand_band(pred, m, done_state, 2, 0.5f, 16, bands_dir, "snap-1");
        CHECK(fin.done);
        CHECK(fin.band_dir.empty());
        CHECK(fin.state == done_state);
    }

    SUBCASE("ingest validates everything before touching anything") {
        BandExport ex = expand_band(pred, m, st, 2, 0.5f, 16, bands_dir, "snap-1");

        auto corrected = dir / "corrected";
        std::filesystem::create_directories(corrected);
        for (const auto& f : std::filesystem::directory_iterator(ex.band_dir))
            if (f.path().filename() != "BAND-INFO")
                std::filesystem::copy_file(f.path(), corrected / f.path().filename());
        std::filesystem::remove(corrected / "pred_0_2.pgm");
        std::filesystem::remove(corrected / "pred_1_3.pgm");

        MosaicManifest before = m;
        try {
            ingest_corrections(m, ex.state, corrected, manifest_path);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            std::string msg = e.what();
            CHECK(msg.find("(0, 2)") != std::string::npos);
            CHECK(msg.find("(1, 3)") != std::string::npos);
        }
        CHECK(m.same_content(before));
        CHECK(m.same_content(load_manifest(manifest_path)));

        // invalid class values are reported with the file name
        std::filesystem::copy_file(ex.band_dir / "pred_0_2.pgm", corrected / "pred_0_2.pgm");
        std::filesystem::copy_file(ex.band_dir / "pred_1_3.pgm", corrected / "pred_1_3.pgm");
        Image8 bad(32, 32, 3);
        write_pgm(corrected / "pred_1_2.pgm", bad);
        CHECK_THROWS_WITH_AS(ingest_corrections(m, ex.state, corrected, manifest_path),
                             doctest::Contains("pred_1_2.pgm"), DataError);

        // wrong size is rejected too
        write_pgm(corrected / "pred_1_2.pgm", Image8(16, 16, 0));
        CHECK_THROWS_WITH_AS(ingest_corrections(m, ex.state, corrected, manifest_path),
                             doctest::Contains("16x16"), DataError);

        // no pending band
        CHECK_THROWS_AS(ingest_corrections(m, st, corrected, manifest_path), UsageError);
    }

    SUBCASE("fully annotated grid reports completion") {
        BandState full;
        full.annotated_end = 5;
        BandExport ex = expand_band(pred, m, full, 3, 0.5f, 16, bands_dir, "snap-1");
        CHECK(ex.done);
        CHECK(ex.band_dir.empty());
        CHECK(ex.notice.empty());
    }
}
