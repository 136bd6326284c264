#include "callosum/infer.hpp"

#include "callosum/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace callosum {

namespace {

std::vector<int> axis_origins(int extent, int tile, int stride) {
    std::vector<int> out;
    if (extent <= tile) {
        out.push_back(0);
        return out;
    }
    int o = 0;
    while (true) {
        if (o + tile >= extent) {
            out.push_back(extent - tile);
            break;
        }
        out.push_back(o);
        o += stride;
    }
    return out;
}

// reflect-101: ...2 1 0 1 2... no edge repeat
int reflect_index(int c, int n) {
    if (n == 1) return 0;
    while (c < 0 || c >= n) {
        if (c < 0) c = -c;
        if (c >= n) c = 2 * (n - 1) - c;
    }
    return c;
}

void extract_tile(const Image8& region, TileOrigin origin, Image8& tile) {
    for (int v = 0; v < tile.height; ++v) {
        int sy = reflect_index(origin.y + v, region.height);
        for (int u = 0; u < tile.width; ++u) {
            int sx = reflect_index(origin.x + u, region.width);
            tile.at(u, v) = region.at(sx, sy);
        }
    }
}

double axis_weight(int u, int origin, int tile, int extent, int trim) {
    const bool left_open = origin <= 0;
    const bool right_open = origin + tile >= extent;
    const int lt = left_open ? 0 : trim;
    const int rt = right_open ? 0 : trim;
    if (u < lt || u >= tile - rt) return 0.0;
    const int span = tile - lt - rt;
    double s = std::sin(std::numbers::pi * (u - lt + 0.5) / span);
    return s * s;
}

} // namespace

TilingPlan plan_tiles(int region_w, int region_h, int tile_px, int stride_px) {
    if (region_w < 1 || region_h < 1)
        throw UsageError("plan_tiles: region " + std::to_string(region_w) + "x" +
                         std::to_string(region_h) + " is empty");
    if (tile_px < 1) throw UsageError("plan_tiles: tile_px must be positive");
    if (stride_px < 1) throw UsageError("plan_tiles: stride_px must be positive");
    if (stride_px > tile_px) throw UsageError("plan_tiles: stride_px must be <= tile_px");

    TilingPlan plan;
    plan.region_w = region_w;
    plan.region_h = region_h;
    plan.tile_px = tile_px;
    plan.stride_px = stride_px;
    plan.trim_px = std::min(tile_px / 8, (tile_px - stride_px) / 2);

    auto xs = axis_origins(region_w, tile_px, stride_px);
    auto ys = axis_origins(region_h, tile_px, stride_px);
    for (int y : ys)
        for (int x : xs) plan.origins.push_back({x, y});
    return plan;
}

double raw_weight(const TilingPlan& plan, size_t tile_index, int px, int py) {
    if (tile_index >= plan.origins.size())
        throw UsageError("raw_weight: tile index out of range");
    const TileOrigin o = plan.origins[tile_index];
    const int u = px - o.x;
    const int v = py - o.y;
    if (u < 0 || v < 0 || u >= plan.tile_px || v >= plan.tile_px) return 0.0;
    return axis_weight(u, o.x, plan.tile_px, plan.region_w, plan.trim_px) *
           axis_weight(v, o.y, plan.tile_px, plan.region_h, plan.trim_px);
}

ProbabilityPair ModelTilePredictor::predict_tile(const Image8& tile) {
    const int s = model_->config().input_px;
    if (tile.width != s || tile.height != s)
        throw UsageError("predict_tile: tile is " + std::to_string(tile.width) + "x" +
                         std::to_string(tile.height) + ", model expects " + std::to_string(s));
    const size_t plane = static_cast<size_t>(s) * s;
    gray_.resize(plane);
    for (size_t i = 0; i < plane; ++i) gray_[i] = static_cast<float>(tile.pixels[i]) / 255.f;
    model_->predict(gray_.data(), 1, probs_);
    ProbabilityPair out(s, s);
    std::copy(probs_.begin(), probs_.begin() + plane, out.axon.begin());
    std::copy(probs_.begin() + plane, probs_.begin() + 2 * plane, out.myelin.begin());
    return out;
}

ProbabilityPair predict_image(TilePredictor& pred, const Image8& region, int stride_px) {
    const int tile = pred.tile_px();
    TilingPlan plan = plan_tiles(region.width, region.height, tile, stride_px);

    const size_t n = region.size();
    // Deviation-form blend around the first positive-weight cover, so pixels
    // where every tile agrees come out bit-identical to the tile value.
    std::vector<float> base_a(n, 0.f), base_m(n, 0.f);
    std::vector<double> num_a(n, 0.0), num_m(n, 0.0), den(n, 0.0);
    std::vector<uint8_t> has_base(n, 0);

    Image8 tbuf(tile, tile);
    for (size_t ti = 0; ti < plan.origins.size(); ++ti) {
        extract_tile(region, plan.origins[ti], tbuf);
        ProbabilityPair tp = pred.predict_tile(tbuf);
        if (tp.width != tile || tp.height != tile)
            throw DataError("tile predictor returned " + std::to_string(tp.width) + "x" +
                            std::to_string(tp.height) + " for a " + std::to_string(tile) +
                            "px tile");
        for (int v = 0; v < tile; ++v) {
            const int py = plan.origins[ti].y + v;
            if (py < 0 || py >= region.height) continue;
            for (int u = 0; u < tile; ++u) {
                const int px = plan.origins[ti].x + u;
                if (px < 0 || px >= region.width) continue;
                const double w = raw_weight(plan, ti, px, py);
                if (w <= 0.0) continue;
                const size_t idx = static_cast<size_t>(py) * region.width + px;
                const size_t tidx = static_cast<size_t>(v) * tile + u;
                if (!has_base[idx]) {
                    has_base[idx] = 1;
                    base_a[idx] = tp.axon[tidx];
                    base_m[idx] = tp.myelin[tidx];
                }
                num_a[idx] += w * (static_cast<double>(tp.axon[tidx]) - base_a[idx]);
                num_m[idx] += w * (static_cast<double>(tp.myelin[tidx]) - base_m[idx]);
                den[idx] += w;
            }
        }
    }

    ProbabilityPair out(region.width, region.height);
    for (size_t i = 0; i < n; ++i) {
        if (!(den[i] > 0.0))
            throw RuntimeFailure("blend left pixel " + std::to_string(i) + " uncovered");
        double a = base_a[i] + num_a[i] / den[i];
        double m = base_m[i] + num_m[i] / den[i];
        out.axon[i] = static_cast<float>(std::clamp(a, 0.0, 1.0));
        out.myelin[i] = static_cast<float>(std::clamp(m, 0.0, 1.0));
    }
    return out;
}

ProbabilityPair predict_region(TilePredictor& pred, const MosaicManifest& m, int ix0, int ix1,
                               int iy0, int iy1, int stride_px) {
    if (ix0 < 0 || ix1 > m.grid_nx || iy0 < 0 || iy1 > m.grid_ny || ix0 >= ix1 || iy0 >= iy1)
        throw UsageError("predict_region: patch range [" + std::to_string(ix0) + ", " +
                         std::to_string(ix1) + ") x [" + std::to_string(iy0) + ", " +
                         std::to_string(iy1) + ") is outside the " + std::to_string(m.grid_nx) +
                         "x" + std::to_string(m.grid_ny) + " grid");
    const int p = m.patch_px;
    Image8 region((ix1 - ix0) * p, (iy1 - iy0) * p);
    for (int iy = iy0; iy < iy1; ++iy)
        for (int ix = ix0; ix < ix1; ++ix) {
            Image8 patch = read_patch(m, ix, iy);
            if (patch.width != p || patch.height != p)
                throw DataError("patch (" + std::to_string(ix) + ", " + std::to_string(iy) +
                                ") is " + std::to_string(patch.width) + "x" +
                                std::to_string(patch.height) + ", manifest says " +
                                std::to_string(p));
            for (int y = 0; y < p; ++y) {
                const uint8_t* src = patch.pixels.data() + static_cast<size_t>(y) * p;
                uint8_t* dst = region.pixels.data() +
                               (static_cast<size_t>((iy - iy0) * p + y) * region.width) +
                               static_cast<size_t>(ix - ix0) * p;
                std::copy(src, src + p, dst);
            }
        }
    return predict_image(pred, region, stride_px);
}

void BandState::validate(int grid_ny) const {
    auto check_range = [&](const char* what, int b, int e) {
        if (b < 0 || e < b || e > grid_ny)
            throw DataError(std::string("band state: ") + what + " range [" + std::to_string(b) +
                            ", " + std::to_string(e) + ") invalid for " + std::to_string(grid_ny) +
                            " patch rows");
    };
    check_range("annotated", annotated_begin, annotated_end);
    check_range("pending", pending_begin, pending_end);
    check_range("proofread", proofread_begin, proofread_end);
    if (!pending_empty() && pending_begin != annotated_end)
        throw DataError("band state: pending band must start at the annotated edge");
    if (proofread_end > proofread_begin &&
        (proofread_begin < annotated_begin || proofread_end > annotated_end))
        throw DataError("band state: proofread rows must lie inside the annotated range");
    if (iteration < 0) throw DataError("band state: negative iteration");
}

void save_band_state(const BandState& state, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "BAND-STATE v1\n";
    os << "annotated " << state.annotated_begin << ' ' << state.annotated_end << '\n';
    os << "pending " << state.pending_begin << ' ' << state.pending_end << '\n';
    os << "proofread " << state.proofread_begin << ' ' << state.proofread_end << '\n';
    os << "iteration " << state.iteration << '\n';
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw RuntimeFailure("cannot open " + tmp + " for writing");
        f << os.str();
        if (!f.flush()) throw RuntimeFailure("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw RuntimeFailure("cannot rename " + tmp + ": " + ec.message());
}

BandState load_band_state(const std::filesystem::path& path, int grid_ny) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open band state " + path.string());
    std::string magic;
    std::getline(f, magic);
    if (magic != "BAND-STATE v1")
        throw DataError(path.string() + ": bad magic line \"" + magic + "\"");
    BandState st;
    auto read_pair = [&](const char* key, int& b, int& e) {
        std::string line;
        if (!std::getline(f, line)) throw DataError(path.string() + ": missing " + key + " line");
        std::istringstream is(line);
        std::string k;
        if (!(is >> k >> b >> e) || k != key)
            throw DataError(path.string() + ": malformed " + std::string(key) + " line \"" + line +
                            "\"");
    };
    read_pair("annotated", st.annotated_begin, st.annotated_end);
    read_pair("pending", st.pending_begin, st.pending_end);
    read_pair("proofread", st.proofread_begin, st.proofread_end);
    std::string line;
    if (!std::getline(f, line)) throw DataError(path.string() + ": missing iteration line");
    std::istringstream is(line);
    std::string k;
    if (!(is >> k >> st.iteration) || k != "iteration")
        throw DataError(path.string() + ": malformed iteration line \"" + line + "\"");
    st.validate(grid_ny);
    return st;
}

namespace {

std::string pred_name(int ix, int iy) {
    return "pred_" + std::to_string(ix) + "_" + std::to_string(iy) + ".pgm";
}

std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace

BandExport expand_band(TilePredictor& pred, const MosaicManifest& m, const BandState& state,
                       int band_rows, float threshold, int stride_px,
                       const std::filesystem::path& out_dir, const std::string& snapshot_id) {
    state.validate(m.grid_ny);
    if (!state.pending_empty())
        throw UsageError("expand_band: band [" + std::to_string(state.pending_begin) + ", " +
                         std::to_string(state.pending_end) + ") is still awaiting ingest");
    if (band_rows < 1) throw UsageError("expand_band: band_rows must be positive");

    BandExport r;
    r.state = state;
    const int y0 = state.annotated_end;
    if (y0 >= m.grid_ny) {
        r.done = true;
        return r;
    }
    const int y1 = std::min(y0 + band_rows, m.grid_ny);
    if (y1 - y0 < band_rows)
        r.notice = "band clipped at the grid edge: [" + std::to_string(y0) + ", " +
                   std::to_string(y1) + ") instead of " + std::to_string(band_rows) + " rows";

    ProbabilityPair probs = predict_region(pred, m, 0, m.grid_nx, y0, y1, stride_px);

    char leaf[64];
    std::snprintf(leaf, sizeof leaf, "band_%03d_%d_%d", state.iteration, y0, y1);
    const std::filesystem::path band_dir = out_dir / leaf;
    std::error_code ec;
    std::filesystem::create_directories(band_dir, ec);
    if (ec) throw RuntimeFailure("cannot create " + band_dir.string() + ": " + ec.message());

    const int p = m.patch_px;
    const size_t plane = static_cast<size_t>(p) * p;
    std::vector<float> patch_probs(2 * plane);
    for (int iy = y0; iy < y1; ++iy)
        for (int ix = 0; ix < m.grid_nx; ++ix) {
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x) {
                    const size_t src = static_cast<size_t>((iy - y0) * p + y) * probs.width +
                                       static_cast<size_t>(ix) * p + x;
                    patch_probs[static_cast<size_t>(y) * p + x] = probs.axon[src];
                    patch_probs[plane + static_cast<size_t>(y) * p + x] = probs.myelin[src];
                }
            ClassMask mask = to_class_mask(patch_probs, p, p, threshold);
            write_pgm(band_dir / pred_name(ix, iy), image_from_mask(mask));
        }

    std::ostringstream info;
    info << "BAND-INFO v1\n";
    info << "y_begin " << y0 << '\n';
    info << "y_end " << y1 << '\n';
    info << "threshold " << fmt_num(threshold) << '\n';
    info << "snapshot " << snapshot_id << '\n';
    info << "pixel_nm " << fmt_num(m.pixel_nm) << '\n';
    info << "stride_px " << stride_px << '\n';
    {
        const auto tmp = (band_dir / "BAND-INFO.tmp").string();
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw RuntimeFailure("cannot open " + tmp + " for writing");
        f << info.str();
        if (!f.flush()) throw RuntimeFailure("write failed for " + tmp);
        f.close();
        std::filesystem::rename(tmp, band_dir / "BAND-INFO", ec);
        if (ec) throw RuntimeFailure("cannot rename " + tmp + ": " + ec.message());
    }

    r.state.pending_begin = y0;
    r.state.pending_end = y1;
    r.state.iteration = state.iteration + 1;
    r.band_dir = band_dir;
    return r;
}

BandState ingest_corrections(MosaicManifest& m, const BandState& state,
                             const std::filesystem::path& corrected_dir,
                             const std::filesystem::path& manifest_path) {
    state.validate(m.grid_ny);
    if (state.pending_empty()) throw UsageError("ingest_corrections: no pending band");

    struct Staged {
        int ix;
        int iy;
        ClassMask mask;
    };
    std::vector<Staged> staged;
    std::vector<std::string> problems;
    for (int iy = state.pending_begin; iy < state.pending_end; ++iy)
        for (int ix = 0; ix < m.grid_nx; ++ix) {
            const auto file = corrected_dir / pred_name(ix, iy);
            if (!std::filesystem::exists(file)) {
                problems.push_back("missing (" + std::to_string(ix) + ", " + std::to_string(iy) +
                                   "): " + file.string());
                continue;
            }
            if (!m.find(ix, iy)) {
                problems.push_back("no manifest entry for (" + std::to_string(ix) + ", " +
                                   std::to_string(iy) + ")");
                continue;
            }
            try {
                Image8 img = read_pgm(file);
                if (img.width != m.patch_px || img.height != m.patch_px)
                    throw DataError("is " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height) + ", expected " +
                                    std::to_string(m.patch_px));
                staged.push_back({ix, iy, mask_from_image(img)});
            } catch (const DataError& e) {
                problems.push_back(file.string() + ": " + e.what());
            }
        }
    if (!problems.empty()) {
        std::string msg = "ingest aborted, corrected band incomplete:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw DataError(msg);
    }

    std::error_code ec;
    std::filesystem::create_directories(m.base_dir / "labels", ec);
    if (ec) throw RuntimeFailure("cannot create labels directory: " + ec.message());
    for (const auto& s : staged) {
        const std::string rel =
            "labels/label_" + std::to_string(s.ix) + "_" + std::to_string(s.iy) + ".pgm";
        const auto final_path = m.resolve(rel);
        const auto tmp_path = final_path.string() + ".tmp";
        write_pgm(tmp_path, image_from_mask(s.mask));
        std::filesystem::rename(tmp_path, final_path, ec);
        if (ec) throw RuntimeFailure("cannot rename " + tmp_path + ": " + ec.message());
        ManifestEntry* e = m.find(s.ix, s.iy);
        e->label_path = rel;
        e->annotated = true;
    }
    save_manifest(m, manifest_path);

    BandState ns = state;
    ns.annotated_end = state.pending_end;
    if (ns.proofread_end <= ns.proofread_begin) ns.proofread_begin = state.pending_begin;
    ns.proofread_end = state.pending_end;
    ns.pending_begin = state.pending_end;
    ns.pending_end = state.pending_end;
    return ns;
}

} // namespace callosum
