#include "callosum/morphometry.hpp"

#include "callosum/errors.hpp"
#include "callosum/kernels.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace callosum {

namespace {

std::string fmt(double v) {
    std::array<char, 64> buf;
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

double parse_double_field(const std::string& s, const char* what, int line_no) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw DataError("records line " + std::to_string(line_no) + ": bad " + std::string(what) +
                        " '" + s + "'");
    return v;
}

void write_atomic(const std::filesystem::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw RuntimeFailure("cannot write '" + tmp.string() + "'");
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        f.flush();
        if (!f) throw RuntimeFailure("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

struct UnionFind {
    std::vector<int32_t> parent;

    int32_t make() {
        parent.push_back(static_cast<int32_t>(parent.size()));
        return parent.back();
    }
    int32_t find(int32_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(int32_t a, int32_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

} // namespace

MetricGridSpec::CellRect MetricGridSpec::cell_rect(int cx, int cy) const {
    CellRect r;
    r.x0 = cx * metric_patch_px;
    r.y0 = cy * metric_patch_px;
    r.x1 = std::min(r.x0 + metric_patch_px, down_width);
    r.y1 = std::min(r.y0 + metric_patch_px, down_height);
    return r;
}

MetricGridSpec make_metric_grid(const MosaicManifest& m, int metric_patch_px,
                                int downsample_factor) {
    if (metric_patch_px <= 0) throw DataError("metric_patch_px must be positive");
    if (downsample_factor <= 0) throw DataError("downsample_factor must be positive");
    if (m.patch_px % downsample_factor != 0)
        throw DataError("downsample_factor " + std::to_string(downsample_factor) +
                        " does not divide patch_px " + std::to_string(m.patch_px));
    MetricGridSpec g;
    g.metric_patch_px = metric_patch_px;
    g.downsample_factor = downsample_factor;
    g.down_width = m.grid_nx * (m.patch_px / downsample_factor);
    g.down_height = m.grid_ny * (m.patch_px / downsample_factor);
    g.gx = (g.down_width + metric_patch_px - 1) / metric_patch_px;
    g.gy = (g.down_height + metric_patch_px - 1) / metric_patch_px;
    return g;
}

LabeledComponents label_components(const ClassMask& mask, uint8_t class_id) {
    LabeledComponents out;
    out.width = mask.width;
    out.height = mask.height;
    out.labels.assign(mask.values.size(), 0);

    UnionFind uf;
    std::vector<int32_t> provisional(mask.values.size(), -1);
    const int w = mask.width, h = mask.height;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t idx = static_cast<size_t>(y) * w + x;
            if (mask.values[idx] != class_id) continue;
            int32_t label = -1;
            // scan already-visited 8-neighbors: W, NW, N, NE
            const int nbx[4] = {x - 1, x - 1, x, x + 1};
            const int nby[4] = {y, y - 1, y - 1, y - 1};
            for (int i = 0; i < 4; ++i) {
                if (nbx[i] < 0 || nby[i] < 0 || nbx[i] >= w) continue;
                int32_t nl = provisional[static_cast<size_t>(nby[i]) * w + nbx[i]];
                if (nl < 0) continue;
                if (label < 0) label = nl;
                else uf.unite(label, nl);
            }
            if (label < 0) label = uf.make();
            provisional[idx] = label;
        }

    std::vector<int32_t> compact(uf.parent.size(), 0);
    int32_t next = 0;
    for (size_t i = 0; i < uf.parent.size(); ++i)
        if (uf.find(static_cast<int32_t>(i)) == static_cast<int32_t>(i)) compact[i] = ++next;
    out.areas.assign(static_cast<size_t>(next), 0);
    for (size_t idx = 0; idx < provisional.size(); ++idx) {
        if (provisional[idx] < 0) continue;
        int32_t l = compact[uf.find(provisional[idx])];
        out.labels[idx] = l;
        ++out.areas[static_cast<size_t>(l) - 1];
    }
    return out;
}

double equivalent_diameter(int64_t area_px) {
    if (area_px <= 0) throw UsageError("equivalent_diameter: area must be positive");
    return std::sqrt(4.0 * static_cast<double>(area_px) / std::numbers::pi);
}

MorphometryRecord patch_metrics(const ClassMask& cell, bool roi, int min_component_area) {
    MorphometryRecord r;
    r.computed = true;
    r.roi = roi;
    if (!roi) return r;

    r.total_px = static_cast<int64_t>(cell.values.size());
    for (uint8_t v : cell.values) {
        if (v == kClassAxon) ++r.axon_px;
        if (v == kClassMyelin) ++r.myelin_px;
    }
    r.avf = r.total_px > 0 ? static_cast<double>(r.axon_px) / static_cast<double>(r.total_px) : 0.0;
    r.mvf = r.total_px > 0 ? static_cast<double>(r.myelin_px) / static_cast<double>(r.total_px) : 0.0;
    if (r.axon_px > 0) {
        r.has_g = true;
        r.g_ratio = 1.0 / std::sqrt(1.0 + r.mvf / r.avf);
    }

    LabeledComponents comps = label_components(cell, kClassAxon);
    std::vector<double> diams;
    diams.reserve(comps.areas.size());
    for (int64_t area : comps.areas)
        if (area >= min_component_area) diams.push_back(equivalent_diameter(area));
    r.density = static_cast<int64_t>(diams.size());
    if (!diams.empty()) {
        double sum = 0.0;
        for (double d : diams) sum += d;
        r.diam_mean = sum / static_cast<double>(diams.size());
        double sq = 0.0;
        for (double d : diams) sq += (d - r.diam_mean) * (d - r.diam_mean);
        r.diam_std = std::sqrt(sq / static_cast<double>(diams.size()));
    }
    return r;
}

int64_t SlideMorphometry::roi_cells() const {
    int64_t n = 0;
    for (const auto& r : records) n += r.computed && r.roi;
    return n;
}

bool SlideMorphometry::mean_g_ratio(double& out) const {
    int64_t axon = 0, myelin = 0;
    for (const auto& r : records) {
        if (!r.computed || !r.roi) continue;
        axon += r.axon_px;
        myelin += r.myelin_px;
    }
    if (axon <= 0) return false;
    out = 1.0 / std::sqrt(1.0 + static_cast<double>(myelin) / static_cast<double>(axon));
    return true;
}

SlideMorphometry slide_morphometry(const MosaicManifest& m, const MorphometryOptions& opt,
                                   const RoiMask& roi, int workers,
                                   const SlideMorphometry* resume_from,
                                   const std::filesystem::path* checkpoint_csv) {
    SlideMorphometry slide;
    slide.grid = make_metric_grid(m, opt.metric_patch_px, opt.downsample_factor);
    const MetricGridSpec& grid = slide.grid;
    if (roi.gx != grid.gx || roi.gy != grid.gy)
        throw DataError("roi mask is " + std::to_string(roi.gx) + "x" + std::to_string(roi.gy) +
                        ", metric grid is " + std::to_string(grid.gx) + "x" +
                        std::to_string(grid.gy));
    slide.records.assign(static_cast<size_t>(grid.gx) * grid.gy, MorphometryRecord{});

    if (resume_from) {
        if (resume_from->grid.gx != grid.gx || resume_from->grid.gy != grid.gy)
            throw DataError("resume records have grid " + std::to_string(resume_from->grid.gx) +
                            "x" + std::to_string(resume_from->grid.gy) + ", expected " +
                            std::to_string(grid.gx) + "x" + std::to_string(grid.gy));
        for (size_t i = 0; i < slide.records.size(); ++i)
            if (resume_from->records[i].computed) {
                int cx = static_cast<int>(i) % grid.gx;
                int cy = static_cast<int>(i) / grid.gx;
                if (resume_from->records[i].roi != roi.at(cx, cy))
                    throw DataError("resume records disagree with the roi mask at cell (" +
                                    std::to_string(cx) + "," + std::to_string(cy) + ")");
                slide.records[i] = resume_from->records[i];
            }
    }

    const int down_patch = m.patch_px / opt.downsample_factor;

    // every native patch covering a pending roi cell must have a label
    std::vector<std::string> missing;
    auto patch_range_for = [&](const MetricGridSpec::CellRect& rect) {
        struct Range {
            int ix0, ix1, iy0, iy1;
        };
        Range r;
        r.ix0 = rect.x0 / down_patch;
        r.ix1 = (rect.x1 - 1) / down_patch;
        r.iy0 = rect.y0 / down_patch;
        r.iy1 = (rect.y1 - 1) / down_patch;
        return r;
    };
    for (int cy = 0; cy < grid.gy; ++cy)
        for (int cx = 0; cx < grid.gx; ++cx) {
            if (!roi.at(cx, cy) || slide.at(cx, cy).computed) continue;
            auto rect = grid.cell_rect(cx, cy);
            auto pr = patch_range_for(rect);
            for (int iy = pr.iy0; iy <= pr.iy1; ++iy)
                for (int ix = pr.ix0; ix <= pr.ix1; ++ix) {
                    const ManifestEntry* e = m.find(ix, iy);
                    std::string name = "(" + std::to_string(ix) + "," + std::to_string(iy) + ")";
                    if (!e || e->label_path.empty() ||
                        !std::filesystem::exists(m.resolve(e->label_path))) {
                        if (std::find(missing.begin(), missing.end(), name) == missing.end())
                            missing.push_back(name);
                    }
                }
        }
    if (!missing.empty()) {
        std::string msg = "missing labels for patches:";
        for (const auto& name : missing) msg += " " + name;
        throw DataError(msg);
    }

    auto checkpoint = [&]() {
        if (checkpoint_csv) write_atomic(*checkpoint_csv, records_csv(slide));
    };

    for (int cy = 0; cy < grid.gy; ++cy) {
        bool row_pending = false;
        for (int cx = 0; cx < grid.gx; ++cx)
            if (!slide.at(cx, cy).computed) row_pending = true;
        if (!row_pending) continue;

        // prefetch downsampled labels for the native patch rows this metric
        // row touches
        std::map<PatchCoord, ClassMask, RowMajorLess> cache;
        for (int cx = 0; cx < grid.gx; ++cx) {
            if (!roi.at(cx, cy) || slide.at(cx, cy).computed) continue;
            auto pr = patch_range_for(grid.cell_rect(cx, cy));
            for (int iy = pr.iy0; iy <= pr.iy1; ++iy)
                for (int ix = pr.ix0; ix <= pr.ix1; ++ix) {
                    PatchCoord pc{ix, iy};
                    if (!cache.count(pc))
                        cache[pc] = downsample_labels(read_label(m, ix, iy), opt.downsample_factor);
                }
        }

        kernels::parallel_for(0, static_cast<size_t>(grid.gx), workers, [&](size_t lo, size_t hi) {
            for (size_t cxs = lo; cxs < hi; ++cxs) {
                int cx = static_cast<int>(cxs);
                MorphometryRecord& rec = slide.at(cx, cy);
                if (rec.computed) continue;
                if (!roi.at(cx, cy)) {
                    rec = patch_metrics(ClassMask{}, false, opt.min_component_area);
                    continue;
                }
                auto rect = grid.cell_rect(cx, cy);
                ClassMask cell;
                cell.width = rect.width();
                cell.height = rect.height();
                cell.values.assign(static_cast<size_t>(cell.width) * cell.height, 0);
                auto pr = patch_range_for(rect);
                for (int iy = pr.iy0; iy <= pr.iy1; ++iy)
                    for (int ix = pr.ix0; ix <= pr.ix1; ++ix) {
                        const ClassMask& src = cache.at(PatchCoord{ix, iy});
                        int px0 = ix * down_patch, py0 = iy * down_patch;
                        int sx0 = std::max(rect.x0, px0), sx1 = std::min(rect.x1, px0 + down_patch);
                        int sy0 = std::max(rect.y0, py0), sy1 = std::min(rect.y1, py0 + down_patch);
                        for (int y = sy0; y < sy1; ++y)
                            for (int x = sx0; x < sx1; ++x)
                                cell.at(x - rect.x0, y - rect.y0) = src.at(x - px0, y - py0);
                    }
                rec = patch_metrics(cell, true, opt.min_component_area);
            }
        });
        checkpoint();
    }
    checkpoint();
    return slide;
}

std::string records_csv(const SlideMorphometry& s) {
    std::ostringstream out;
    out << "gx,gy,diam_mean,diam_std,density,avf,mvf,g_ratio,roi\n";
    for (int cy = 0; cy < s.grid.gy; ++cy)
        for (int cx = 0; cx < s.grid.gx; ++cx) {
            const MorphometryRecord& r = s.at(cx, cy);
            if (!r.computed) continue;
            out << cx << ',' << cy << ',';
            if (r.roi && r.density > 0) out << fmt(r.diam_mean) << ',' << fmt(r.diam_std) << ',';
            else out << "-,-,";
            if (r.roi) out << r.density << ',' << fmt(r.avf) << ',' << fmt(r.mvf) << ',';
            else out << "-,-,-,";
            if (r.roi && r.has_g) out << fmt(r.g_ratio) << ',';
            else out << "-,";
            out << (r.roi ? 1 : 0) << '\n';
        }
    return out.str();
}

SlideMorphometry load_records_csv(const std::filesystem::path& path, const MetricGridSpec& grid) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open records '" + path.string() + "'");
    SlideMorphometry s;
    s.grid = grid;
    s.records.assign(static_cast<size_t>(grid.gx) * grid.gy, MorphometryRecord{});
    std::string line;
    if (!std::getline(in, line) ||
        (line != "gx,gy,diam_mean,diam_std,density,avf,mvf,g_ratio,roi" &&
         line != "gx,gy,diam_mean,diam_std,density,avf,mvf,g_ratio,roi\r"))
        throw DataError("records '" + path.string() + "': bad header");
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 9)
            throw DataError("records line " + std::to_string(line_no) + ": expected 9 fields");
        int cx = static_cast<int>(parse_double_field(fields[0], "gx", line_no));
        int cy = static_cast<int>(parse_double_field(fields[1], "gy", line_no));
        if (cx < 0 || cx >= grid.gx || cy < 0 || cy >= grid.gy)
            throw DataError("records line " + std::to_string(line_no) + ": cell (" +
                            std::to_string(cx) + "," + std::to_string(cy) + ") outside grid");
        MorphometryRecord r;
        r.computed = true;
        r.roi = fields[8] == "1";
        if (r.roi) {
            r.density = static_cast<int64_t>(parse_double_field(fields[4], "density", line_no));
            r.avf = parse_double_field(fields[5], "avf", line_no);
            r.mvf = parse_double_field(fields[6], "mvf", line_no);
            if (r.density > 0) {
                r.diam_mean = parse_double_field(fields[2], "diam_mean", line_no);
                r.diam_std = parse_double_field(fields[3], "diam_std", line_no);
            }
            if (fields[7] != "-") {
                r.has_g = true;
                r.g_ratio = parse_double_field(fields[7], "g_ratio", line_no);
            }
            auto rect = grid.cell_rect(cx, cy);
            r.total_px = rect.area();
            r.axon_px = std::llround(r.avf * static_cast<double>(r.total_px));
            r.myelin_px = std::llround(r.mvf * static_cast<double>(r.total_px));
        }
        s.at(cx, cy) = r;
    }
    return s;
}

std::string slide_summary(const SlideMorphometry& s) {
    double g = 0.0;
    bool has = s.mean_g_ratio(g);
    std::ostringstream out;
    out << "SLIDE-SUMMARY v1 mean_g_ratio=" << (has ? fmt(g) : "nan") << " roi_cells="
        << s.roi_cells();
    return out.str();
}

DistributionMap normalize_map(const std::string& name, int gx, int gy,
                              const std::vector<double>& raw,
                              const std::vector<uint8_t>& present) {
    if (raw.size() != static_cast<size_t>(gx) * gy || present.size() != raw.size())
        throw UsageError("normalize_map: grid size mismatch");
    DistributionMap map;
    map.name = name;
    map.gx = gx;
    map.gy = gy;
    map.raw = raw;
    map.present = present;
    map.normalized.assign(raw.size(), 0.0);

    bool any = false;
    double lo = 0.0, hi = 0.0;
    for (size_t i = 0; i < raw.size(); ++i) {
        if (!present[i]) continue;
        if (!any) {
            lo = hi = raw[i];
            any = true;
        } else {
            lo = std::min(lo, raw[i]);
            hi = std::max(hi, raw[i]);
        }
    }
    if (!any) throw DataError("normalize_map '" + name + "': no cells carry a value");
    const double span = hi - lo;
    for (size_t i = 0; i < raw.size(); ++i)
        if (present[i]) map.normalized[i] = span > 0.0 ? (raw[i] - lo) / span : 0.0;
    return map;
}

void render_maps(const SlideMorphometry& s, const std::filesystem::path& out_dir) {
    struct MapDef {
        const char* name;
        bool (*get)(const MorphometryRecord&, double&);
    };
    const MapDef defs[] = {
        {"diam_mean",
         [](const MorphometryRecord& r, double& v) {
             v = r.diam_mean;
             return r.roi && r.density > 0;
         }},
        {"diam_std",
         [](const MorphometryRecord& r, double& v) {
             v = r.diam_std;
             return r.roi && r.density > 0;
         }},
        {"density",
         [](const MorphometryRecord& r, double& v) {
             v = static_cast<double>(r.density);
             return r.roi;
         }},
        {"avf",
         [](const MorphometryRecord& r, double& v) {
             v = r.avf;
             return r.roi;
         }},
        {"mvf",
         [](const MorphometryRecord& r, double& v) {
             v = r.mvf;
             return r.roi;
         }},
        {"g_ratio",
         [](const MorphometryRecord& r, double& v) {
             v = r.g_ratio;
             return r.roi && r.has_g;
         }},
    };

    std::filesystem::create_directories(out_dir);
    const int gx = s.grid.gx, gy = s.grid.gy;
    for (const auto& def : defs) {
        std::vector<double> raw(static_cast<size_t>(gx) * gy, 0.0);
        std::vector<uint8_t> present(raw.size(), 0);
        for (size_t i = 0; i < s.records.size(); ++i) {
            const MorphometryRecord& r = s.records[i];
            double v = 0.0;
            if (r.computed && def.get(r, v)) {
                raw[i] = v;
                present[i] = 1;
            }
        }
        bool any = std::find(present.begin(), present.end(), uint8_t{1}) != present.end();

        Image8 img;
        img.width = gx;
        img.height = gy;
        img.pixels.assign(raw.size(), 0);
        std::ostringstream csv;
        if (any) {
            DistributionMap map = normalize_map(def.name, gx, gy, raw, present);
            for (size_t i = 0; i < raw.size(); ++i)
                if (present[i])
                    img.pixels[i] = static_cast<uint8_t>(std::lround(255.0 * map.normalized[i]));
        }
        for (int cy = 0; cy < gy; ++cy) {
            for (int cx = 0; cx < gx; ++cx) {
                size_t i = static_cast<size_t>(cy) * gx + cx;
                if (cx) csv << ',';
                if (present[i]) csv << fmt(raw[i]);
                else csv << '-';
            }
            csv << '\n';
        }
        write_pgm(out_dir / ("map_" + std::string(def.name) + ".pgm"), img);
        write_atomic(out_dir / ("raw_" + std::string(def.name) + ".csv"), csv.str());
    }
}

} // namespace callosum
