#include "callosum/synthgen.hpp"

#include "callosum/errors.hpp"
#include "callosum/kernels.hpp"
#include "callosum/rng.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>

namespace callosum {

namespace {

constexpr double kPi = std::numbers::pi;

struct PlacedFiber {
    double cx = 0, cy = 0;
    double ux = 1, uy = 0;   // spine direction
    double hl = 0;            // straight-section half length
    double r_in = 0, r_out = 0;
    bool elongated = false;
    bool node = false;
    bool demyel = false;
    double gap_phi0 = 0;      // circles: gap start angle
    double gap_t0 = 0;        // capsules: gap center along the spine
    double gap_arc = 0;       // radians
    double thin_dx = 0, thin_dy = 0; // thinning on the cross-positive side
};

double dist_to_segment(double px, double py, const PlacedFiber& f) {
    double ax = f.cx - f.hl * f.ux, ay = f.cy - f.hl * f.uy;
    double bx = f.cx + f.hl * f.ux, by = f.cy + f.hl * f.uy;
    double abx = bx - ax, aby = by - ay;
    double len2 = abx * abx + aby * aby;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((px - ax) * abx + (py - ay) * aby) / len2, 0.0, 1.0);
    double qx = ax + t * abx, qy = ay + t * aby;
    return std::hypot(px - qx, py - qy);
}

// shortest distance between the spine segments of two fibers
// (closest-point-on-segments, degenerate cases included)
double spine_distance(const PlacedFiber& a, const PlacedFiber& b) {
    constexpr double eps = 1e-12;
    double p1x = a.cx - a.hl * a.ux, p1y = a.cy - a.hl * a.uy;
    double q1x = a.cx + a.hl * a.ux, q1y = a.cy + a.hl * a.uy;
    double p2x = b.cx - b.hl * b.ux, p2y = b.cy - b.hl * b.uy;
    double q2x = b.cx + b.hl * b.ux, q2y = b.cy + b.hl * b.uy;

    double d1x = q1x - p1x, d1y = q1y - p1y;
    double d2x = q2x - p2x, d2y = q2y - p2y;
    double rx = p1x - p2x, ry = p1y - p2y;
    double A = d1x * d1x + d1y * d1y;
    double E = d2x * d2x + d2y * d2y;
    double F = d2x * rx + d2y * ry;

    double s = 0.0, t = 0.0;
    if (A <= eps && E <= eps) {
        // both are points
    } else if (A <= eps) {
        t = std::clamp(F / E, 0.0, 1.0);
    } else {
        double C = d1x * rx + d1y * ry;
        if (E <= eps) {
            s = std::clamp(-C / A, 0.0, 1.0);
        } else {
            double B = d1x * d2x + d1y * d2y;
            double den = A * E - B * B;
            s = den > eps ? std::clamp((B * F - C * E) / den, 0.0, 1.0) : 0.0;
            t = (B * s + F) / E;
            if (t < 0.0) {
                t = 0.0;
                s = std::clamp(-C / A, 0.0, 1.0);
            } else if (t > 1.0) {
                t = 1.0;
                s = std::clamp((B - C) / A, 0.0, 1.0);
            }
        }
    }
    double c1x = p1x + s * d1x, c1y = p1y + s * d1y;
    double c2x = p2x + t * d2x, c2y = p2y + t * d2y;
    return std::hypot(c1x - c2x, c1y - c2y);
}

bool in_node_gap(double px, double py, const PlacedFiber& f) {
    if (!f.node) return false;
    if (f.elongated) {
        double t = (px - f.cx) * f.ux + (py - f.cy) * f.uy;
        double half_width = 0.5 * f.gap_arc * f.r_out;
        return std::abs(t - f.gap_t0) <= half_width;
    }
    double phi = std::atan2(py - f.cy, px - f.cx);
    double rel = phi - f.gap_phi0;
    rel -= 2.0 * kPi * std::floor(rel / (2.0 * kPi));
    return rel < f.gap_arc;
}

bool on_thinned_side(double px, double py, const PlacedFiber& f) {
    if (!f.demyel) return false;
    return f.thin_dx * (py - f.cy) - f.thin_dy * (px - f.cx) > 0.0;
}

} // namespace

void SyntheticSceneSpec::validate() const {
    if (patch_px <= 0) throw DataError("scene: patch_px must be positive");
    if (fiber_count < 0) throw DataError("scene: fiber_count must be nonnegative");
    if (!(inner_radius_min > 0.0) || inner_radius_max < inner_radius_min)
        throw DataError("scene: inner radius range must satisfy 0 < min <= max");
    if (!(g_ratio_min > 0.0) || g_ratio_max < g_ratio_min || !(g_ratio_max < 1.0))
        throw DataError("scene: g-ratio range must satisfy 0 < min <= max < 1");
    for (double p : {elongation_prob, node_prob, demyelination_prob})
        if (p < 0.0 || p > 1.0) throw DataError("scene: probabilities must lie in [0,1]");
    if (noise_level < 0.0) throw DataError("scene: noise_level must be nonnegative");
    if (!(node_arc_deg > 0.0) || node_arc_deg >= 180.0)
        throw DataError("scene: node_arc_deg must lie in (0,180)");
    if (thinning_fraction <= 0.0 || thinning_fraction >= 1.0)
        throw DataError("scene: thinning_fraction must lie in (0,1)");
    if (min_gap_px < 0.0) throw DataError("scene: min_gap_px must be nonnegative");
    if (max_retries <= 0) throw DataError("scene: max_retries must be positive");
}

SyntheticScene generate_scene(const SyntheticSceneSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int n = spec.patch_px;

    // background texture parameters are drawn first so the rng stream layout
    // is stable
    double tex[6];
    for (double& t : tex) t = rng.uniform();
    double f1 = 1.0 / (40.0 + 80.0 * tex[0]);
    double f2 = 1.0 / (40.0 + 80.0 * tex[1]);
    double ang1 = 2.0 * kPi * tex[2], ang2 = 2.0 * kPi * tex[3];
    double ph1 = 2.0 * kPi * tex[4], ph2 = 2.0 * kPi * tex[5];

    std::vector<PlacedFiber> fibers;
    fibers.reserve(static_cast<size_t>(spec.fiber_count));
    for (int i = 0; i < spec.fiber_count; ++i) {
        PlacedFiber f;
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
            f = PlacedFiber{};
            f.elongated = rng.bernoulli(spec.elongation_prob);
            f.r_in = rng.uniform(spec.inner_radius_min, spec.inner_radius_max);
            double g = rng.uniform(spec.g_ratio_min, spec.g_ratio_max);
            f.r_out = f.r_in / g;
            if (f.elongated) {
                f.hl = rng.uniform(1.5, 4.0) * f.r_out;
                double theta = rng.uniform(0.0, kPi);
                f.ux = std::cos(theta);
                f.uy = std::sin(theta);
            }
            double ex = f.hl * std::abs(f.ux) + f.r_out + 1.0;
            double ey = f.hl * std::abs(f.uy) + f.r_out + 1.0;
            if (2.0 * ex >= n || 2.0 * ey >= n) continue; // cannot fit at this size
            f.cx = rng.uniform(ex, n - ex);
            f.cy = rng.uniform(ey, n - ey);
            bool clear = true;
            for (const auto& other : fibers)
                if (spine_distance(f, other) < f.r_out + other.r_out + spec.min_gap_px) {
                    clear = false;
                    break;
                }
            placed = clear;
        }
        if (!placed)
            throw DataError("scene: could not place fiber " + std::to_string(i + 1) + " of " +
                            std::to_string(spec.fiber_count) + " after " +
                            std::to_string(spec.max_retries) + " attempts (packing infeasible)");
        f.node = rng.bernoulli(spec.node_prob);
        if (f.node) {
            f.gap_arc = spec.node_arc_deg * kPi / 180.0;
            if (f.elongated) f.gap_t0 = rng.uniform(-f.hl, f.hl);
            else f.gap_phi0 = rng.uniform(0.0, 2.0 * kPi);
        }
        f.demyel = rng.bernoulli(spec.demyelination_prob);
        if (f.demyel) {
            if (f.elongated) {
                double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
                f.thin_dx = sign * f.ux;
                f.thin_dy = sign * f.uy;
            } else {
                double psi = rng.uniform(0.0, 2.0 * kPi);
                f.thin_dx = std::cos(psi);
                f.thin_dy = std::sin(psi);
            }
        }
        fibers.push_back(f);
    }

    SyntheticScene scene;
    scene.mask.width = n;
    scene.mask.height = n;
    scene.mask.values.assign(static_cast<size_t>(n) * n, kClassBackground);
    scene.image.width = n;
    scene.image.height = n;
    scene.image.pixels.resize(static_cast<size_t>(n) * n);

    std::vector<double> gray(static_cast<size_t>(n) * n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double g1 = std::sin(2.0 * kPi * f1 * (x * std::cos(ang1) + y * std::sin(ang1)) + ph1);
            double g2 = std::sin(2.0 * kPi * f2 * (x * std::cos(ang2) + y * std::sin(ang2)) + ph2);
            gray[static_cast<size_t>(y) * n + x] = 200.0 + 12.0 * g1 + 8.0 * g2;
        }

    scene.fibers.reserve(fibers.size());
    for (const auto& f : fibers) {
        FiberRecord rec;
        rec.cx = f.cx;
        rec.cy = f.cy;
        rec.orientation = f.elongated ? std::atan2(f.uy, f.ux) : 0.0;
        rec.inner_radius = f.r_in;
        rec.outer_radius = f.r_out;
        rec.half_length = f.hl;
        rec.elongated = f.elongated;
        rec.node = f.node;
        rec.demyelinated = f.demyel;

        double ex = f.hl * std::abs(f.ux) + f.r_out + 1.0;
        double ey = f.hl * std::abs(f.uy) + f.r_out + 1.0;
        int x0 = std::max(0, static_cast<int>(std::floor(f.cx - ex)));
        int x1 = std::min(n - 1, static_cast<int>(std::ceil(f.cx + ex)));
        int y0 = std::max(0, static_cast<int>(std::floor(f.cy - ey)));
        int y1 = std::min(n - 1, static_cast<int>(std::ceil(f.cy + ey)));
        double thin_r = f.r_in + spec.thinning_fraction * (f.r_out - f.r_in);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double px = x + 0.5, py = y + 0.5;
                double d = dist_to_segment(px, py, f);
                if (d > f.r_out) continue;
                size_t idx = static_cast<size_t>(y) * n + x;
                if (d <= f.r_in) {
                    scene.mask.values[idx] = kClassAxon;
                    gray[idx] = 150.0;
                    ++rec.axon_area_px;
                    continue;
                }
                if (in_node_gap(px, py, f)) continue; // sheath interrupted, stays background
                if (on_thinned_side(px, py, f) && d > thin_r) continue;
                scene.mask.values[idx] = kClassMyelin;
                gray[idx] = 40.0;
                ++rec.myelin_area_px;
            }
        scene.fibers.push_back(rec);
    }

    if (spec.noise_level > 0.0)
        for (auto& g : gray) g += rng.normal(0.0, spec.noise_level);
    for (size_t i = 0; i < gray.size(); ++i)
        scene.image.pixels[i] =
            static_cast<uint8_t>(std::clamp(std::lround(gray[i]), 0l, 255l));
    return scene;
}

namespace {

std::string fmt(double v) {
    std::array<char, 64> buf;
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
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

} // namespace

MosaicManifest generate_mosaic(const std::vector<SyntheticSceneSpec>& specs, int grid_nx,
                               int grid_ny, double pixel_nm,
                               const std::filesystem::path& out_dir) {
    if (grid_nx <= 0 || grid_ny <= 0) throw DataError("mosaic: grid dimensions must be positive");
    if (specs.size() != static_cast<size_t>(grid_nx) * grid_ny)
        throw DataError("mosaic: expected " + std::to_string(grid_nx * grid_ny) + " specs, got " +
                        std::to_string(specs.size()));
    for (const auto& s : specs) {
        s.validate();
        if (s.patch_px != specs[0].patch_px)
            throw DataError("mosaic: all cells must share patch_px");
    }

    std::filesystem::create_directories(out_dir / "images");
    std::filesystem::create_directories(out_dir / "labels");

    std::vector<std::vector<FiberRecord>> per_cell(specs.size());
    std::exception_ptr first_error;
    std::mutex error_mu;
    kernels::parallel_for(0, specs.size(), kernels::default_workers(),
                          [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            try {
                int ix = static_cast<int>(i) % grid_nx;
                int iy = static_cast<int>(i) / grid_nx;
                SyntheticScene scene = generate_scene(specs[i]);
                std::string tail = std::to_string(ix) + "_" + std::to_string(iy) + ".pgm";
                write_pgm(out_dir / "images" / ("patch_" + tail), scene.image);
                write_pgm(out_dir / "labels" / ("label_" + tail), image_from_mask(scene.mask));
                per_cell[i] = std::move(scene.fibers);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
            }
        }
    });
    if (first_error) std::rethrow_exception(first_error);

    std::ostringstream csv;
    csv << "ix,iy,fiber,cx,cy,orientation,inner_radius,outer_radius,half_length,"
           "elongated,node,demyelinated,axon_area_px,myelin_area_px\n";
    for (size_t i = 0; i < per_cell.size(); ++i) {
        int ix = static_cast<int>(i) % grid_nx;
        int iy = static_cast<int>(i) / grid_nx;
        for (size_t j = 0; j < per_cell[i].size(); ++j) {
            const FiberRecord& r = per_cell[i][j];
            csv << ix << ',' << iy << ',' << j << ',' << fmt(r.cx) << ',' << fmt(r.cy) << ','
                << fmt(r.orientation) << ',' << fmt(r.inner_radius) << ',' << fmt(r.outer_radius)
                << ',' << fmt(r.half_length) << ',' << (r.elongated ? 1 : 0) << ','
                << (r.node ? 1 : 0) << ',' << (r.demyelinated ? 1 : 0) << ',' << r.axon_area_px
                << ',' << r.myelin_area_px << '\n';
        }
    }
    write_atomic(out_dir / "fibers.csv", csv.str());

    MosaicManifest m;
    m.grid_nx = grid_nx;
    m.grid_ny = grid_ny;
    m.patch_px = specs[0].patch_px;
    m.pixel_nm = pixel_nm;
    m.base_dir = out_dir;
    for (int iy = 0; iy < grid_ny; ++iy)
        for (int ix = 0; ix < grid_nx; ++ix) {
            std::string tail = std::to_string(ix) + "_" + std::to_string(iy) + ".pgm";
            ManifestEntry e;
            e.image_path = "images/patch_" + tail;
            e.label_path = "labels/label_" + tail;
            e.annotated = true;
            m.entries[{ix, iy}] = e;
        }
    save_manifest(m, out_dir / "manifest.txt");
    return m;
}

std::vector<std::pair<PatchCoord, FiberRecord>> load_fiber_records(
    const std::filesystem::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw DataError("cannot open fiber records '" + csv_path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("fiber records '" + csv_path.string() + "' empty");
    std::vector<std::pair<PatchCoord, FiberRecord>> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 14)
            throw DataError("fiber records line " + std::to_string(line_no) +
                            ": expected 14 fields, got " + std::to_string(fields.size()));
        try {
            PatchCoord coord{std::stoi(fields[0]), std::stoi(fields[1])};
            FiberRecord r;
            r.cx = std::stod(fields[3]);
            r.cy = std::stod(fields[4]);
            r.orientation = std::stod(fields[5]);
            r.inner_radius = std::stod(fields[6]);
            r.outer_radius = std::stod(fields[7]);
            r.half_length = std::stod(fields[8]);
            r.elongated = fields[9] == "1";
            r.node = fields[10] == "1";
            r.demyelinated = fields[11] == "1";
            r.axon_area_px = std::stoll(fields[12]);
            r.myelin_area_px = std::stoll(fields[13]);
            out.emplace_back(coord, r);
        } catch (const std::logic_error&) {
            throw DataError("fiber records line " + std::to_string(line_no) +
                            ": unparseable numeric field");
        }
    }
    return out;
}

} // namespace callosum
