#include "callosum/dataset.hpp"

#include "callosum/errors.hpp"

#include <array>
#include <cassert>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace callosum {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t pos = line.find('\t', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

int parse_int(const std::string& s, const char* what, int line_no) {
    int value = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw DataError("manifest line " + std::to_string(line_no) + ": bad " +
                        std::string(what) + " '" + s + "'");
    return value;
}

std::string format_double(double v) {
    std::array<char, 64> buf;
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    assert(ec == std::errc{});
    return std::string(buf.data(), ptr);
}

} // namespace

const char* split_name(SplitTag tag) {
    switch (tag) {
        case SplitTag::train: return "train";
        case SplitTag::val: return "val";
        case SplitTag::test: return "test";
        case SplitTag::unassigned: return "unassigned";
    }
    return "unassigned";
}

std::optional<SplitTag> parse_split(const std::string& s) {
    if (s == "train") return SplitTag::train;
    if (s == "val") return SplitTag::val;
    if (s == "test") return SplitTag::test;
    if (s == "unassigned") return SplitTag::unassigned;
    return std::nullopt;
}

const ManifestEntry* MosaicManifest::find(int ix, int iy) const {
    auto it = entries.find(PatchCoord{ix, iy});
    return it == entries.end() ? nullptr : &it->second;
}

ManifestEntry* MosaicManifest::find(int ix, int iy) {
    auto it = entries.find(PatchCoord{ix, iy});
    return it == entries.end() ? nullptr : &it->second;
}

std::filesystem::path MosaicManifest::resolve(const std::string& rel) const {
    std::filesystem::path p(rel);
    if (p.is_absolute()) return p;
    return base_dir / p;
}

void MosaicManifest::validate() const {
    if (grid_nx <= 0 || grid_ny <= 0)
        throw DataError("manifest: grid dimensions must be positive, got " +
                        std::to_string(grid_nx) + "x" + std::to_string(grid_ny));
    if (patch_px <= 0)
        throw DataError("manifest: patch_px must be positive, got " + std::to_string(patch_px));
    if (!(pixel_nm > 0.0))
        throw DataError("manifest: pixel_nm must be positive");
    for (const auto& [coord, entry] : entries) {
        std::string where = "manifest entry (" + std::to_string(coord.ix) + "," +
                            std::to_string(coord.iy) + ")";
        if (coord.ix < 0 || coord.ix >= grid_nx || coord.iy < 0 || coord.iy >= grid_ny)
            throw DataError(where + ": coordinate outside grid " + std::to_string(grid_nx) +
                            "x" + std::to_string(grid_ny));
        if (entry.image_path.empty())
            throw DataError(where + ": empty image path");
        if (entry.annotated && entry.label_path.empty())
            throw DataError(where + ": marked annotated but has no label path");
    }
}

bool MosaicManifest::same_content(const MosaicManifest& other) const {
    return grid_nx == other.grid_nx && grid_ny == other.grid_ny &&
           patch_px == other.patch_px && pixel_nm == other.pixel_nm &&
           entries == other.entries;
}

MosaicManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest '" + path.string() + "'");

    MosaicManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");

    std::string line;
    if (!std::getline(in, line)) throw DataError("manifest '" + path.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::istringstream header(line);
    std::string magic, version;
    header >> magic >> version;
    if (magic != "CALLOSUM-MANIFEST" || version != "v1")
        throw DataError("manifest '" + path.string() + "': bad header '" + line + "'");
    if (!(header >> m.grid_nx >> m.grid_ny >> m.patch_px >> m.pixel_nm))
        throw DataError("manifest '" + path.string() + "': header is missing fields");
    std::string extra;
    if (header >> extra)
        throw DataError("manifest '" + path.string() + "': trailing header field '" + extra + "'");

    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_tabs(line);
        if (fields.size() != 6)
            throw DataError("manifest line " + std::to_string(line_no) + ": expected 6 fields, got " +
                            std::to_string(fields.size()));
        PatchCoord coord;
        coord.ix = parse_int(fields[0], "ix", line_no);
        coord.iy = parse_int(fields[1], "iy", line_no);
        ManifestEntry entry;
        entry.image_path = fields[2];
        entry.label_path = fields[3] == "-" ? std::string() : fields[3];
        auto split = parse_split(fields[4]);
        if (!split)
            throw DataError("manifest line " + std::to_string(line_no) + ": unknown split tag '" +
                            fields[4] + "'");
        entry.split = *split;
        if (fields[5] == "0") entry.annotated = false;
        else if (fields[5] == "1") entry.annotated = true;
        else
            throw DataError("manifest line " + std::to_string(line_no) +
                            ": annotated flag must be 0 or 1, got '" + fields[5] + "'");
        if (!m.entries.emplace(coord, std::move(entry)).second)
            throw DataError("manifest line " + std::to_string(line_no) + ": duplicate patch (" +
                            std::to_string(coord.ix) + "," + std::to_string(coord.iy) + ")");
    }
    m.validate();
    return m;
}

void save_manifest(const MosaicManifest& m, const std::filesystem::path& path) {
    m.validate();
    std::ostringstream out;
    out << "CALLOSUM-MANIFEST v1 " << m.grid_nx << ' ' << m.grid_ny << ' ' << m.patch_px << ' '
        << format_double(m.pixel_nm) << '\n';
    for (const auto& [coord, entry] : m.entries) {
        out << coord.ix << '\t' << coord.iy << '\t' << entry.image_path << '\t'
            << (entry.label_path.empty() ? "-" : entry.label_path) << '\t'
            << split_name(entry.split) << '\t' << (entry.annotated ? '1' : '0') << '\n';
    }

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw RuntimeFailure("cannot write '" + tmp.string() + "'");
        const std::string text = out.str();
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        f.flush();
        if (!f) throw RuntimeFailure("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

void assign_splits(MosaicManifest& m, YRange genu, YRange body, YRange splenium,
                   std::vector<std::string>* warnings) {
    struct Named {
        const char* name;
        YRange range;
        SplitTag tag;
    };
    const Named ranges[] = {
        {"genu", genu, SplitTag::train},
        {"body", body, SplitTag::val},
        {"splenium", splenium, SplitTag::test},
    };
    for (const auto& r : ranges) {
        if (r.range.begin < 0 || r.range.end > m.grid_ny)
            throw DataError(std::string(r.name) + " range [" + std::to_string(r.range.begin) +
                            "," + std::to_string(r.range.end) + ") is outside grid_ny=" +
                            std::to_string(m.grid_ny));
        if (r.range.empty() && warnings)
            warnings->push_back(std::string(r.name) + " range is empty; no " +
                                split_name(r.tag) + " patches assigned");
    }
    for (size_t a = 0; a < 3; ++a)
        for (size_t b = a + 1; b < 3; ++b) {
            const auto& ra = ranges[a].range;
            const auto& rb = ranges[b].range;
            if (ra.empty() || rb.empty()) continue;
            if (ra.begin < rb.end && rb.begin < ra.end)
                throw DataError(std::string(ranges[a].name) + " and " + ranges[b].name +
                                " ranges overlap");
        }
    for (auto& [coord, entry] : m.entries) {
        entry.split = SplitTag::unassigned;
        for (const auto& r : ranges)
            if (coord.iy >= r.range.begin && coord.iy < r.range.end) entry.split = r.tag;
    }
}

Image8 read_patch(const MosaicManifest& m, int ix, int iy) {
    const ManifestEntry* entry = m.find(ix, iy);
    if (!entry)
        throw DataError("no manifest entry for patch (" + std::to_string(ix) + "," +
                        std::to_string(iy) + ")");
    Image8 img = read_pgm(m.resolve(entry->image_path));
    if (img.width != m.patch_px || img.height != m.patch_px)
        throw DataError("patch (" + std::to_string(ix) + "," + std::to_string(iy) + "): image is " +
                        std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", manifest says " + std::to_string(m.patch_px));
    return img;
}

ClassMask read_label(const MosaicManifest& m, int ix, int iy) {
    const ManifestEntry* entry = m.find(ix, iy);
    if (!entry)
        throw DataError("no manifest entry for patch (" + std::to_string(ix) + "," +
                        std::to_string(iy) + ")");
    if (entry->label_path.empty())
        throw DataError("patch (" + std::to_string(ix) + "," + std::to_string(iy) +
                        ") has no label");
    Image8 img = read_pgm(m.resolve(entry->label_path));
    if (img.width != m.patch_px || img.height != m.patch_px)
        throw DataError("label (" + std::to_string(ix) + "," + std::to_string(iy) + ") is " +
                        std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", manifest says " + std::to_string(m.patch_px));
    return mask_from_image(img);
}

void write_label(const MosaicManifest& m, int ix, int iy, const ClassMask& mask) {
    const ManifestEntry* entry = m.find(ix, iy);
    if (!entry)
        throw DataError("no manifest entry for patch (" + std::to_string(ix) + "," +
                        std::to_string(iy) + ")");
    if (entry->label_path.empty())
        throw DataError("patch (" + std::to_string(ix) + "," + std::to_string(iy) +
                        ") has no label path to write");
    write_pgm(m.resolve(entry->label_path), image_from_mask(mask));
}

ClassMask downsample_labels(const ClassMask& mask, int factor) {
    if (factor <= 0) throw UsageError("downsample factor must be positive");
    if (factor == 1) return mask;
    if (mask.width % factor != 0 || mask.height % factor != 0)
        throw DataError("mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                        " is not divisible by downsample factor " + std::to_string(factor));
    ClassMask out;
    out.width = mask.width / factor;
    out.height = mask.height / factor;
    out.values.assign(static_cast<size_t>(out.width) * out.height, 0);
    for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
            int counts[3] = {0, 0, 0};
            for (int dy = 0; dy < factor; ++dy) {
                const uint8_t* row = &mask.values[static_cast<size_t>(oy * factor + dy) * mask.width +
                                                  static_cast<size_t>(ox) * factor];
                for (int dx = 0; dx < factor; ++dx) ++counts[row[dx]];
            }
            // ties go to the higher class id: myelin > axon > background
            int best = 0;
            for (int c = 1; c < 3; ++c)
                if (counts[c] >= counts[best]) best = c;
            out.at(ox, oy) = static_cast<uint8_t>(best);
        }
    }
    return out;
}

} // namespace callosum
