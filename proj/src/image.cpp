#include "callosum/image.hpp"
#include "callosum/errors.hpp"

#include <cstdio>
#include <fstream>
#include <string>

namespace callosum {

namespace {

// Reads one PGM header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (!isspace(c)) {
            tok.push_back(static_cast<char>(c));
            while ((c = in.peek()) != EOF && !isspace(c) && c != '#') {
                tok.push_back(static_cast<char>(in.get()));
            }
            break;
        }
    }
    return tok;
}

} // namespace

Image8 read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path.string());
    std::string magic = next_token(in);
    if (magic != "P5") throw DataError("not a binary PGM (P5): " + path.string());
    std::string ws = next_token(in);
    std::string hs = next_token(in);
    std::string ms = next_token(in);
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(ws);
        h = std::stoi(hs);
        maxval = std::stoi(ms);
    } catch (const std::exception&) {
        throw DataError("malformed PGM header: " + path.string());
    }
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw DataError("unsupported PGM geometry/maxval in " + path.string());
    }
    in.get(); // single whitespace after maxval
    Image8 img(w, h);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.size())) {
        throw DataError("truncated PGM payload: " + path.string());
    }
    return img;
}

void write_pgm(const std::filesystem::path& path, const Image8& img) {
    if (img.width <= 0 || img.height <= 0) throw UsageError("write_pgm: empty image");
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeFailure("cannot open for write: " + tmp.string());
        out << "P5\n" << img.width << " " << img.height << "\n255\n";
        out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.size()));
        if (!out) throw RuntimeFailure("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw RuntimeFailure("rename failed: " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

ClassMask mask_from_image(const Image8& img) {
    ClassMask mask(img.width, img.height);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        uint8_t v = img.pixels[i];
        if (v > 2) {
            throw DataError("invalid class value " + std::to_string(int(v)) +
                            " at pixel index " + std::to_string(i) + " (expected 0, 1 or 2)");
        }
        mask.values[i] = v;
    }
    return mask;
}

Image8 image_from_mask(const ClassMask& mask) {
    Image8 img(mask.width, mask.height);
    img.pixels = mask.values;
    return img;
}

RoiMask roi_from_image(const Image8& img) {
    RoiMask roi(img.width, img.height, false);
    for (size_t i = 0; i < img.pixels.size(); ++i) roi.inside[i] = img.pixels[i] != 0;
    return roi;
}

} // namespace callosum
