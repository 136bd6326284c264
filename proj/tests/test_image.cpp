#include "callosum/errors.hpp"
#include "callosum/image.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <fstream>

using namespace callosum;
using callosum::testing::TempDir;

namespace {

Image8 gradient_image(int w, int h) {
    Image8 img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(x, y) = static_cast<uint8_t>((x * 7 + y * 13) % 256);
    return img;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("pgm round-trips pixel-exactly") {
    TempDir dir;
    Image8 img = gradient_image(37, 21);
    write_pgm(dir / "a.pgm", img);
    Image8 back = read_pgm(dir / "a.pgm");
    CHECK(back.width == img.width);
    CHECK(back.height == img.height);
    CHECK(back.pixels == img.pixels);
    CHECK_FALSE(std::filesystem::exists(dir / "a.pgm.tmp"));
}

TEST_CASE("pgm reader accepts comments and mixed whitespace in the header") {
    TempDir dir;
    std::string data = "P5 # format\n# a comment line\n  3\t2 # dims\n255\n";
    data += std::string("\x01\x02\x03\x04\x05\x06", 6);
    write_bytes(dir / "c.pgm", data);
    Image8 img = read_pgm(dir / "c.pgm");
    CHECK(img.width == 3);
    CHECK(img.height == 2);
    CHECK(img.at(2, 1) == 6);
}

TEST_CASE("pgm reader rejects bad magic, maxval, and truncation") {
    TempDir dir;
    write_bytes(dir / "bad_magic.pgm", "P2\n2 2\n255\n");
    CHECK_THROWS_AS(read_pgm(dir / "bad_magic.pgm"), DataError);

    write_bytes(dir / "bad_maxval.pgm", std::string("P5\n2 1\n65535\n") + "abcd");
    CHECK_THROWS_AS(read_pgm(dir / "bad_maxval.pgm"), DataError);

    write_bytes(dir / "short.pgm", std::string("P5\n4 4\n255\n") + "xyz");
    CHECK_THROWS_AS(read_pgm(dir / "short.pgm"), DataError);

    CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), DataError);
}

TEST_CASE("mask round-trip and validation") {
    Image8 img;
    img.width = 3;
    img.height = 1;
    img.pixels = {0, 1, 2};
    ClassMask mask = mask_from_image(img);
    CHECK(mask.at(0, 0) == kClassBackground);
    CHECK(mask.at(1, 0) == kClassAxon);
    CHECK(mask.at(2, 0) == kClassMyelin);
    Image8 back = image_from_mask(mask);
    CHECK(back.pixels == img.pixels);

    img.pixels[1] = 7;
    try {
        mask_from_image(img);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        std::string msg = e.what();
        CHECK(msg.find('7') != std::string::npos);
    }
}

TEST_CASE("roi mask treats any nonzero pixel as inside") {
    Image8 img;
    img.width = 2;
    img.height = 2;
    img.pixels = {0, 1, 255, 0};
    RoiMask roi = roi_from_image(img);
    CHECK_FALSE(roi.at(0, 0));
    CHECK(roi.at(1, 0));
    CHECK(roi.at(0, 1));
    CHECK_FALSE(roi.at(1, 1));
}
