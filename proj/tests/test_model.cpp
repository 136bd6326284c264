#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "callosum/checkpoint.hpp"
#include "callosum/errors.hpp"
#include "callosum/model.hpp"
#include "callosum/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace callosum;
using callosum::testing::TempDir;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.input_px = 32;
    c.token_patch_px = 16;
    c.in_channels = 1;
    c.embed_dim = 16;
    c.depth = 4;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.decoder_base = 2;
    return c;
}

EncoderConfig wide_config() {
    EncoderConfig c;
    c.input_px = 48;
    c.token_patch_px = 16;
    c.in_channels = 3;
    c.embed_dim = 24;
    c.depth = 5;
    c.heads = 4;
    c.mlp_ratio = 4;
    c.decoder_base = 4;
    return c;
}

int64_t expected_param_count(const EncoderConfig& c) {
    const int64_t d = c.embed_dim, cin = c.in_channels, p = c.token_patch_px;
    const int64_t g = c.input_px / p;
    const int64_t h = static_cast<int64_t>(c.mlp_ratio) * d;
    const int64_t b1 = c.decoder_base, b0 = b1, b2 = 2 * b1, b3 = 4 * b1, b4 = 8 * b1;
    int64_t enc = d * cin * p * p + d + g * g * d;
    enc += c.depth * (2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (h * d + h) + (d * h + d));
    int64_t dec = b4 * d + b4;
    dec += d * b3 * 4 + b3;
    dec += d * b2 * 4 + b2;
    dec += b2 * b2 * 4 + b2;
    dec += d * b1 * 4 + b1;
    dec += 2 * (b1 * b1 * 4 + b1);
    dec += b4 * b3 * 4 + b3;
    dec += b3 * b2 * 4 + b2;
    dec += b2 * b1 * 4 + b1;
    dec += b1 * b0 * 4 + b0;
    dec += b3 * (2 * b3) * 9 + b3;
    dec += b2 * (2 * b2) * 9 + b2;
    dec += b1 * (2 * b1) * 9 + b1;
    dec += b0 * b0 * 9 + b0;
    dec += 2 * b0 + 2;
    return enc + dec;
}

template <typename T>
std::vector<T> random_gray(int b, int s, uint64_t seed) {
    Rng rng(seed);
    std::vector<T> out(static_cast<size_t>(b) * s * s);
    for (T& v : out) v = static_cast<T>(rng.uniform());
    return out;
}

std::vector<uint8_t> random_targets(int b, int s, uint64_t seed) {
    Rng rng(seed);
    std::vector<uint8_t> out(static_cast<size_t>(b) * s * s);
    for (uint8_t& v : out) v = static_cast<uint8_t>(rng.int_range(0, 2));
    return out;
}

} // namespace

TEST_CASE("encoder config validates fields and tap layout") {
    EncoderConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());

    EncoderConfig bad = c;
    bad.tap_layers = {1, 2, 3, 5};
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = c;
    bad.tap_layers = {1, 3, 3, 4};
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("strictly increasing"), UsageError);

    bad = c;
    bad.tap_layers = {1, 2, 3};
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = c;
    bad.token_patch_px = 8;
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = c;
    bad.input_px = 40;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("divisible"), UsageError);

    bad = c;
    bad.embed_dim = 18;
    bad.heads = 4;
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = c;
    bad.in_channels = 2;
    CHECK_THROWS_AS(bad.validate(), UsageError);

    bad = c;
    bad.depth = 3;
    CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("default taps pick quarter-depth block outputs") {
    EncoderConfig c = tiny_config();
    c.depth = 12;
    CHECK(c.effective_taps() == std::vector<int>{3, 6, 9, 12});
    c.depth = 4;
    CHECK(c.effective_taps() == std::vector<int>{1, 2, 3, 4});
    c.depth = 5;
    CHECK(c.effective_taps() == std::vector<int>{1, 2, 3, 5});
}

TEST_CASE("encoder config json round-trips") {
    EncoderConfig c = wide_config();
    c.tap_layers = {2, 3, 4, 5};
    const std::string text = c.to_json();
    EncoderConfig back = EncoderConfig::from_json(text);
    CHECK(back.input_px == c.input_px);
    CHECK(back.in_channels == c.in_channels);
    CHECK(back.embed_dim == c.embed_dim);
    CHECK(back.depth == c.depth);
    CHECK(back.heads == c.heads);
    CHECK(back.mlp_ratio == c.mlp_ratio);
    CHECK(back.decoder_base == c.decoder_base);
    CHECK(back.effective_taps() == c.tap_layers);

    CHECK_THROWS_AS(EncoderConfig::from_json("not json"), DataError);
    CHECK_THROWS_AS(EncoderConfig::from_json("[1,2]"), DataError);
    CHECK_THROWS_AS(EncoderConfig::from_json("{\"embed_dim\":\"big\"}"), DataError);
    CHECK_THROWS_AS(EncoderConfig::from_json("{\"depth\":3}"), DataError);
}

TEST_CASE("parameter count matches the closed form") {
    for (const EncoderConfig& c : {tiny_config(), wide_config()}) {
        SegModel m(c, 1);
        CHECK(m.parameter_count() == expected_param_count(c));
        std::set<std::string> names;
        int64_t total = 0;
        for (const auto& p : m.params()) {
            CHECK(names.insert(p.name).second);
            total += p.count();
        }
        CHECK(total == m.parameter_count());
    }
}

TEST_CASE("forward output is a bounded two-channel field, finite on zero input") {
    const EncoderConfig c = tiny_config();
    SegModel m(c, 5);
    const int s = c.input_px;
    std::vector<float> zero(static_cast<size_t>(s) * s, 0.0f), probs;
    m.predict(zero.data(), 1, probs);
    REQUIRE(probs.size() == 2 * zero.size());
    for (float v : probs) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    const auto gray = random_gray<float>(2, s, 42);
    m.predict(gray.data(), 2, probs);
    REQUIRE(probs.size() == 4 * static_cast<size_t>(s) * s);
    for (float v : probs) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("batch items are processed independently") {
    const EncoderConfig c = tiny_config();
    SegModel m(c, 9);
    const int s = c.input_px;
    const size_t plane = static_cast<size_t>(s) * s;
    const auto gray = random_gray<float>(2, s, 77);
    std::vector<float> joint, alone_a, alone_b;
    m.predict(gray.data(), 2, joint);
    m.predict(gray.data(), 1, alone_a);
    m.predict(gray.data() + plane, 1, alone_b);
    CHECK(std::memcmp(joint.data(), alone_a.data(), alone_a.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(joint.data() + alone_a.size(), alone_b.data(),
                      alone_b.size() * sizeof(float)) == 0);
}

TEST_CASE("initialization and prediction are deterministic in the seed") {
    const EncoderConfig c = tiny_config();
    SegModel a(c, 123), b(c, 123), other(c, 124);
    bool same = true, differs = false;
    for (size_t i = 0; i < a.params().size(); ++i) {
        same = same && a.params()[i].w == b.params()[i].w;
        differs = differs || a.params()[i].w != other.params()[i].w;
    }
    CHECK(same);
    CHECK(differs);

    const auto gray = random_gray<float>(1, c.input_px, 3);
    std::vector<float> p1, p2;
    a.predict(gray.data(), 1, p1);
    a.predict(gray.data(), 1, p2);
    CHECK(p1 == p2);
}

TEST_CASE("class decision thresholds both channels and breaks ties toward myelin") {
    CHECK(to_class(0.4f, 0.4f, 0.5f) == kClassBackground);
    CHECK(to_class(0.6f, 0.3f, 0.5f) == kClassAxon);
    CHECK(to_class(0.3f, 0.6f, 0.5f) == kClassMyelin);
    CHECK(to_class(0.7f, 0.7f, 0.5f) == kClassMyelin);
    CHECK(to_class(0.5f, 0.3f, 0.5f) == kClassAxon);
    CHECK(to_class(0.2f, 0.1f, 0.15f) == kClassAxon);
    CHECK_THROWS_AS(to_class(0.5f, 0.5f, 0.0f), UsageError);
    CHECK_THROWS_AS(to_class(0.5f, 0.5f, 1.0f), UsageError);

    std::vector<float> probs = {0.9f, 0.2f, 0.1f, 0.7f,
                                0.1f, 0.8f, 0.3f, 0.2f};
    ClassMask mask = to_class_mask(probs, 2, 2, 0.5f);
    CHECK(mask.at(0, 0) == kClassAxon);
    CHECK(mask.at(1, 0) == kClassMyelin);
    CHECK(mask.at(0, 1) == kClassBackground);
    CHECK(mask.at(1, 1) == kClassAxon);
    CHECK_THROWS_AS(to_class_mask(probs, 3, 2, 0.5f), UsageError);
}

TEST_CASE("snapshot round-trip restores parameters and predictions exactly") {
    TempDir dir;
    const EncoderConfig c = tiny_config();
    SegModel m(c, 31);
    const auto path = dir / "model.ckpt";
    save_snapshot(m, path, "{\"step\":42}");

    const Checkpoint raw = load_checkpoint(path);
    CHECK(raw.meta_json.find("\"step\":42") != std::string::npos);
    CHECK(raw.meta_json.find("\"kind\":\"seg-snapshot\"") != std::string::npos);

    const EncoderConfig embedded = snapshot_config(path);
    CHECK(embedded.to_json() == c.to_json());

    SegModel back = load_snapshot(path);
    REQUIRE(back.params().size() == m.params().size());
    for (size_t i = 0; i < m.params().size(); ++i) {
        CHECK(back.params()[i].name == m.params()[i].name);
        CHECK(back.params()[i].w == m.params()[i].w);
    }
    const auto gray = random_gray<float>(1, c.input_px, 8);
    std::vector<float> pa, pb;
    m.predict(gray.data(), 1, pa);
    back.predict(gray.data(), 1, pb);
    CHECK(pa == pb);

    CHECK_THROWS_AS(save_snapshot(m, dir / "x.ckpt", "{\"config\":1}"), UsageError);
    CHECK_THROWS_AS(save_snapshot(m, dir / "x.ckpt", "[1]"), UsageError);

    Checkpoint crippled = raw;
    crippled.tensors.erase(crippled.tensors.begin() + 5);
    save_checkpoint(crippled, dir / "crippled.ckpt");
    CHECK_THROWS_WITH_AS(load_snapshot(dir / "crippled.ckpt"), doctest::Contains("missing tensor"),
                         DataError);
}

TEST_CASE("surgery import partitions donor tensors and keeps the decoder fresh") {
    TempDir dir;
    EncoderConfig donor_cfg = wide_config(); // 3 channels, depth 5, 64 would differ; grid 3x3
    donor_cfg.input_px = 64;
    donor_cfg.embed_dim = 16;
    donor_cfg.heads = 2;
    donor_cfg.mlp_ratio = 2;
    donor_cfg.decoder_base = 2;
    donor_cfg.tap_layers = {1, 2, 3, 5};
    SegModel donor(donor_cfg, 11);
    {
        auto* pos = donor.find_param("image_encoder.pos_embed");
        REQUIRE(pos != nullptr);
        std::fill(pos->w.begin(), pos->w.end(), 0.7f);
    }
    save_snapshot(donor, dir / "donor.ckpt");
    Checkpoint ckpt = load_checkpoint(dir / "donor.ckpt");
    ckpt.add("prompt_encoder.point_embeddings.weight", {4, 16});
    ckpt.add("mask_decoder.iou_token.weight", {1, 16});
    ckpt.add("image_encoder.neck.0.weight", {16, 16});
    ckpt.add("stray.weight", {2});

    EncoderConfig cfg = tiny_config(); // grayscale, depth 4, grid 2x2
    LoadReport rep;
    SegModel m = surgery_import(ckpt, cfg, 22, &rep);

    CHECK(m.config().in_channels == 3); // adopted from the donor patch embedding
    CHECK(m.config().depth == 4);

    std::set<std::string> all;
    for (const auto& name : rep.loaded) CHECK(all.insert(name).second);
    for (const auto& name : rep.discarded) CHECK(all.insert(name).second);
    for (const auto& name : rep.missing) CHECK(all.insert(name).second);
    CHECK(all.size() == ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) CHECK(all.count(t.name) == 1);

    CHECK(rep.discarded == std::vector<std::string>{"prompt_encoder.point_embeddings.weight",
                                                    "mask_decoder.iou_token.weight",
                                                    "image_encoder.neck.0.weight"});
    const auto in_missing = [&](const std::string& n) {
        return std::find(rep.missing.begin(), rep.missing.end(), n) != rep.missing.end();
    };
    CHECK(in_missing("decoder.head.weight"));
    CHECK(in_missing("image_encoder.blocks.4.attn.qkv.weight"));
    CHECK(in_missing("stray.weight"));
    for (const auto& name : rep.loaded) {
        CHECK(name.rfind("image_encoder.", 0) == 0);
        CHECK(name.rfind("image_encoder.blocks.4.", 0) != 0);
    }

    CHECK(rep.pos_resampled);
    CHECK(rep.summary().find("resampled") != std::string::npos);
    {
        auto* pos = m.find_param("image_encoder.pos_embed");
        for (float v : pos->w) CHECK(v == doctest::Approx(0.7).epsilon(1e-5));
    }

    // encoder weights come from the donor bit-for-bit
    CHECK(m.find_param("image_encoder.blocks.0.attn.qkv.weight")->w ==
          donor.find_param("image_encoder.blocks.0.attn.qkv.weight")->w);
    CHECK(rep.fresh.size() > 0);

    // decoder parameters equal a fresh seed-22 initialization of the same shape
    EncoderConfig adopted = cfg;
    adopted.in_channels = 3;
    SegModel fresh(adopted, 22);
    for (const auto& name : {"decoder.head.weight", "decoder.fuse2.weight", "decoder.up1.weight"}) {
        CHECK(m.find_param(name)->w == fresh.find_param(name)->w);
        CHECK(std::find(rep.fresh.begin(), rep.fresh.end(), name) != rep.fresh.end());
    }

    // the imported model still consumes single-channel input
    const auto gray = random_gray<float>(1, cfg.input_px, 6);
    std::vector<float> probs;
    m.predict(gray.data(), 1, probs);
    CHECK(probs.size() == 2 * static_cast<size_t>(cfg.input_px) * cfg.input_px);
}

TEST_CASE("surgery accepts a leading singleton on the positional grid") {
    TempDir dir;
    EncoderConfig cfg = tiny_config();
    SegModel donor(cfg, 4);
    save_snapshot(donor, dir / "d.ckpt");
    Checkpoint ckpt = load_checkpoint(dir / "d.ckpt");
    Tensor* pos = ckpt.find("image_encoder.pos_embed");
    REQUIRE(pos != nullptr);
    pos->dims = {1, 2, 2, 16};
    LoadReport rep;
    SegModel m = surgery_import(ckpt, cfg, 2, &rep);
    CHECK(!rep.pos_resampled);
    CHECK(m.find_param("image_encoder.pos_embed")->w == donor.find_param("image_encoder.pos_embed")->w);
}

TEST_CASE("surgery rejects unusable donors with clear errors") {
    TempDir dir;
    const EncoderConfig cfg = tiny_config();
    SegModel donor(cfg, 1);
    save_snapshot(donor, dir / "d.ckpt");
    Checkpoint ckpt = load_checkpoint(dir / "d.ckpt");

    EncoderConfig wider = cfg;
    wider.embed_dim = 24;
    wider.heads = 2;
    try {
        surgery_import(ckpt, wider, 0, nullptr);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("16") != std::string::npos);
        CHECK(msg.find("24") != std::string::npos);
    }

    Checkpoint empty;
    empty.add("prompt_encoder.only.weight", {2, 2});
    CHECK_THROWS_WITH_AS(surgery_import(empty, cfg, 0, nullptr),
                         doctest::Contains("no image encoder tensors"), DataError);

    Checkpoint bad_shape = ckpt;
    Tensor* qkv = bad_shape.find("image_encoder.blocks.0.attn.qkv.weight");
    REQUIRE(qkv != nullptr);
    qkv->dims = {48, 17};
    qkv->values.assign(48 * 17, 0.1f);
    CHECK_THROWS_WITH_AS(surgery_import(bad_shape, cfg, 0, nullptr),
                         doctest::Contains("image_encoder.blocks.0.attn.qkv.weight"), DataError);
}

TEST_CASE("blocks above the deepest tap receive no gradient") {
    EncoderConfig c = tiny_config();
    c.depth = 5;
    c.tap_layers = {1, 2, 3, 4};
    SegModelT<double> m(c, 13);
    const int s = c.input_px;
    const auto gray = random_gray<double>(1, s, 5);
    const auto targets = random_targets(1, s, 6);
    m.zero_grad();
    m.forward_backward(gray.data(), targets.data(), 1, 1e-7);

    double dangling = 0.0, used = 0.0;
    for (const auto& p : m.params()) {
        double mag = 0.0;
        for (double v : p.g) mag += std::abs(v);
        if (p.name.rfind("image_encoder.blocks.4.", 0) == 0) dangling += mag;
        if (p.name.rfind("image_encoder.blocks.3.", 0) == 0) used += mag;
    }
    CHECK(dangling == 0.0);
    CHECK(used > 0.0);
}

TEST_CASE("analytic gradients match central differences") {
    const EncoderConfig c = tiny_config();
    SegModelT<double> m(c, 17);
    const int s = c.input_px;
    const int b = 2;
    const auto gray = random_gray<double>(b, s, 21);
    const auto targets = random_targets(b, s, 22);
    const double eps = 1e-7;

    m.zero_grad();
    const double loss = m.forward_backward(gray.data(), targets.data(), b, eps);
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(m.loss_only(gray.data(), targets.data(), b, eps)).epsilon(1e-12));

    Rng pick(404);
    // Shrinking step sizes: a ReLU kink inside [w-delta, w+delta] corrupts the
    // central difference, but drops out once delta falls below the distance to
    // the kink. A wrong analytic gradient disagrees at every step size.
    const double deltas[] = {1e-5, 1e-6, 1e-7, 1e-9};
    for (auto& p : m.params()) {
        const int probes = p.count() == 1 ? 1 : 2;
        for (int q = 0; q < probes; ++q) {
            const int64_t i = pick.int_range(0, p.count() - 1);
            const double saved = p.w[static_cast<size_t>(i)];
            const double an = p.g[static_cast<size_t>(i)];
            double best_fd = 0.0, best_err = 1e30;
            for (const double delta : deltas) {
                p.w[static_cast<size_t>(i)] = saved + delta;
                const double lp = m.loss_only(gray.data(), targets.data(), b, eps);
                p.w[static_cast<size_t>(i)] = saved - delta;
                const double lm = m.loss_only(gray.data(), targets.data(), b, eps);
                p.w[static_cast<size_t>(i)] = saved;
                const double fd = (lp - lm) / (2 * delta);
                const double mag = std::max(std::abs(an), std::abs(fd));
                const double err = std::abs(an - fd) / std::max(mag, 1e-6);
                if (err < best_err) {
                    best_err = err;
                    best_fd = fd;
                }
                if (best_err < 1e-3) break;
            }
            INFO(p.name << "[" << i << "] analytic=" << an << " fd=" << best_fd);
            CHECK(best_err < 1e-3);
        }
    }
}
