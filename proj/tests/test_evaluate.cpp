#include "callosum/errors.hpp"
#include "callosum/evaluate.hpp"
#include "callosum/rng.hpp"

#include <doctest.h>

#include <set>

using namespace callosum;

namespace {

ClassMask mask_of(int w, int h, std::initializer_list<uint8_t> vals) {
    ClassMask m;
    m.width = w;
    m.height = h;
    m.values = vals;
    return m;
}

ClassMask random_mask(Rng& rng, int w, int h) {
    ClassMask m;
    m.width = w;
    m.height = h;
    m.values.resize(static_cast<size_t>(w) * h);
    for (auto& v : m.values) v = static_cast<uint8_t>(rng.int_range(0, 2));
    return m;
}

// brute-force oracle via explicit pixel index sets
double set_iou(const ClassMask& a, const ClassMask& b, uint8_t cls) {
    std::set<size_t> sa, sb, inter, uni;
    for (size_t i = 0; i < a.values.size(); ++i) {
        if (a.values[i] == cls) sa.insert(i);
        if (b.values[i] == cls) sb.insert(i);
    }
    for (size_t i : sa) {
        uni.insert(i);
        if (sb.count(i)) inter.insert(i);
    }
    for (size_t i : sb) uni.insert(i);
    if (uni.empty()) return 1.0;
    return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

} // namespace

TEST_CASE("identical masks score 1.0 and absent classes use the empty-set rule") {
    ClassMask m = mask_of(2, 2, {0, 1, 2, 1});
    CHECK(iou_class(m, m, kClassAxon) == 1.0);
    CHECK(iou_class(m, m, kClassMyelin) == 1.0);
    CHECK(miou(m, m).miou == 1.0);

    ClassMask bg = mask_of(2, 2, {0, 0, 0, 0});
    CHECK(iou_class(bg, bg, kClassAxon) == 1.0); // both empty
    IoUReport r = miou(bg, bg);
    CHECK(r.miou == 1.0);
}

TEST_CASE("shifted 2x2 block gives IoU 1/3") {
    // gt: 2x2 axon block at (1,1); pred: same block at (2,1) in a 5x4 grid
    ClassMask gt, pred;
    gt.width = pred.width = 5;
    gt.height = pred.height = 4;
    gt.values.assign(20, 0);
    pred.values.assign(20, 0);
    for (int y = 1; y <= 2; ++y)
        for (int x = 1; x <= 2; ++x) gt.at(x, y) = kClassAxon;
    for (int y = 1; y <= 2; ++y)
        for (int x = 2; x <= 3; ++x) pred.at(x, y) = kClassAxon;
    CHECK(iou_class(pred, gt, kClassAxon) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    IoUCounts c = overlap_counts(pred, gt);
    CHECK(c.intersection_axon == 2);
    CHECK(c.union_axon == 6);
}

TEST_CASE("all-background prediction against a two-class gt scores zero") {
    ClassMask gt = mask_of(2, 2, {1, 2, 1, 2});
    ClassMask pred = mask_of(2, 2, {0, 0, 0, 0});
    IoUReport r = miou(pred, gt);
    CHECK(r.miou == 0.0);
    CHECK(r.iou_axon == 0.0);
    CHECK(r.iou_myelin == 0.0);
}

TEST_CASE("miou matches a set-arithmetic oracle on random masks") {
    Rng rng(808);
    for (int trial = 0; trial < 30; ++trial) {
        ClassMask a = random_mask(rng, 16, 16);
        ClassMask b = random_mask(rng, 16, 16);
        IoUReport r = miou(a, b);
        double oa = set_iou(a, b, kClassAxon);
        double om = set_iou(a, b, kClassMyelin);
        CHECK(r.iou_axon == doctest::Approx(oa).epsilon(1e-12));
        CHECK(r.iou_myelin == doctest::Approx(om).epsilon(1e-12));
        CHECK(r.miou == doctest::Approx(0.5 * (oa + om)).epsilon(1e-12));
        CHECK(r.miou >= 0.0);
        CHECK(r.miou <= 1.0);
    }
}

TEST_CASE("iou is symmetric and improves when a wrong pixel is repaired") {
    Rng rng(909);
    for (int trial = 0; trial < 10; ++trial) {
        ClassMask a = random_mask(rng, 12, 12);
        ClassMask b = random_mask(rng, 12, 12);
        CHECK(iou_class(a, b, kClassAxon) == iou_class(b, a, kClassAxon));
        CHECK(iou_class(a, b, kClassMyelin) == iou_class(b, a, kClassMyelin));

        // flip one wrong pixel to the gt class; that class's IoU must not drop
        for (int rep = 0; rep < 20; ++rep) {
            size_t i = static_cast<size_t>(rng.int_range(0, 143));
            if (a.values[i] == b.values[i]) continue;
            uint8_t cls = b.values[i];
            if (cls == kClassBackground) continue;
            double before = iou_class(a, b, cls);
            ClassMask repaired = a;
            repaired.values[i] = cls;
            double after = iou_class(repaired, b, cls);
            CHECK(after >= before);
        }
    }
}

TEST_CASE("dimension mismatch and bad class ids are rejected") {
    ClassMask a = mask_of(2, 1, {0, 1});
    ClassMask b = mask_of(1, 2, {0, 1});
    CHECK_THROWS_AS(miou(a, b), DataError);
    ClassMask c = mask_of(2, 1, {0, 1});
    CHECK_THROWS_AS(iou_class(a, c, 0), UsageError);
    CHECK_THROWS_AS(iou_class(a, c, 3), UsageError);
}

TEST_CASE("region aggregation is a micro-average over pooled counts") {
    // patch 1: axon inter 1, union 2; patch 2: axon inter 0, union 2
    ClassMask gt1 = mask_of(2, 1, {1, 1});
    ClassMask pred1 = mask_of(2, 1, {1, 0});
    ClassMask gt2 = mask_of(2, 1, {0, 1});
    ClassMask pred2 = mask_of(2, 1, {1, 0});
    IoUCounts pooled = overlap_counts(pred1, gt1);
    pooled += overlap_counts(pred2, gt2);
    IoUReport r = report_from_counts(pooled, "genu");
    CHECK(r.region == "genu");
    CHECK(r.iou_axon == doctest::Approx(1.0 / 4.0).epsilon(1e-12));
    // macro average would be (0.5 + 0.0)/2 = 0.25 here too; distinguish with a
    // second case where the difference shows
    IoUCounts p2 = overlap_counts(pred1, gt1); // 1/2
    ClassMask gt3 = mask_of(2, 1, {1, 0});
    ClassMask pred3 = mask_of(2, 1, {1, 0});
    p2 += overlap_counts(pred3, gt3); // 1/1
    IoUReport r2 = report_from_counts(p2, "");
    CHECK(r2.iou_axon == doctest::Approx(2.0 / 3.0).epsilon(1e-12)); // not (0.5+1.0)/2
}

TEST_CASE("benchmark table carries the published reference values") {
    const auto& ref = reference_rows();
    REQUIRE(ref.size() == 5);
    CHECK(ref[0].method == "UNet");
    CHECK(ref[0].miou == 0.919);
    CHECK(ref[1].miou == 0.947);
    CHECK(ref[2].miou == 0.966);
    CHECK(ref[3].miou == 0.962);
    CHECK(ref[4].method == "EM-SAM-Base");
    CHECK(ref[4].miou == 0.984);
    for (const auto& r : ref) CHECK(r.source == "paper-reported (not locally reproduced)");

    auto rows = benchmark_rows({});
    CHECK(rows.size() == 5); // reference only

    BenchmarkRow local{"ours", 0.91, 0.9, 0.92, ""};
    rows = benchmark_rows({local});
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].method == "ours");
    CHECK(rows[0].source == "local");

    std::string table = format_benchmark_table(rows);
    CHECK(table.find("0.919") != std::string::npos);
    CHECK(table.find("0.984") != std::string::npos);
    CHECK(table.find("paper-reported (not locally reproduced)") != std::string::npos);

    std::string csv = benchmark_csv(rows);
    CHECK(csv.rfind("method,miou,iou_axon,iou_myelin,source\n", 0) == 0);
    CHECK(csv.find("ours,0.910,0.900,0.920,local\n") != std::string::npos);
    CHECK(csv.find("UNet,0.919,,,paper-reported (not locally reproduced)\n") != std::string::npos);
}
