#include "callosum/evaluate.hpp"

#include "callosum/errors.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <sstream>

namespace callosum {

namespace {

void require_same_dims(const ClassMask& a, const ClassMask& b) {
    if (a.width != b.width || a.height != b.height)
        throw DataError("mask dimension mismatch: " + std::to_string(a.width) + "x" +
                        std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                        std::to_string(b.height));
}

double ratio_or_one(int64_t inter, int64_t uni) {
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

} // namespace

IoUCounts overlap_counts(const ClassMask& pred, const ClassMask& gt) {
    require_same_dims(pred, gt);
    IoUCounts c;
    const size_t n = pred.values.size();
    for (size_t i = 0; i < n; ++i) {
        uint8_t p = pred.values[i], g = gt.values[i];
        bool pa = p == kClassAxon, ga = g == kClassAxon;
        bool pm = p == kClassMyelin, gm = g == kClassMyelin;
        c.intersection_axon += pa && ga;
        c.union_axon += pa || ga;
        c.intersection_myelin += pm && gm;
        c.union_myelin += pm || gm;
    }
    return c;
}

double iou_class(const ClassMask& pred, const ClassMask& gt, uint8_t class_id) {
    if (class_id != kClassAxon && class_id != kClassMyelin)
        throw UsageError("iou_class: class_id must be 1 (axon) or 2 (myelin)");
    IoUCounts c = overlap_counts(pred, gt);
    if (class_id == kClassAxon) return ratio_or_one(c.intersection_axon, c.union_axon);
    return ratio_or_one(c.intersection_myelin, c.union_myelin);
}

IoUReport report_from_counts(const IoUCounts& counts, const std::string& region) {
    IoUReport r;
    r.counts = counts;
    r.region = region;
    r.iou_axon = ratio_or_one(counts.intersection_axon, counts.union_axon);
    r.iou_myelin = ratio_or_one(counts.intersection_myelin, counts.union_myelin);
    r.miou = 0.5 * (r.iou_axon + r.iou_myelin);
    return r;
}

IoUReport miou(const ClassMask& pred, const ClassMask& gt) {
    return report_from_counts(overlap_counts(pred, gt), "");
}

const std::vector<BenchmarkRow>& reference_rows() {
    static const std::vector<BenchmarkRow> rows = {
        {"UNet", 0.919, -1.0, -1.0, "paper-reported (not locally reproduced)"},
        {"Scratched ViT-Base", 0.947, -1.0, -1.0, "paper-reported (not locally reproduced)"},
        {"MAE-Base", 0.966, -1.0, -1.0, "paper-reported (not locally reproduced)"},
        {"BEiT-Base", 0.962, -1.0, -1.0, "paper-reported (not locally reproduced)"},
        {"EM-SAM-Base", 0.984, -1.0, -1.0, "paper-reported (not locally reproduced)"},
    };
    return rows;
}

std::vector<BenchmarkRow> benchmark_rows(const std::vector<BenchmarkRow>& local) {
    std::vector<BenchmarkRow> rows = local;
    for (auto& r : rows)
        if (r.source.empty()) r.source = "local";
    const auto& ref = reference_rows();
    rows.insert(rows.end(), ref.begin(), ref.end());
    return rows;
}

std::string format_benchmark_table(const std::vector<BenchmarkRow>& rows) {
    size_t name_w = 6;
    for (const auto& r : rows) name_w = std::max(name_w, r.method.size());
    std::ostringstream out;
    out << "method";
    out << std::string(name_w - 6, ' ') << "  miou   iou_axon  iou_myelin  source\n";
    for (const auto& r : rows) {
        out << r.method << std::string(name_w - r.method.size(), ' ');
        out << "  " << fmt3(r.miou);
        out << "  " << (r.iou_axon < 0.0 ? "   -   " : " " + fmt3(r.iou_axon) + "  ");
        out << "  " << (r.iou_myelin < 0.0 ? "    -    " : "  " + fmt3(r.iou_myelin) + "   ");
        out << "  " << r.source << '\n';
    }
    return out.str();
}

std::string benchmark_csv(const std::vector<BenchmarkRow>& rows) {
    std::ostringstream out;
    out << "method,miou,iou_axon,iou_myelin,source\n";
    for (const auto& r : rows) {
        out << r.method << ',' << fmt3(r.miou) << ',';
        if (r.iou_axon >= 0.0) out << fmt3(r.iou_axon);
        out << ',';
        if (r.iou_myelin >= 0.0) out << fmt3(r.iou_myelin);
        out << ',' << r.source << '\n';
    }
    return out.str();
}

} // namespace callosum
