#pragma once

#include "callosum/image.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace callosum {

// Per-class pixel overlap counts; the unit of aggregation across patches.
struct IoUCounts {
    int64_t intersection_axon = 0;
    int64_t union_axon = 0;
    int64_t intersection_myelin = 0;
    int64_t union_myelin = 0;

    IoUCounts& operator+=(const IoUCounts& o) {
        intersection_axon += o.intersection_axon;
        union_axon += o.union_axon;
        intersection_myelin += o.intersection_myelin;
        union_myelin += o.union_myelin;
        return *this;
    }
};

struct IoUReport {
    double iou_axon = 1.0;
    double iou_myelin = 1.0;
    double miou = 1.0; // mean of the two foreground classes, background excluded
    IoUCounts counts;
    std::string region;
};

IoUCounts overlap_counts(const ClassMask& pred, const ClassMask& gt);

// |pred==c ∧ gt==c| / |pred==c ∨ gt==c|; 1.0 when both sets are empty.
double iou_class(const ClassMask& pred, const ClassMask& gt, uint8_t class_id);

IoUReport miou(const ClassMask& pred, const ClassMask& gt);

// Micro-average: pixel counts are pooled over all patches before dividing.
IoUReport report_from_counts(const IoUCounts& counts, const std::string& region);

struct BenchmarkRow {
    std::string method;
    double miou = 0.0;
    double iou_axon = -1.0; // negative = not applicable (reference rows)
    double iou_myelin = -1.0;
    std::string source; // "local" or "paper-reported (not locally reproduced)"
};

// Published reference mIoU values for the benchmark table.
const std::vector<BenchmarkRow>& reference_rows();

// Local results first, then the fixed reference rows.
std::vector<BenchmarkRow> benchmark_rows(const std::vector<BenchmarkRow>& local);

// Aligned plain-text table.
std::string format_benchmark_table(const std::vector<BenchmarkRow>& rows);

// `method,miou,iou_axon,iou_myelin,source`; empty IoU fields for reference rows.
std::string benchmark_csv(const std::vector<BenchmarkRow>& rows);

} // namespace callosum
