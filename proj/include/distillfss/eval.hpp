#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "distillfss/data.hpp"
#include "distillfss/metrics.hpp"
#include "distillfss/student.hpp"
#include "distillfss/teacher.hpp"

namespace distillfss {

using ModelRef = std::variant<const Teacher*, const Student*>;

std::string model_name(const ModelRef& model);

// Global-accumulation mIoU over classes 1..N of the test set. A teacher needs
// a support set; passing one to a student is an error.
Metrics evaluate(const ModelRef& model, const Dataset& test, const SupportSet* support, int support_batch = 10);

struct BenchRecord {
    std::string model;
    int k = 0;
    int n = 0;
    int image_size = 0;
    double latency_ms_median = 0.0;
    std::size_t peak_bytes = 0;  // peak tensor memory above the pre-call level
    std::uint64_t flops = 0;
};

struct BenchOptions {
    std::vector<int> shots{1, 5, 10, 25, 50};
    std::vector<int> ways{1};
    int image_size = 64;
    int repeats = 20;
    int warmup = 3;
    int support_batch = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

// Times full multiclass forwards (support encoding included for the teacher)
// on synthetic inputs for every (K, N) pair.
std::vector<BenchRecord> bench_inference(const ModelRef& model, const BenchOptions& options);

// K images per class, class m % N + 1 drawn as a rectangle on image m.
SupportSet bench_support(int shots, int ways, int image_size, std::uint64_t seed);

struct MiouPoint {
    std::string model;
    int m = 0;
    double miou = 0.0;
};

struct ReportFiles {
    std::filesystem::path csv;
    std::vector<std::filesystem::path> plots;
};

inline constexpr const char* kBenchCsvHeader = "model,K,N,image_size,latency_ms_median,peak_bytes,flops";

std::string bench_csv(std::span<const BenchRecord> records);

// Writes bench.csv plus latency_vs_k.png and memory_vs_k.png (when there are
// records) and miou_vs_m.png (when there are mIoU points).
ReportFiles emit_report(std::span<const BenchRecord> records, std::span<const MiouPoint> miou_points,
                        const std::filesystem::path& out_dir);

}  // namespace distillfss
