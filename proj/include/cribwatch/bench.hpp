#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cribwatch/classify.hpp"
#include "cribwatch/frames.hpp"
#include "cribwatch/util.hpp"

namespace cribwatch::bench {

// Sample statistics (std is the n-1 flavor).
struct LatencyStats {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;
    std::size_t n = 0;
};

LatencyStats compute_stats(const std::vector<double>& samples_ms);

struct Measurement {
    LatencyStats stats;
    double peak_memory_mb = 0.0; // peak RSS increment over the run baseline
};

// Timed calls around the backend with warmup excluded and a concurrent
// >= 10 Hz memory probe. Requires n >= 30, warmup >= 1.
Measurement measure_backend(classify::ClassifierBackend& backend,
                            const detect::RoiTensor& roi_fixture, const classify::TaskSpec& task,
                            int n, int warmup);

struct CostRange {
    double lo_ms = 0.0;
    double hi_ms = 0.0;

    double mid() const { return 0.5 * (lo_ms + hi_ms); }
    void validate(const char* what) const;
};

// Analytical per-frame latency decomposition. Face/pose scale with
// resolution area; read and per-face inference do not. Init and network
// are reported but excluded from the per-frame budget (async/amortized).
struct CostModel {
    CostRange read{10.0, 33.0};
    CostRange face{10.0, 50.0};
    CostRange pose{20.0, 60.0};
    CostRange infer_per_face{5.0, 20.0};
    CostRange init{100.0, 1000.0};
    CostRange network{50.0, 200.0};
    frames::Resolution reference{1280, 720};

    void validate() const;
    static CostModel from_json(const nlohmann::json& j);
    static CostModel load(const std::string& path);
};

// O(HW) stages scaled by area ratio against the reference resolution.
CostModel scale_cost(const CostModel& model, const frames::Resolution& resolution);

struct FeasibilityResult {
    CostRange per_frame; // amortized by skip
    int faces = 0;
    double target_fps = 0.0;
    int skip = 1;
    bool include_pose = false;
    bool feasible_lo = false;
    bool feasible_mid = false;
    bool feasible_hi = false;
    std::string limiting_stage; // largest midpoint contributor
    double budget_ms = 0.0;     // 1000 / target_fps
};

FeasibilityResult feasibility(const CostModel& model, int faces, double target_fps,
                              bool include_pose, int skip = 1);

struct BudgetVerdict {
    bool pass = false;
    double mean_ms = 0.0;
    double violation_rate = 0.0;
    std::string reason;
};

// Pass iff mean end-to-end <= budget and the violation rate stays < 1 %.
BudgetVerdict end_to_end_budget_check(double mean_end_to_end_ms, std::size_t frames_processed,
                                      std::size_t budget_violations, double budget_ms = 1000.0);

// One report row: a profile (verbatim text fields) or a measurement
// (shortest round-trip formatting).
struct BenchRow {
    std::string model;
    std::string memory_mb, mean_ms, std_ms, min_ms, max_ms, size_mb;
};

BenchRow row_from_profile(const classify::BackendProfile& p);
BenchRow row_from_measurement(const std::string& model, const Measurement& m, double size_mb);

// inference_bench.csv: model,memory_mb,mean_ms,std_ms,min_ms,max_ms,size_mb
// tradeoff_scatter.csv: model,mean_ms,memory_mb,size_mb
// Throws Error(validation_error) on an empty row set, Error(io_error) on
// write failure.
void emit_inference_csv(const std::string& path, const std::vector<BenchRow>& rows);
void emit_tradeoff_csv(const std::string& path, const std::vector<BenchRow>& rows);
std::vector<BenchRow> parse_inference_csv(const std::string& path);

// feasibility.csv rows for a configuration sweep.
struct SweepSpec {
    std::vector<frames::Resolution> resolutions;
    std::vector<int> faces;
    std::vector<bool> pose;
    std::vector<int> skips;
    std::vector<double> target_fps;
};

void emit_feasibility_csv(const std::string& path, const CostModel& model, const SweepSpec& sweep);

} // namespace cribwatch::bench
