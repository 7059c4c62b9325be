#pragma once

#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cribwatch/bench.hpp"
#include "cribwatch/classify.hpp"
#include "cribwatch/detect.hpp"
#include "cribwatch/frames.hpp"
#include "cribwatch/telemetry.hpp"
#include "cribwatch/temporal.hpp"

namespace cribwatch::pipeline {

enum class DropPolicy { drop_oldest, block };

struct PipelineConfig {
    std::string task_name = "cry_normal";
    nlohmann::json backend = {{"kind", "oracle"}, {"noise", 0.0}, {"seed", 0}};
    double fps = 25.0;
    frames::Resolution resolution{640, 480};
    int queue_capacity = 8;
    DropPolicy drop_policy = DropPolicy::drop_oldest;
    int workers = 1;
    std::optional<double> gate_threshold; // motion gate disabled when unset
    int skip = 1;                         // process every k-th frame
    double latency_budget_ms = 1000.0;
    double min_confidence = 0.5;
    int max_faces = 5;
    temporal::FilterConfig filter;
    std::vector<temporal::AlertRule> alert_rules{{"crying", 10000.0, 60000.0}};
    classify::PlattParams platt;
    frames::PaceMode pacing = frames::PaceMode::fast;
    std::string device_id = "device0";
    double counter_snapshot_every_ms = 5000.0;
    std::string frame_log_path; // per-frame NDJSON when set
    std::string annotate_dir;   // raster + sidecar output when set

    void validate() const;
    static PipelineConfig from_json(const nlohmann::json& j);
};

struct Overlay {
    detect::BoundingBox box;
    std::string label;
    double confidence = 0.0;
};

struct AnnotatedFrame {
    std::int64_t frame_index = 0;
    double timestamp_ms = 0.0;
    std::vector<Overlay> overlays;
    temporal::StableState stable;
    std::map<std::string, double> stage_latencies_ms;
    double end_to_end_ms = 0.0;
    std::optional<std::string> ground_truth;
    bool gated = false;
    bool failed = false;
    std::string failure;
};

struct RunReport {
    std::uint64_t frames_in = 0;
    std::uint64_t frames_processed = 0;
    std::uint64_t frames_dropped = 0;
    std::uint64_t frames_skipped = 0; // skip-k plus motion-gated
    std::uint64_t frames_gated = 0;   // subset of frames_skipped
    std::uint64_t frames_failed = 0;  // subset of frames_processed
    std::vector<temporal::Alert> alerts;
    std::map<std::string, double> counters_ms;
    std::uint64_t gt_frames = 0;
    std::uint64_t gt_matched = 0;
    bool incomplete = false;
    std::string source_error;

    // Wall-clock-derived section; everything above is reproducible for a
    // seeded fast-mode run.
    std::map<std::string, bench::LatencyStats> stage_stats;
    bench::LatencyStats end_to_end;
    std::uint64_t budget_violations = 0;
    double latency_budget_ms = 0.0;
    double achieved_fps = 0.0;
    double peak_memory_mb = 0.0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const; // timing fields grouped under "timing"
};

// Draws a 2-px rectangle border per overlay; pixels outside the borders are
// untouched. Label text goes to the JSON sidecar, not the raster.
frames::Frame annotate_raster(const frames::Frame& frame, const std::vector<Overlay>& overlays);

class Pipeline {
public:
    explicit Pipeline(PipelineConfig cfg, telemetry::ThreadedBatcher* batcher = nullptr);
    ~Pipeline();

    // Full single-frame path (compute + stateful commit), for direct use and
    // tests. run() splits the same two halves across workers and egress.
    AnnotatedFrame process_frame(const frames::Frame& frame);

    // Consumes the source to exhaustion. Never throws for per-frame stage
    // errors (fault isolation); a source error is reported via
    // RunReport::incomplete.
    RunReport run(frames::FrameSource& source);

    const PipelineConfig& config() const { return cfg_; }
    classify::ClassifierBackend& backend() { return *backend_; }

private:
    struct FaceResult {
        detect::BoundingBox box;
        classify::Prediction prediction;
        int track_id = -1;
    };

    struct WorkItem {
        enum class Status { processed, skipped, gated, dropped, failed };
        Status status = Status::processed;
        std::uint64_t seq = 0;
        std::int64_t frame_index = 0;
        double timestamp_ms = 0.0;
        std::optional<std::string> ground_truth;
        std::vector<FaceResult> faces;
        std::map<std::string, double> stage_latencies_ms;
        double ingest_ms = 0.0;
        std::string failure;
        std::optional<frames::Frame> raster; // kept only when annotation output is on
    };

    WorkItem compute(frames::Frame frame, std::uint64_t seq, double ingest_ms);
    AnnotatedFrame commit(WorkItem item, RunReport& report);
    void emit_frame_log(const AnnotatedFrame& af, WorkItem::Status status);
    void write_annotation(const WorkItem& item, const AnnotatedFrame& af);

    PipelineConfig cfg_;
    classify::TaskSpec task_;
    std::unique_ptr<classify::ClassifierBackend> backend_;
    std::mutex backend_mu_; // serializes backends that are not concurrent-safe
    detect::MarkerDetector detector_;
    telemetry::ThreadedBatcher* batcher_;

    // Egress-side state: single writer by construction.
    temporal::FaceTracker tracker_;
    std::vector<std::unique_ptr<temporal::FilterState>> filters_;
    std::vector<std::unique_ptr<temporal::AlertEngine>> alert_engines_;
    double last_counter_snapshot_ms_ = 0.0;
    std::ofstream frame_log_;
};

// Runs the same scenario once per worker count with a CPU-bound backend and
// reports achieved frames/s for each.
std::map<int, double> parallel_speedup_probe(const PipelineConfig& cfg,
                                             const frames::ScenarioScript& script,
                                             const std::vector<int>& workers_list);

} // namespace cribwatch::pipeline
