#include "cribwatch/pipeline.hpp"

#include <algorithm>
#include <filesystem>

using nlohmann::json;

namespace cribwatch::pipeline {

void PipelineConfig::validate() const {
    classify::task_by_name(task_name);
    if (fps <= 0.0) throw Error(errc::config_error, "fps must be > 0");
    frames::validate_resolution(resolution);
    if (queue_capacity < 1) throw Error(errc::config_error, "queue_capacity must be >= 1");
    if (workers < 1) throw Error(errc::config_error, "workers must be >= 1");
    if (skip < 1) throw Error(errc::config_error, "skip must be >= 1");
    if (max_faces < 1) throw Error(errc::config_error, "max_faces must be >= 1");
    if (latency_budget_ms <= 0.0) throw Error(errc::config_error, "latency_budget_ms must be > 0");
    if (gate_threshold && *gate_threshold < 0.0) {
        throw Error(errc::config_error, "gate_threshold must be >= 0");
    }
    filter.validate();
    for (const auto& r : alert_rules) r.validate();
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    PipelineConfig c;
    try {
        c.task_name = j.value("task", c.task_name);
        if (j.contains("backend")) c.backend = j["backend"];
        c.fps = j.value("fps", c.fps);
        if (j.contains("resolution")) {
            c.resolution = {j["resolution"].at("width").get<int>(),
                            j["resolution"].at("height").get<int>()};
        }
        c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
        auto policy = j.value("drop_policy", std::string("drop_oldest"));
        if (policy == "drop_oldest") c.drop_policy = DropPolicy::drop_oldest;
        else if (policy == "block") c.drop_policy = DropPolicy::block;
        else throw Error(errc::config_error, "unknown drop_policy: " + policy);
        c.workers = j.value("workers", c.workers);
        if (j.contains("gate_threshold") && !j["gate_threshold"].is_null()) {
            c.gate_threshold = j["gate_threshold"].get<double>();
        }
        c.skip = j.value("skip", c.skip);
        c.latency_budget_ms = j.value("latency_budget_ms", c.latency_budget_ms);
        c.min_confidence = j.value("min_confidence", c.min_confidence);
        c.max_faces = j.value("max_faces", c.max_faces);
        c.filter.fps = c.fps;
        if (j.contains("filter")) {
            const auto& f = j["filter"];
            c.filter.window_frames = f.value("window_frames", c.filter.window_frames);
            c.filter.fps = f.value("fps", c.fps);
            auto decision = f.value("decision", std::string("majority"));
            if (decision == "majority") c.filter.decision = temporal::Decision::majority;
            else if (decision == "mean_confidence") {
                c.filter.decision = temporal::Decision::mean_confidence;
            } else {
                throw Error(errc::config_error, "unknown filter decision: " + decision);
            }
        }
        if (j.contains("alerts")) {
            c.alert_rules.clear();
            for (const auto& a : j["alerts"]) {
                temporal::AlertRule r;
                r.label = a.at("label").get<std::string>();
                r.sustain_ms = a.value("sustain_ms", 10000.0);
                r.cooldown_ms = a.value("cooldown_ms", 60000.0);
                c.alert_rules.push_back(std::move(r));
            }
        }
        if (j.contains("calibration")) {
            c.platt.a = j["calibration"].value("a", 1.0);
            c.platt.b = j["calibration"].value("b", 0.0);
        }
        auto pacing = j.value("pacing", std::string("fast"));
        if (pacing == "fast") c.pacing = frames::PaceMode::fast;
        else if (pacing == "realtime") c.pacing = frames::PaceMode::realtime;
        else throw Error(errc::config_error, "unknown pacing mode: " + pacing);
        c.device_id = j.value("device_id", c.device_id);
        c.counter_snapshot_every_ms = j.value("counter_snapshot_every_ms", c.counter_snapshot_every_ms);
        c.frame_log_path = j.value("frame_log", c.frame_log_path);
        c.annotate_dir = j.value("annotate_dir", c.annotate_dir);
    } catch (const json::exception& e) {
        throw Error(errc::config_error, std::string("pipeline config: ") + e.what());
    }
    c.validate();
    return c;
}

frames::Frame annotate_raster(const frames::Frame& frame, const std::vector<Overlay>& overlays) {
    frames::Frame out = frame;
    constexpr std::uint8_t kBorder[3] = {255, 32, 32};
    for (const auto& ov : overlays) {
        const auto& b = ov.box;
        if (!b.inside(frame.resolution)) continue;
        int thickness = std::min({2, b.w, b.h});
        for (int t = 0; t < thickness; ++t) {
            for (int x = b.x; x < b.x + b.w; ++x) {
                std::copy(kBorder, kBorder + 3, out.at(x, b.y + t));
                std::copy(kBorder, kBorder + 3, out.at(x, b.y + b.h - 1 - t));
            }
            for (int y = b.y; y < b.y + b.h; ++y) {
                std::copy(kBorder, kBorder + 3, out.at(b.x + t, y));
                std::copy(kBorder, kBorder + 3, out.at(b.x + b.w - 1 - t, y));
            }
        }
    }
    return out;
}

namespace {

json stats_to_json(const bench::LatencyStats& s) {
    return {{"mean_ms", s.mean_ms}, {"std_ms", s.std_ms}, {"min_ms", s.min_ms},
            {"max_ms", s.max_ms},   {"n", s.n}};
}

// Bounded SPMC frame queue. drop-oldest eviction returns the evicted slot so
// the caller can account for it.
struct QueueSlot {
    frames::Frame frame;
    std::uint64_t seq = 0;
    double ingest_ms = 0.0;
};

class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

    void push_block(QueueSlot slot) {
        std::unique_lock lock(mu_);
        cv_space_.wait(lock, [this] { return items_.size() < capacity_; });
        items_.push_back(std::move(slot));
        cv_items_.notify_one();
    }

    std::optional<QueueSlot> push_evict(QueueSlot slot) {
        std::optional<QueueSlot> evicted;
        {
            std::lock_guard lock(mu_);
            if (items_.size() >= capacity_) {
                evicted = std::move(items_.front());
                items_.pop_front();
            }
            items_.push_back(std::move(slot));
        }
        cv_items_.notify_one();
        return evicted;
    }

    std::optional<QueueSlot> pop() {
        std::unique_lock lock(mu_);
        cv_items_.wait(lock, [this] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        QueueSlot slot = std::move(items_.front());
        items_.pop_front();
        cv_space_.notify_one();
        return slot;
    }

    void close() {
        std::lock_guard lock(mu_);
        closed_ = true;
        cv_items_.notify_all();
    }

private:
    std::size_t capacity_;
    std::deque<QueueSlot> items_;
    std::mutex mu_;
    std::condition_variable cv_items_, cv_space_;
    bool closed_ = false;
};

} // namespace

// Orders work items back into ingest sequence for the egress path.
template <typename T>
class Sequencer {
public:
    void post(std::uint64_t seq, T item) {
        std::lock_guard lock(mu_);
        items_.emplace(seq, std::move(item));
        cv_.notify_all();
    }

    void set_total(std::uint64_t total) {
        std::lock_guard lock(mu_);
        total_ = total;
        cv_.notify_all();
    }

    std::optional<T> next() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] {
            return items_.count(next_) > 0 || (total_ && next_ >= *total_);
        });
        auto it = items_.find(next_);
        if (it == items_.end()) return std::nullopt;
        T item = std::move(it->second);
        items_.erase(it);
        ++next_;
        return item;
    }

private:
    std::map<std::uint64_t, T> items_;
    std::uint64_t next_ = 0;
    std::optional<std::uint64_t> total_;
    std::mutex mu_;
    std::condition_variable cv_;
};

json RunReport::to_json() const {
    json alerts_json = json::array();
    for (const auto& a : alerts) {
        alerts_json.push_back({{"label", a.rule.label},
                               {"sustain_ms", a.rule.sustain_ms},
                               {"cooldown_ms", a.rule.cooldown_ms},
                               {"raised_at_ms", a.raised_at_ms},
                               {"episode_start_ms", a.episode_start_ms},
                               {"priority", "critical"}});
    }
    json stages = json::object();
    for (const auto& [name, s] : stage_stats) stages[name] = stats_to_json(s);

    return {
        {"counts",
         {{"frames_in", frames_in},
          {"frames_processed", frames_processed},
          {"frames_dropped", frames_dropped},
          {"frames_skipped", frames_skipped},
          {"frames_gated", frames_gated},
          {"frames_failed", frames_failed}}},
        {"alerts", alerts_json},
        {"counters_ms", counters_ms},
        {"accuracy", {{"gt_frames", gt_frames}, {"gt_matched", gt_matched}}},
        {"incomplete", incomplete},
        {"source_error", source_error},
        {"timing",
         {{"stage_stats", stages},
          {"end_to_end", stats_to_json(end_to_end)},
          {"budget", {{"budget_ms", latency_budget_ms}, {"violations", budget_violations}}},
          {"achieved_fps", achieved_fps},
          {"peak_memory_mb", peak_memory_mb},
          {"wall_ms", wall_ms}}},
    };
}

Pipeline::Pipeline(PipelineConfig cfg, telemetry::ThreadedBatcher* batcher)
    : cfg_(std::move(cfg)), task_(classify::task_by_name(cfg_.task_name)), batcher_(batcher) {
    cfg_.validate();
    backend_ = classify::make_backend(cfg_.backend);
    if (!cfg_.frame_log_path.empty()) {
        frame_log_.open(cfg_.frame_log_path, std::ios::trunc);
        if (!frame_log_) {
            throw Error(errc::io_error, "cannot open frame log " + cfg_.frame_log_path);
        }
    }
    if (!cfg_.annotate_dir.empty()) {
        std::filesystem::create_directories(cfg_.annotate_dir);
    }
}

Pipeline::~Pipeline() = default;

Pipeline::WorkItem Pipeline::compute(frames::Frame frame, std::uint64_t seq, double ingest_ms) {
    WorkItem item;
    item.seq = seq;
    item.frame_index = frame.index;
    item.timestamp_ms = frame.timestamp_ms;
    item.ground_truth = frame.ground_truth;
    item.ingest_ms = ingest_ms;

    try {
        double t0 = mono_ms();
        frames::Frame rgb = detect::to_rgb(std::move(frame));
        item.stage_latencies_ms["to_rgb"] = mono_ms() - t0;

        t0 = mono_ms();
        auto boxes = detect::detect_faces(detector_, rgb, cfg_.min_confidence);
        item.stage_latencies_ms["detect"] = mono_ms() - t0;
        if (static_cast<int>(boxes.size()) > cfg_.max_faces) {
            boxes.resize(static_cast<std::size_t>(cfg_.max_faces));
        }

        if (!boxes.empty()) {
            double roi_ms = 0.0, classify_ms = 0.0;
            for (const auto& box : boxes) {
                t0 = mono_ms();
                auto roi = detect::extract_roi(rgb, box);
                roi_ms += mono_ms() - t0;

                t0 = mono_ms();
                classify::Prediction pred;
                if (backend_->concurrent_safe()) {
                    pred = classify::classify(*backend_, roi, task_, cfg_.platt);
                } else {
                    std::lock_guard lock(backend_mu_);
                    pred = classify::classify(*backend_, roi, task_, cfg_.platt);
                }
                classify_ms += mono_ms() - t0;
                item.faces.push_back({box, std::move(pred), -1});
            }
            item.stage_latencies_ms["extract_roi"] = roi_ms;
            item.stage_latencies_ms["classify"] = classify_ms;
        }
        if (!cfg_.annotate_dir.empty()) item.raster = std::move(rgb);
    } catch (const std::exception& e) {
        // Fault isolation: the frame is marked failed, the pipeline moves on.
        item.status = WorkItem::Status::failed;
        item.failure = e.what();
        item.faces.clear();
    }
    return item;
}

void Pipeline::emit_frame_log(const AnnotatedFrame& af, WorkItem::Status status) {
    if (!frame_log_.is_open()) return;
    const char* status_name = "processed";
    switch (status) {
    case WorkItem::Status::processed: status_name = "processed"; break;
    case WorkItem::Status::skipped: status_name = "skipped"; break;
    case WorkItem::Status::gated: status_name = "gated"; break;
    case WorkItem::Status::dropped: status_name = "dropped"; break;
    case WorkItem::Status::failed: status_name = "failed"; break;
    }
    json line = {{"frame_index", af.frame_index},
                 {"status", status_name},
                 {"dropped", status == WorkItem::Status::dropped},
                 {"stage_latencies_ms", af.stage_latencies_ms},
                 {"end_to_end_ms", af.end_to_end_ms},
                 {"label", af.overlays.empty() ? json(nullptr) : json(af.overlays[0].label)},
                 {"confidence", af.overlays.empty() ? json(nullptr) : json(af.overlays[0].confidence)},
                 {"stable_label", af.stable.label}};
    if (af.ground_truth) line["ground_truth"] = *af.ground_truth;
    if (af.failed) line["failure"] = af.failure;
    frame_log_ << line.dump() << "\n";
}

void Pipeline::write_annotation(const WorkItem& item, const AnnotatedFrame& af) {
    if (!item.raster) return;
    frames::Frame drawn = annotate_raster(*item.raster, af.overlays);
    std::string base = cfg_.annotate_dir + "/frame_" + std::to_string(item.frame_index);
    frames::write_ppm(base + ".ppm", drawn);

    json sidecar = {{"frame_index", item.frame_index},
                    {"timestamp_ms", item.timestamp_ms},
                    {"overlays", json::array()},
                    {"stable_label", af.stable.label}};
    for (const auto& ov : af.overlays) {
        sidecar["overlays"].push_back({{"x", ov.box.x},
                                       {"y", ov.box.y},
                                       {"w", ov.box.w},
                                       {"h", ov.box.h},
                                       {"label", ov.label},
                                       {"confidence", ov.confidence}});
    }
    std::ofstream out(base + ".json");
    out << sidecar.dump() << "\n";
}

AnnotatedFrame Pipeline::commit(WorkItem item, RunReport& report) {
    AnnotatedFrame af;
    af.frame_index = item.frame_index;
    af.timestamp_ms = item.timestamp_ms;
    af.ground_truth = item.ground_truth;
    af.stage_latencies_ms = item.stage_latencies_ms;

    auto primary_state = [this]() -> temporal::StableState {
        return filters_.empty() ? temporal::StableState{} : filters_[0]->state();
    };

    switch (item.status) {
    case WorkItem::Status::dropped:
        ++report.frames_dropped;
        af.stable = primary_state();
        emit_frame_log(af, item.status);
        return af;
    case WorkItem::Status::skipped:
        ++report.frames_skipped;
        af.stable = primary_state();
        emit_frame_log(af, item.status);
        return af;
    case WorkItem::Status::gated:
        // No motion: detection bypassed, previous stable state carries over.
        ++report.frames_skipped;
        ++report.frames_gated;
        af.gated = true;
        af.stable = primary_state();
        emit_frame_log(af, item.status);
        return af;
    case WorkItem::Status::failed:
        ++report.frames_processed;
        ++report.frames_failed;
        af.failed = true;
        af.failure = item.failure;
        af.stable = primary_state();
        emit_frame_log(af, item.status);
        return af;
    case WorkItem::Status::processed:
        break;
    }

    double t0 = mono_ms();
    std::vector<detect::BoundingBox> boxes;
    boxes.reserve(item.faces.size());
    for (const auto& f : item.faces) boxes.push_back(f.box);
    auto track_ids = tracker_.assign(boxes);
    while (static_cast<int>(filters_.size()) < tracker_.track_count()) {
        filters_.push_back(std::make_unique<temporal::FilterState>(task_.labels));
        alert_engines_.push_back(std::make_unique<temporal::AlertEngine>(cfg_.alert_rules));
    }

    for (std::size_t i = 0; i < item.faces.size(); ++i) {
        auto& face = item.faces[i];
        face.track_id = track_ids[i];
        auto& filter = *filters_[static_cast<std::size_t>(face.track_id)];
        std::string prev_label = filter.state().label;
        const auto& state = filter.update(face.prediction, cfg_.filter);

        if (state.label != prev_label && batcher_) {
            batcher_->enqueue(telemetry::make_state_transition(
                cfg_.device_id, item.timestamp_ms, state.label, prev_label,
                face.prediction.confidence));
        }

        auto alerts =
            alert_engines_[static_cast<std::size_t>(face.track_id)]->check(state, item.timestamp_ms);
        for (auto& alert : alerts) {
            if (batcher_) {
                batcher_->enqueue(telemetry::make_alert(cfg_.device_id, alert.raised_at_ms,
                                                        alert.rule.label, alert.episode_start_ms,
                                                        alert.raised_at_ms - alert.episode_start_ms));
            }
            report.alerts.push_back(std::move(alert));
        }
    }
    af.stable = primary_state();
    item.stage_latencies_ms["temporal"] = mono_ms() - t0;

    if (batcher_ &&
        item.timestamp_ms - last_counter_snapshot_ms_ >= cfg_.counter_snapshot_every_ms) {
        batcher_->enqueue(telemetry::make_counter_snapshot(cfg_.device_id, item.timestamp_ms,
                                                           af.stable.cumulative_ms));
        last_counter_snapshot_ms_ = item.timestamp_ms;
    }

    for (const auto& f : item.faces) {
        af.overlays.push_back({f.box, f.prediction.label, f.prediction.confidence});
    }

    if (!cfg_.annotate_dir.empty()) {
        t0 = mono_ms();
        write_annotation(item, af);
        item.stage_latencies_ms["annotate"] = mono_ms() - t0;
    }
    af.stage_latencies_ms = item.stage_latencies_ms;

    af.end_to_end_ms = mono_ms() - item.ingest_ms;
    ++report.frames_processed;
    if (af.end_to_end_ms > cfg_.latency_budget_ms) ++report.budget_violations;

    if (item.ground_truth) {
        ++report.gt_frames;
        bool match;
        if (*item.ground_truth == "absent") {
            match = af.overlays.empty();
        } else {
            match = !af.overlays.empty() && af.overlays[0].label == *item.ground_truth;
        }
        if (match) ++report.gt_matched;
    }

    emit_frame_log(af, item.status);
    return af;
}

AnnotatedFrame Pipeline::process_frame(const frames::Frame& frame) {
    RunReport scratch;
    WorkItem item = compute(frame, 0, mono_ms());
    return commit(std::move(item), scratch);
}

namespace {
struct NonOwningSource final : frames::FrameSource {
    explicit NonOwningSource(frames::FrameSource& inner) : inner_(&inner) {}
    std::optional<frames::Frame> next() override { return inner_->next(); }
    frames::FrameSource* inner_;
};
} // namespace

RunReport Pipeline::run(frames::FrameSource& source) {
    RunReport report;
    report.latency_budget_ms = cfg_.latency_budget_ms;

    MemoryProbe probe;
    double wall_start = mono_ms();

    // Fast mode always applies backpressure: drop decisions under an
    // unpaced source would be scheduler noise, and reports must be
    // reproducible. drop_oldest protects the realtime source only.
    const bool allow_drop = cfg_.drop_policy == DropPolicy::drop_oldest &&
                            cfg_.pacing == frames::PaceMode::realtime;

    BoundedQueue queue(static_cast<std::size_t>(cfg_.queue_capacity));
    Sequencer<WorkItem> sequencer;

    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(cfg_.workers));
    for (int i = 0; i < cfg_.workers; ++i) {
        workers.emplace_back([this, &queue, &sequencer] {
            while (auto slot = queue.pop()) {
                std::uint64_t seq = slot->seq;
                double ingest_ms = slot->ingest_ms;
                WorkItem item = compute(std::move(slot->frame), seq, ingest_ms);
                sequencer.post(seq, std::move(item));
            }
        });
    }

    // Egress owns all stateful work and the report while running.
    std::map<std::string, StatsAccumulator> stage_acc;
    StatsAccumulator e2e_acc;
    std::thread egress([this, &sequencer, &report, &stage_acc, &e2e_acc] {
        while (auto item = sequencer.next()) {
            bool processed = item->status == WorkItem::Status::processed;
            AnnotatedFrame af = commit(std::move(*item), report);
            if (processed && !af.failed) {
                for (const auto& [stage, ms] : af.stage_latencies_ms) stage_acc[stage].add(ms);
                e2e_acc.add(af.end_to_end_ms);
            }
        }
    });

    frames::PacedSource paced(std::make_unique<NonOwningSource>(source), cfg_.fps, cfg_.pacing);

    std::uint64_t seq = 0;
    std::optional<frames::Frame> prev_gate_frame;
    try {
        for (;;) {
            auto frame = paced.next();
            if (!frame) break;
            double ingest_ms = mono_ms();
            std::uint64_t s = seq++;

            if (cfg_.skip > 1 && frame->index % cfg_.skip != 0) {
                WorkItem item;
                item.status = WorkItem::Status::skipped;
                item.seq = s;
                item.frame_index = frame->index;
                item.timestamp_ms = frame->timestamp_ms;
                item.ground_truth = frame->ground_truth;
                item.ingest_ms = ingest_ms;
                sequencer.post(s, std::move(item));
                continue;
            }

            if (cfg_.gate_threshold && prev_gate_frame) {
                double t0 = mono_ms();
                bool moving = detect::motion_gate(*prev_gate_frame, *frame, *cfg_.gate_threshold);
                double gate_ms = mono_ms() - t0;
                if (!moving) {
                    WorkItem item;
                    item.status = WorkItem::Status::gated;
                    item.seq = s;
                    item.frame_index = frame->index;
                    item.timestamp_ms = frame->timestamp_ms;
                    item.ground_truth = frame->ground_truth;
                    item.ingest_ms = ingest_ms;
                    item.stage_latencies_ms["gate"] = gate_ms;
                    prev_gate_frame = std::move(*frame);
                    sequencer.post(s, std::move(item));
                    continue;
                }
            }
            if (cfg_.gate_threshold) prev_gate_frame = *frame;

            QueueSlot slot{std::move(*frame), s, ingest_ms};
            if (allow_drop) {
                if (auto evicted = queue.push_evict(std::move(slot))) {
                    WorkItem item;
                    item.status = WorkItem::Status::dropped;
                    item.seq = evicted->seq;
                    item.frame_index = evicted->frame.index;
                    item.timestamp_ms = evicted->frame.timestamp_ms;
                    item.ground_truth = evicted->frame.ground_truth;
                    item.ingest_ms = evicted->ingest_ms;
                    sequencer.post(item.seq, std::move(item));
                }
            } else {
                queue.push_block(std::move(slot));
            }
        }
    } catch (const std::exception& e) {
        report.incomplete = true;
        report.source_error = e.what();
    }

    queue.close();
    for (auto& w : workers) w.join();
    sequencer.set_total(seq);
    egress.join();

    report.frames_in = seq;
    for (const auto& [stage, acc] : stage_acc) {
        report.stage_stats[stage] = {acc.mean(), acc.std(), acc.min(), acc.max(), acc.count()};
    }
    if (e2e_acc.count() > 0) {
        report.end_to_end = {e2e_acc.mean(), e2e_acc.std(), e2e_acc.min(), e2e_acc.max(),
                             e2e_acc.count()};
    }
    if (!filters_.empty()) report.counters_ms = filters_[0]->counters_snapshot();

    report.wall_ms = mono_ms() - wall_start;
    report.achieved_fps =
        report.wall_ms > 0.0 ? 1000.0 * static_cast<double>(report.frames_processed) / report.wall_ms
                             : 0.0;
    probe.stop();
    report.peak_memory_mb = MemoryProbe::peak_rss_mb();

    if (frame_log_.is_open()) frame_log_.flush();
    return report;
}

std::map<int, double> parallel_speedup_probe(const PipelineConfig& cfg,
                                             const frames::ScenarioScript& script,
                                             const std::vector<int>& workers_list) {
    std::map<int, double> out;
    for (int w : workers_list) {
        PipelineConfig c = cfg;
        c.workers = w;
        Pipeline p(c); // fresh backend per run, seeds restart
        frames::ScenarioSource src(script);
        RunReport report = p.run(src);
        out[w] = report.achieved_fps;
    }
    return out;
}

} // namespace cribwatch::pipeline
