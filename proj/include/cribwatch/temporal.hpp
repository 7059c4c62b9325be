#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cribwatch/classify.hpp"

namespace cribwatch::temporal {

enum class Decision { majority, mean_confidence };

struct FilterConfig {
    int window_frames = 5; // odd, >= 1
    double fps = 25.0;
    Decision decision = Decision::majority;

    void validate() const;
    double frame_interval_ms() const { return 1000.0 / fps; }
};

inline constexpr const char* kUnknownLabel = "unknown";

// The temporally filtered behavioral state. Counters accrue one frame
// interval per frame, starting from the second consecutive frame of a
// stable label ("persist across consecutive frames").
struct StableState {
    std::string label = kUnknownLabel;
    double since_ms = 0.0; // stability onset
    std::map<std::string, double> cumulative_ms;

    double cumulative(const std::string& l) const {
        auto it = cumulative_ms.find(l);
        return it == cumulative_ms.end() ? 0.0 : it->second;
    }
};

struct AlertRule {
    std::string label;
    double sustain_ms = 10000.0;
    double cooldown_ms = 60000.0;

    void validate() const;
};

struct Alert {
    AlertRule rule;
    double raised_at_ms = 0.0;
    double episode_start_ms = 0.0;
    // priority is always critical
};

// Streaming per-track filter state: the last `window_frames` predictions
// plus stability bookkeeping. Single writer. The task's label order is
// needed for the mean_confidence decision; majority works without it.
class FilterState {
public:
    FilterState() = default;
    explicit FilterState(std::vector<std::string> task_labels)
        : task_labels_(std::move(task_labels)) {}

    // Throws Error(out_of_order_frame) when predictions regress.
    const StableState& update(const classify::Prediction& pred, const FilterConfig& cfg);
    const StableState& state() const { return state_; }
    // Read-only copy of the per-label cumulative durations.
    std::map<std::string, double> counters_snapshot() const { return state_.cumulative_ms; }
    int consecutive() const { return consecutive_; }

private:
    struct Entry {
        std::string label;
        std::vector<double> calibrated;
    };

    std::string decide(const FilterConfig& cfg) const;

    std::vector<std::string> task_labels_;
    std::deque<Entry> window_;
    StableState state_;
    std::int64_t last_index_ = -1;
    int consecutive_ = 0;
};

// Sustained-event alerting with per-rule cooldown; at most one alert per
// episode per rule.
class AlertEngine {
public:
    explicit AlertEngine(std::vector<AlertRule> rules);

    std::vector<Alert> check(const StableState& state, double now_ms);
    const std::vector<AlertRule>& rules() const { return rules_; }

private:
    struct RuleBook {
        double last_raised_ms = -1.0;
        double alerted_episode_ms = -1.0; // episode onset already alerted
    };

    std::vector<AlertRule> rules_;
    std::vector<RuleBook> books_;
};

// Convenience wrappers mirroring the operation-level API.
inline const StableState& filter_update(FilterState& state, const classify::Prediction& pred,
                                        const FilterConfig& cfg) {
    return state.update(pred, cfg);
}
inline std::vector<Alert> alert_check(AlertEngine& engine, const StableState& state,
                                      double now_ms) {
    return engine.check(state, now_ms);
}
inline std::map<std::string, double> counters_snapshot(const FilterState& state) {
    return state.counters_snapshot();
}

// Greedy IoU >= 0.3 matching of detections to face tracks across frames.
// Single-infant streams collapse to track 0.
class FaceTracker {
public:
    static constexpr double kMatchIou = 0.3;

    // Returns the track id for each detection, creating tracks as needed.
    std::vector<int> assign(const std::vector<detect::BoundingBox>& detections);
    int track_count() const { return static_cast<int>(last_boxes_.size()); }

private:
    std::vector<detect::BoundingBox> last_boxes_;
};

} // namespace cribwatch::temporal
