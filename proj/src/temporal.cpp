#include "cribwatch/temporal.hpp"

#include <algorithm>

namespace cribwatch::temporal {

void FilterConfig::validate() const {
    if (window_frames < 1 || window_frames % 2 == 0) {
        throw Error(errc::validation_error, "filter window must be odd and >= 1");
    }
    if (fps <= 0.0) throw Error(errc::validation_error, "filter fps must be > 0");
}

void AlertRule::validate() const {
    if (sustain_ms <= 0.0) throw Error(errc::validation_error, "alert sustain_ms must be > 0");
    if (cooldown_ms < 0.0) throw Error(errc::validation_error, "alert cooldown_ms must be >= 0");
}

std::string FilterState::decide(const FilterConfig& cfg) const {
    if (cfg.decision == Decision::majority) {
        std::map<std::string, int> counts;
        for (const auto& e : window_) ++counts[e.label];
        int best = 0;
        for (const auto& [label, n] : counts) best = std::max(best, n);
        std::vector<const std::string*> winners;
        for (const auto& [label, n] : counts) {
            if (n == best) winners.push_back(&label);
        }
        if (winners.size() == 1) return *winners[0];
        // Tie: stick with the current stable label (stability bias).
        return state_.label;
    }

    // mean_confidence: element-wise sum of calibrated vectors, argmax over
    // the task's label order.
    if (task_labels_.empty()) {
        throw Error(errc::validation_error,
                    "mean_confidence decision needs the task label order");
    }
    const auto& labels = task_labels_;
    std::vector<double> sums(labels.size(), 0.0);
    for (const auto& e : window_) {
        for (std::size_t i = 0; i < sums.size() && i < e.calibrated.size(); ++i) {
            sums[i] += e.calibrated[i];
        }
    }
    std::size_t best = 0;
    bool tie = false;
    for (std::size_t i = 1; i < sums.size(); ++i) {
        if (sums[i] > sums[best]) {
            best = i;
            tie = false;
        } else if (sums[i] == sums[best]) {
            tie = true;
        }
    }
    if (tie) return state_.label;
    return labels[best];
}

const StableState& FilterState::update(const classify::Prediction& pred, const FilterConfig& cfg) {
    cfg.validate();
    if (pred.frame_index <= last_index_) {
        throw Error(errc::out_of_order_frame,
                    "prediction for frame " + std::to_string(pred.frame_index) +
                        " arrived after frame " + std::to_string(last_index_));
    }
    last_index_ = pred.frame_index;

    window_.push_back(Entry{pred.label, pred.calibrated});
    if (static_cast<int>(window_.size()) > cfg.window_frames) window_.pop_front();

    std::string decision = decide(cfg);

    double ts = static_cast<double>(pred.frame_index) * cfg.frame_interval_ms();
    if (decision != state_.label) {
        state_.label = decision;
        state_.since_ms = ts;
        consecutive_ = 1;
    } else {
        ++consecutive_;
        if (consecutive_ >= 2 && state_.label != kUnknownLabel) {
            state_.cumulative_ms[state_.label] += cfg.frame_interval_ms();
        }
    }
    return state_;
}

AlertEngine::AlertEngine(std::vector<AlertRule> rules) : rules_(std::move(rules)) {
    for (const auto& r : rules_) r.validate();
    books_.resize(rules_.size());
}

std::vector<Alert> AlertEngine::check(const StableState& state, double now_ms) {
    std::vector<Alert> raised;
    for (std::size_t i = 0; i < rules_.size(); ++i) {
        const auto& rule = rules_[i];
        auto& book = books_[i];
        if (state.label != rule.label) continue;
        if (now_ms - state.since_ms < rule.sustain_ms) continue;
        if (book.alerted_episode_ms == state.since_ms) continue; // already alerted this episode
        if (book.last_raised_ms >= 0.0 && now_ms - book.last_raised_ms < rule.cooldown_ms) {
            continue;
        }
        Alert a;
        a.rule = rule;
        a.raised_at_ms = now_ms;
        a.episode_start_ms = state.since_ms;
        book.last_raised_ms = now_ms;
        book.alerted_episode_ms = state.since_ms;
        raised.push_back(std::move(a));
    }
    return raised;
}

std::vector<int> FaceTracker::assign(const std::vector<detect::BoundingBox>& detections) {
    std::vector<int> ids(detections.size(), -1);
    std::vector<bool> taken(last_boxes_.size(), false);

    // Greedy: highest-IoU pair first, threshold 0.3.
    for (;;) {
        double best_iou = kMatchIou;
        int best_det = -1, best_track = -1;
        for (std::size_t d = 0; d < detections.size(); ++d) {
            if (ids[d] >= 0) continue;
            for (std::size_t t = 0; t < last_boxes_.size(); ++t) {
                if (taken[t]) continue;
                double v = detect::iou(detections[d], last_boxes_[t]);
                if (v >= best_iou) {
                    best_iou = v;
                    best_det = static_cast<int>(d);
                    best_track = static_cast<int>(t);
                }
            }
        }
        if (best_det < 0) break;
        ids[static_cast<std::size_t>(best_det)] = best_track;
        taken[static_cast<std::size_t>(best_track)] = true;
        last_boxes_[static_cast<std::size_t>(best_track)] = detections[static_cast<std::size_t>(best_det)];
    }

    for (std::size_t d = 0; d < detections.size(); ++d) {
        if (ids[d] < 0) {
            ids[d] = static_cast<int>(last_boxes_.size());
            last_boxes_.push_back(detections[d]);
        }
    }
    return ids;
}

} // namespace cribwatch::temporal
