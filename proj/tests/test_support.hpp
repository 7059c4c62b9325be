#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "cribwatch/classify.hpp"
#include "cribwatch/frames.hpp"
#include "cribwatch/temporal.hpp"

namespace testsup {

// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        char tmpl[] = "/tmp/cribwatch_test_XXXXXX";
        path_ = mkdtemp(tmpl);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const { return path_ + "/" + name; }

private:
    std::string path_;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

// Runs the cribwatch binary; returns the exit code, captures stdout/stderr.
inline int run_cli(const std::string& args, std::string* out = nullptr,
                   std::string* err = nullptr) {
    TempDir capture;
    std::string cmd = std::string(CRIBWATCH_BIN_DIR) + "/cribwatch " + args + " >" +
                      capture.file("out") + " 2>" + capture.file("err");
    int status = std::system(cmd.c_str());
    if (out) *out = read_file(capture.file("out"));
    if (err) *err = read_file(capture.file("err"));
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// A single-segment scenario with a centered marker, the workhorse fixture.
inline cribwatch::frames::ScenarioScript static_scenario(const std::string& label,
                                                         double duration_ms, double fps = 25.0,
                                                         int width = 640, int height = 480,
                                                         std::uint64_t seed = 99) {
    cribwatch::frames::ScenarioScript s;
    s.fps = fps;
    s.resolution = {width, height};
    s.noise_seed = seed;
    s.timeline = {{0.0, duration_ms, label,
                   {width / 4, height / 4, width / 4, height / 4}}};
    return s;
}

// Reference implementation of the sliding-window filter: recomputes the
// decision from the full history every step. Deliberately simple and
// independent of the streaming code path it checks.
struct ReferenceFilter {
    struct Step {
        std::string stable;
        double since_ms;
        std::map<std::string, double> counters;
    };

    static std::vector<Step> run(const std::vector<cribwatch::classify::Prediction>& preds,
                                 const cribwatch::temporal::FilterConfig& cfg,
                                 const std::vector<std::string>& task_labels) {
        std::vector<Step> out;
        std::string stable = cribwatch::temporal::kUnknownLabel;
        double since = 0.0;
        int consecutive = 0;
        std::map<std::string, double> counters;
        double interval = 1000.0 / cfg.fps;

        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::size_t lo = (i + 1 >= static_cast<std::size_t>(cfg.window_frames))
                                 ? i + 1 - static_cast<std::size_t>(cfg.window_frames)
                                 : 0;
            std::string decision;
            if (cfg.decision == cribwatch::temporal::Decision::majority) {
                std::map<std::string, int> counts;
                for (std::size_t k = lo; k <= i; ++k) ++counts[preds[k].label];
                int best = 0;
                for (auto& [l, n] : counts) best = std::max(best, n);
                std::vector<std::string> winners;
                for (auto& [l, n] : counts) {
                    if (n == best) winners.push_back(l);
                }
                decision = winners.size() == 1 ? winners[0] : stable;
            } else {
                std::vector<double> sums(task_labels.size(), 0.0);
                for (std::size_t k = lo; k <= i; ++k) {
                    for (std::size_t c = 0; c < sums.size(); ++c) {
                        sums[c] += preds[k].calibrated[c];
                    }
                }
                std::size_t best = 0;
                bool tie = false;
                for (std::size_t c = 1; c < sums.size(); ++c) {
                    if (sums[c] > sums[best]) {
                        best = c;
                        tie = false;
                    } else if (sums[c] == sums[best]) {
                        tie = true;
                    }
                }
                decision = tie ? stable : task_labels[best];
            }

            double ts = static_cast<double>(preds[i].frame_index) * interval;
            if (decision != stable) {
                stable = decision;
                since = ts;
                consecutive = 1;
            } else {
                ++consecutive;
                if (consecutive >= 2 && stable != cribwatch::temporal::kUnknownLabel) {
                    counters[stable] += interval;
                }
            }
            out.push_back({stable, since, counters});
        }
        return out;
    }
};

inline cribwatch::classify::Prediction make_pred(std::int64_t index, const std::string& label,
                                                 double confidence,
                                                 const std::vector<std::string>& task_labels) {
    cribwatch::classify::Prediction p;
    p.frame_index = index;
    p.label = label;
    p.confidence = confidence;
    p.calibrated.assign(task_labels.size(), 0.0);
    for (std::size_t i = 0; i < task_labels.size(); ++i) {
        if (task_labels[i] == label) {
            p.calibrated[i] = confidence;
        } else {
            p.calibrated[i] = (1.0 - confidence) / static_cast<double>(task_labels.size() - 1);
        }
    }
    return p;
}

// Single-server queueing simulation mirroring the pipeline's ingest/worker
// structure: fixed-interval arrivals, bounded queue, drop-oldest eviction.
struct QueueSim {
    struct Result {
        std::int64_t dropped = 0;
        std::int64_t served = 0;
    };

    static Result run(int n_frames, double interval_ms, std::vector<double> service_ms,
                      std::size_t queue_capacity) {
        Result r;
        std::vector<double> queue; // arrival times of waiting frames
        double server_free_at = 0.0;
        std::size_t next_service = 0;
        bool busy = false;
        double busy_until = 0.0;

        auto start_service = [&](double now) {
            busy = true;
            busy_until = now + service_ms[next_service++ % service_ms.size()];
            ++r.served;
        };

        for (int i = 0; i < n_frames; ++i) {
            double t = i * interval_ms;
            // Complete any services that finish before this arrival.
            while (busy && busy_until <= t) {
                double freed = busy_until;
                busy = false;
                if (!queue.empty()) {
                    queue.erase(queue.begin());
                    start_service(freed);
                }
            }
            if (!busy && queue.empty()) {
                start_service(t);
            } else if (queue.size() >= queue_capacity) {
                queue.erase(queue.begin()); // drop-oldest
                ++r.dropped;
                queue.push_back(t);
            } else {
                queue.push_back(t);
            }
        }
        (void)server_free_at;
        return r;
    }
};

} // namespace testsup
