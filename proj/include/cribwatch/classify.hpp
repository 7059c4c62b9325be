#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cribwatch/detect.hpp"
#include "cribwatch/util.hpp"

namespace cribwatch::classify {

// Closed binary label sets. Label order is fixed and is the argmax
// tie-break order.
struct TaskSpec {
    std::string name;
    std::vector<std::string> labels;
};

TaskSpec task_by_name(const std::string& name); // "sleep_awake" | "cry_normal"

// Per-label scores, either unbounded logits or probabilities summing to 1.
struct RawScores {
    std::vector<double> values;
    bool is_probabilities = false;
};

struct PlattParams {
    double a = 1.0;
    double b = 0.0;
};

// Sigmoid calibration of a logit: 1 / (1 + exp(-(a*z + b))).
double platt_apply(double z, const PlattParams& p);

// Fits (a, b) by minimizing the negative log-likelihood of sigma(a*z + b)
// against binary labels. Damped Newton, stops at gradient norm < 1e-8 or
// 100 iterations; deterministic for a given input order.
// Throws Error(degenerate_data) when only one class is present,
// Error(non_finite) on non-finite inputs.
PlattParams platt_fit(std::span<const std::pair<double, int>> pairs);

// NLL of sigma(a*z + b) against the labels; the quantity platt_fit minimizes.
double platt_nll(std::span<const std::pair<double, int>> pairs, const PlattParams& p);

struct Prediction {
    std::string label;
    double confidence = 0.0;
    RawScores raw;
    std::vector<double> calibrated; // sums to 1, same order as task labels
    std::int64_t frame_index = 0;
    detect::BoundingBox box;
    double latency_ms = 0.0;
};

// Timing/memory profile of a model backend. Text fields preserve the
// profile file's printed values verbatim so reports can reproduce them
// exactly; they are synthesized from the doubles when a profile is measured
// rather than loaded.
struct BackendProfile {
    std::string name;
    double mean_ms = 0.0;
    double std_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;
    double working_set_mb = 0.0;
    double stored_size_mb = 0.0;
    std::string mean_txt, std_txt, min_txt, max_txt, memory_txt, size_txt;

    void validate() const;
    void fill_texts(); // from the doubles, shortest round-trip form
};

std::vector<BackendProfile> load_profiles(const std::string& path);
BackendProfile profile_from_json(const nlohmann::json& j);

// Draws latencies matching a profile's reported statistics, support clamped
// to [min, max]. Nearly-symmetric profiles use a recentered truncated
// normal. Profiles whose mean hugs one bound while the std stays wide (the
// occasional-spike pattern) use a narrow body plus a spike at the far
// bound; a plain truncated normal cannot hit that mean/std pair.
class LatencySampler {
public:
    LatencySampler(double mean_ms, double std_ms, double min_ms, double max_ms,
                   std::uint64_t seed);

    double draw();

private:
    double normal(double mu, double sigma);

    SplitMix64 rng_;
    double lo_, hi_;
    enum class Kind { constant, truncated, spike } kind_;
    double mu_ = 0.0, sigma_ = 0.0; // truncated / spike body parameters
    double spike_p_ = 0.0, spike_value_ = 0.0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

class ClassifierBackend {
public:
    virtual ~ClassifierBackend() = default;
    virtual std::string name() const = 0;
    // Backends that are not safe for concurrent calls are serialized by the
    // pipeline.
    virtual bool concurrent_safe() const { return true; }
    virtual RawScores infer(const detect::RoiTensor& roi, const TaskSpec& task) = 0;
};

// Runs the backend, measures the call on the monotonic clock, calibrates,
// and applies the argmax/tie-break rule. Throws Error(backend_failure) with
// the backend name on backend errors.
Prediction classify(ClassifierBackend& backend, const detect::RoiTensor& roi,
                    const TaskSpec& task, const PlattParams& platt = {});

// Calibration without the backend call: maps raw scores to the calibrated
// vector (1-p, p) where p = sigma(a*z + b) of the positive-class log-odds.
std::vector<double> calibrate_scores(const RawScores& raw, const TaskSpec& task,
                                     const PlattParams& platt);

struct OracleConfig {
    double noise = 0.0;     // probability of flipping the true label
    std::uint64_t seed = 0;
};

enum class LabelStrategy { ground_truth, first_label, uniform };
enum class WaitMode { sleep, busy }; // busy burns thread CPU time

struct LatencyModelConfig {
    BackendProfile profile;
    LabelStrategy strategy = LabelStrategy::ground_truth;
    WaitMode mode = WaitMode::sleep;
    std::uint64_t seed = 0;
};

struct ExternalConfig {
    std::string command;
    std::vector<std::string> args;
};

std::unique_ptr<ClassifierBackend> make_oracle_backend(const OracleConfig& cfg);
std::unique_ptr<ClassifierBackend> make_latency_model_backend(const LatencyModelConfig& cfg);
std::unique_ptr<ClassifierBackend> make_external_backend(const ExternalConfig& cfg);

// JSON-driven factory: {"kind": "oracle"|"latency_model"|"external", ...}.
// Throws Error(config_error) on unknown kinds or invalid parameters.
std::unique_ptr<ClassifierBackend> make_backend(const nlohmann::json& config);

} // namespace cribwatch::classify
