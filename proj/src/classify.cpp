#include "cribwatch/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <unistd.h>

#include "cribwatch/subprocess.hpp"

using nlohmann::json;

namespace cribwatch::classify {

TaskSpec task_by_name(const std::string& name) {
    if (name == "sleep_awake") return {"sleep_awake", {"sleep", "awake"}};
    if (name == "cry_normal") return {"cry_normal", {"crying", "normal"}};
    throw Error(errc::config_error, "unknown task: " + name);
}

namespace {

double sigmoid(double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    double e = std::exp(t);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

} // namespace

double platt_apply(double z, const PlattParams& p) { return sigmoid(p.a * z + p.b); }

double platt_nll(std::span<const std::pair<double, int>> pairs, const PlattParams& p) {
    double nll = 0.0;
    for (const auto& [z, y] : pairs) {
        double t = p.a * z + p.b;
        nll += y ? softplus(-t) : softplus(t);
    }
    return nll;
}

PlattParams platt_fit(std::span<const std::pair<double, int>> pairs) {
    if (pairs.size() < 2) throw Error(errc::degenerate_data, "platt_fit needs at least 2 pairs");
    bool has_pos = false, has_neg = false;
    for (const auto& [z, y] : pairs) {
        if (!std::isfinite(z)) throw Error(errc::non_finite, "platt_fit: non-finite logit");
        (y ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) {
        throw Error(errc::degenerate_data, "platt_fit: only one class present");
    }

    PlattParams p{0.0, 0.0};
    double nll = platt_nll(pairs, p);

    for (int iter = 0; iter < 100; ++iter) {
        double ga = 0.0, gb = 0.0;
        double haa = 1e-12, hab = 0.0, hbb = 1e-12; // ridge keeps H invertible
        for (const auto& [z, y] : pairs) {
            double s = sigmoid(p.a * z + p.b);
            double r = s - static_cast<double>(y);
            double w = s * (1.0 - s);
            ga += r * z;
            gb += r;
            haa += w * z * z;
            hab += w * z;
            hbb += w;
        }
        if (std::sqrt(ga * ga + gb * gb) < 1e-8) break;

        double det = haa * hbb - hab * hab;
        double da = -(hbb * ga - hab * gb) / det;
        double db = -(haa * gb - hab * ga) / det;
        double slope = ga * da + gb * db; // < 0 along the Newton direction

        double step = 1.0;
        bool moved = false;
        while (step >= 1e-12) {
            PlattParams trial{p.a + step * da, p.b + step * db};
            double trial_nll = platt_nll(pairs, trial);
            if (std::isfinite(trial_nll) && trial_nll <= nll + 1e-4 * step * slope) {
                p = trial;
                nll = trial_nll;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) break; // line search stalled; gradient is as flat as it gets
    }

    if (!std::isfinite(p.a) || !std::isfinite(p.b)) {
        throw Error(errc::non_finite, "platt_fit diverged to non-finite parameters");
    }
    return p;
}

void BackendProfile::validate() const {
    if (name.empty()) throw Error(errc::config_error, "profile: empty name");
    if (!(min_ms <= mean_ms && mean_ms <= max_ms)) {
        throw Error(errc::config_error, "profile " + name + ": requires min <= mean <= max");
    }
    if (std_ms < 0.0) throw Error(errc::config_error, "profile " + name + ": negative std");
    if (working_set_mb <= 0.0 || stored_size_mb <= 0.0) {
        throw Error(errc::config_error, "profile " + name + ": sizes must be > 0");
    }
}

void BackendProfile::fill_texts() {
    mean_txt = fmt_double(mean_ms);
    std_txt = fmt_double(std_ms);
    min_txt = fmt_double(min_ms);
    max_txt = fmt_double(max_ms);
    memory_txt = fmt_double(working_set_mb);
    size_txt = fmt_double(stored_size_mb);
}

namespace {

// Accepts "7.57" (kept verbatim for reporting) or a plain number.
double profile_field(const json& j, const char* key, std::string& txt) {
    const auto& v = j.at(key);
    if (v.is_string()) {
        txt = v.get<std::string>();
        try {
            return std::stod(txt);
        } catch (const std::exception&) {
            throw Error(errc::parse_error, std::string("profile field ") + key + ": " + txt);
        }
    }
    if (!v.is_number()) {
        throw Error(errc::parse_error, std::string("profile field ") + key + ": expected number");
    }
    double d = v.get<double>();
    txt = fmt_double(d);
    return d;
}

} // namespace

BackendProfile profile_from_json(const json& j) {
    BackendProfile p;
    try {
        p.name = j.at("name").get<std::string>();
        p.working_set_mb = profile_field(j, "memory_mb", p.memory_txt);
        p.mean_ms = profile_field(j, "mean_ms", p.mean_txt);
        p.std_ms = profile_field(j, "std_ms", p.std_txt);
        p.min_ms = profile_field(j, "min_ms", p.min_txt);
        p.max_ms = profile_field(j, "max_ms", p.max_txt);
        p.stored_size_mb = profile_field(j, "size_mb", p.size_txt);
    } catch (const json::exception& e) {
        throw Error(errc::parse_error, std::string("profile: ") + e.what());
    }
    p.validate();
    return p;
}

std::vector<BackendProfile> load_profiles(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(errc::parse_error, "cannot open profiles file " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(errc::parse_error, "profiles file is not valid JSON");
    const json& arr = j.is_array() ? j : j.at("profiles");
    std::vector<BackendProfile> out;
    for (const auto& e : arr) out.push_back(profile_from_json(e));
    if (out.empty()) throw Error(errc::parse_error, "profiles file has no entries");
    return out;
}

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;

double npdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
double ncdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

// Mean of N(mu, s) conditioned on [lo, hi].
double truncated_mean(double mu, double s, double lo, double hi) {
    double a = (lo - mu) / s, b = (hi - mu) / s;
    double z = ncdf(b) - ncdf(a);
    if (z < 1e-14) return std::clamp(mu, lo, hi);
    return mu + s * (npdf(a) - npdf(b)) / z;
}

// Mean of clamp(N(mu, s), lo, hi).
double clamped_mean(double mu, double s, double lo, double hi) {
    double a = (lo - mu) / s, b = (hi - mu) / s;
    return lo * ncdf(a) + hi * (1.0 - ncdf(b)) + mu * (ncdf(b) - ncdf(a)) +
           s * (npdf(a) - npdf(b));
}

} // namespace

LatencySampler::LatencySampler(double mean_ms, double std_ms, double min_ms, double max_ms,
                               std::uint64_t seed)
    : rng_(SplitMix64::mix(seed, 0x6c617463ULL)), lo_(min_ms), hi_(max_ms) {
    if (!(lo_ <= mean_ms && mean_ms <= hi_) || std_ms < 0.0) {
        throw Error(errc::config_error, "latency sampler: requires min <= mean <= max, std >= 0");
    }

    if (std_ms <= 1e-12 || hi_ - lo_ <= 1e-12) {
        kind_ = Kind::constant;
        mu_ = std::clamp(mean_ms, lo_, hi_);
        return;
    }

    double slack = std::min(mean_ms - lo_, hi_ - mean_ms);
    if (slack < std_ms) {
        // Spike pattern: body near the close bound, occasional draws at the
        // far bound carry the variance.
        kind_ = Kind::spike;
        spike_value_ = (mean_ms - lo_ <= hi_ - mean_ms) ? hi_ : lo_;
        double d = std::abs(spike_value_ - mean_ms);
        sigma_ = std::max(slack / 3.0, 1e-6);

        // p * d^2 = (1-p) * s^2 - (1-p)^2 * sigma^2, monotone in p.
        double plo = 0.0, phi = 0.999;
        for (int i = 0; i < 200; ++i) {
            double p = 0.5 * (plo + phi);
            double g = p * d * d - (1.0 - p) * std_ms * std_ms +
                       (1.0 - p) * (1.0 - p) * sigma_ * sigma_;
            (g < 0.0 ? plo : phi) = p;
        }
        spike_p_ = 0.5 * (plo + phi);

        mu_ = (mean_ms - spike_p_ * spike_value_) / (1.0 - spike_p_);
        for (int i = 0; i < 6; ++i) { // fold in the body clamping bias
            double achieved =
                spike_p_ * spike_value_ + (1.0 - spike_p_) * clamped_mean(mu_, sigma_, lo_, hi_);
            mu_ += (mean_ms - achieved) / (1.0 - spike_p_);
        }
        return;
    }

    // Near-symmetric truncation: recenter the location so the truncated mean
    // lands exactly on the profile mean.
    kind_ = Kind::truncated;
    sigma_ = std_ms;
    double mlo = mean_ms - 8.0 * std_ms - (hi_ - lo_);
    double mhi = mean_ms + 8.0 * std_ms + (hi_ - lo_);
    for (int i = 0; i < 200; ++i) {
        double m = 0.5 * (mlo + mhi);
        (truncated_mean(m, sigma_, lo_, hi_) < mean_ms ? mlo : mhi) = m;
    }
    mu_ = 0.5 * (mlo + mhi);
}

double LatencySampler::normal(double mu, double sigma) {
    if (have_spare_) {
        have_spare_ = false;
        return mu + sigma * spare_;
    }
    double u1 = rng_.next_unit();
    double u2 = rng_.next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mu + sigma * r * std::cos(theta);
}

double LatencySampler::draw() {
    switch (kind_) {
    case Kind::constant:
        return mu_;
    case Kind::truncated:
        for (int i = 0; i < 2000; ++i) {
            double x = normal(mu_, sigma_);
            if (x >= lo_ && x <= hi_) return x;
        }
        return std::clamp(mu_, lo_, hi_);
    case Kind::spike:
        if (rng_.next_unit() < spike_p_) return spike_value_;
        return std::clamp(normal(mu_, sigma_), lo_, hi_);
    }
    return mu_;
}

std::vector<double> calibrate_scores(const RawScores& raw, const TaskSpec& task,
                                     const PlattParams& platt) {
    if (task.labels.size() != 2) {
        throw Error(errc::config_error, "calibration supports binary tasks only");
    }
    if (raw.values.size() != task.labels.size()) {
        throw Error(errc::backend_failure, "score vector length " + std::to_string(raw.values.size()) +
                                               " does not match label count");
    }
    for (double v : raw.values) {
        if (!std::isfinite(v)) throw Error(errc::backend_failure, "non-finite score from backend");
    }

    // Positive-class log-odds; identity Platt params reproduce the raw
    // probabilities exactly.
    double z;
    if (raw.is_probabilities) {
        double p0 = std::clamp(raw.values[0], 1e-12, 1.0 - 1e-12);
        double p1 = std::clamp(raw.values[1], 1e-12, 1.0 - 1e-12);
        z = std::log(p1) - std::log(p0);
    } else {
        z = raw.values[1] - raw.values[0];
    }
    double p = platt_apply(z, platt);
    return {1.0 - p, p};
}

Prediction classify(ClassifierBackend& backend, const detect::RoiTensor& roi,
                    const TaskSpec& task, const PlattParams& platt) {
    Prediction pred;
    double t0 = mono_ms();
    try {
        pred.raw = backend.infer(roi, task);
    } catch (const Error& e) {
        throw Error(errc::backend_failure, backend.name() + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(errc::backend_failure, backend.name() + ": " + e.what());
    }
    pred.latency_ms = mono_ms() - t0;

    pred.calibrated = calibrate_scores(pred.raw, task, platt);
    std::size_t best = 0;
    for (std::size_t i = 1; i < pred.calibrated.size(); ++i) {
        if (pred.calibrated[i] > pred.calibrated[best]) best = i; // ties keep the earlier label
    }
    pred.label = task.labels[best];
    pred.confidence = pred.calibrated[best];
    pred.frame_index = roi.frame_index;
    pred.box = roi.source_box;
    return pred;
}

namespace {

constexpr double kPeakProb = 0.995;

RawScores peaked_scores(std::size_t label_count, std::size_t peak_index) {
    RawScores s;
    s.is_probabilities = true;
    s.values.assign(label_count, (1.0 - kPeakProb) / static_cast<double>(label_count - 1));
    s.values[peak_index] = kPeakProb;
    return s;
}

std::size_t label_index(const TaskSpec& task, const std::string& label) {
    for (std::size_t i = 0; i < task.labels.size(); ++i) {
        if (task.labels[i] == label) return i;
    }
    throw Error(errc::backend_failure,
                "ground truth '" + label + "' is not a label of task " + task.name);
}

class OracleBackend final : public ClassifierBackend {
public:
    explicit OracleBackend(const OracleConfig& cfg)
        : noise_(cfg.noise), rng_(SplitMix64::mix(cfg.seed, 0x6f7261636cULL)) {
        if (noise_ < 0.0 || noise_ > 1.0) {
            throw Error(errc::config_error, "oracle noise must be in [0,1]");
        }
    }

    std::string name() const override { return "oracle"; }

    RawScores infer(const detect::RoiTensor& roi, const TaskSpec& task) override {
        if (!roi.ground_truth || *roi.ground_truth == "absent") {
            throw Error(errc::backend_failure, "oracle backend needs ground-truth provenance");
        }
        std::size_t idx = label_index(task, *roi.ground_truth);
        if (noise_ > 0.0) {
            std::lock_guard lock(mu_);
            if (rng_.next_unit() < noise_) idx = (idx + 1) % task.labels.size();
        }
        return peaked_scores(task.labels.size(), idx);
    }

private:
    double noise_;
    SplitMix64 rng_;
    std::mutex mu_;
};

class LatencyModelBackend final : public ClassifierBackend {
public:
    explicit LatencyModelBackend(const LatencyModelConfig& cfg)
        : profile_(cfg.profile), strategy_(cfg.strategy), mode_(cfg.mode),
          sampler_(cfg.profile.mean_ms, cfg.profile.std_ms, cfg.profile.min_ms,
                   cfg.profile.max_ms, cfg.seed) {
        profile_.validate();
    }

    std::string name() const override { return "latency_model:" + profile_.name; }

    RawScores infer(const detect::RoiTensor& roi, const TaskSpec& task) override {
        double target;
        {
            std::lock_guard lock(mu_);
            target = sampler_.draw();
        }
        if (mode_ == WaitMode::sleep) {
            sleep_until_mono(mono_ms() + target);
        } else {
            burn_cpu_ms(target);
        }

        switch (strategy_) {
        case LabelStrategy::uniform: {
            RawScores s;
            s.is_probabilities = true;
            s.values.assign(task.labels.size(), 1.0 / static_cast<double>(task.labels.size()));
            return s;
        }
        case LabelStrategy::ground_truth:
            if (roi.ground_truth && *roi.ground_truth != "absent") {
                return peaked_scores(task.labels.size(), label_index(task, *roi.ground_truth));
            }
            [[fallthrough]];
        case LabelStrategy::first_label:
        default:
            return peaked_scores(task.labels.size(), 0);
        }
    }

    const BackendProfile& profile() const { return profile_; }

private:
    BackendProfile profile_;
    LabelStrategy strategy_;
    WaitMode mode_;
    LatencySampler sampler_;
    std::mutex mu_;
};

class ExternalBackend final : public ClassifierBackend {
public:
    explicit ExternalBackend(const ExternalConfig& cfg)
        : command_(cfg.command), child_(cfg.command, cfg.args) {}

    std::string name() const override { return "external:" + command_; }
    bool concurrent_safe() const override { return false; }

    RawScores infer(const detect::RoiTensor& roi, const TaskSpec& task) override {
        std::lock_guard lock(mu_);

        char path[] = "/tmp/cribwatch_roi_XXXXXX";
        int fd = mkstemp(path);
        if (fd < 0) throw Error(errc::backend_failure, "cannot create roi temp file");
        const char* bytes = reinterpret_cast<const char*>(roi.data.data());
        std::size_t len = roi.data.size() * sizeof(float); // float32, native LE, HWC order
        std::size_t off = 0;
        while (off < len) {
            ssize_t n = write(fd, bytes + off, len - off);
            if (n < 0) {
                close(fd);
                unlink(path);
                throw Error(errc::backend_failure, "short write to roi temp file");
            }
            off += static_cast<std::size_t>(n);
        }
        close(fd);

        json req = {{"frame_index", roi.frame_index},
                    {"task", task.name},
                    {"roi_digest", fnv1a_hex(bytes, len)},
                    {"roi_file", std::string(path)}};
        std::string line;
        try {
            child_.write_line(req.dump());
            line = child_.read_line();
        } catch (...) {
            unlink(path);
            throw;
        }
        unlink(path);

        json resp = json::parse(line, nullptr, false);
        if (resp.is_discarded() || !resp.is_array()) {
            throw Error(errc::backend_failure, "external backend sent a malformed response");
        }
        RawScores s;
        for (const auto& v : resp) {
            if (!v.is_number()) {
                throw Error(errc::backend_failure, "external backend sent a non-numeric score");
            }
            s.values.push_back(v.get<double>());
        }
        // Probability vectors are recognized by shape; anything else is a logit.
        double sum = 0.0;
        bool unit_range = true;
        for (double v : s.values) {
            sum += v;
            unit_range = unit_range && v >= 0.0 && v <= 1.0;
        }
        s.is_probabilities = unit_range && std::abs(sum - 1.0) <= 1e-6;
        return s;
    }

private:
    std::string command_;
    Subprocess child_;
    std::mutex mu_;
};

} // namespace

std::unique_ptr<ClassifierBackend> make_oracle_backend(const OracleConfig& cfg) {
    return std::make_unique<OracleBackend>(cfg);
}

std::unique_ptr<ClassifierBackend> make_latency_model_backend(const LatencyModelConfig& cfg) {
    return std::make_unique<LatencyModelBackend>(cfg);
}

std::unique_ptr<ClassifierBackend> make_external_backend(const ExternalConfig& cfg) {
    if (cfg.command.empty()) throw Error(errc::config_error, "external backend needs a command");
    return std::make_unique<ExternalBackend>(cfg);
}

std::unique_ptr<ClassifierBackend> make_backend(const json& config) {
    std::string kind;
    try {
        kind = config.at("kind").get<std::string>();
    } catch (const json::exception&) {
        throw Error(errc::config_error, "backend config needs a 'kind' field");
    }

    try {
        if (kind == "oracle") {
            OracleConfig c;
            c.noise = config.value("noise", 0.0);
            c.seed = config.value("seed", 0ULL);
            return make_oracle_backend(c);
        }
        if (kind == "latency_model") {
            LatencyModelConfig c;
            if (config.contains("profile") && config["profile"].is_object()) {
                c.profile = profile_from_json(config["profile"]);
            } else if (config.contains("profile_file")) {
                auto profiles = load_profiles(config.at("profile_file").get<std::string>());
                auto name = config.at("profile_name").get<std::string>();
                auto it = std::find_if(profiles.begin(), profiles.end(),
                                       [&](const BackendProfile& p) { return p.name == name; });
                if (it == profiles.end()) {
                    throw Error(errc::config_error, "profile '" + name + "' not found");
                }
                c.profile = *it;
            } else {
                throw Error(errc::config_error,
                            "latency_model needs 'profile' or 'profile_file'+'profile_name'");
            }
            auto strategy = config.value("strategy", std::string("ground_truth"));
            if (strategy == "ground_truth") c.strategy = LabelStrategy::ground_truth;
            else if (strategy == "first_label") c.strategy = LabelStrategy::first_label;
            else if (strategy == "uniform") c.strategy = LabelStrategy::uniform;
            else throw Error(errc::config_error, "unknown label strategy: " + strategy);
            auto mode = config.value("mode", std::string("sleep"));
            if (mode == "sleep") c.mode = WaitMode::sleep;
            else if (mode == "busy") c.mode = WaitMode::busy;
            else throw Error(errc::config_error, "unknown wait mode: " + mode);
            c.seed = config.value("seed", 0ULL);
            return make_latency_model_backend(c);
        }
        if (kind == "external") {
            ExternalConfig c;
            c.command = config.at("command").get<std::string>();
            if (config.contains("args")) {
                for (const auto& a : config["args"]) c.args.push_back(a.get<std::string>());
            }
            return make_external_backend(c);
        }
    } catch (const json::exception& e) {
        throw Error(errc::config_error, std::string("backend config: ") + e.what());
    }
    throw Error(errc::config_error, "unknown backend kind: " + kind);
}

} // namespace cribwatch::classify
