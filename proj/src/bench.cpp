#include "cribwatch/bench.hpp"

#include <fstream>
#include <sstream>

using nlohmann::json;

namespace cribwatch::bench {

LatencyStats compute_stats(const std::vector<double>& samples_ms) {
    if (samples_ms.empty()) throw Error(errc::validation_error, "stats need at least one sample");
    StatsAccumulator acc;
    for (double s : samples_ms) acc.add(s);
    return {acc.mean(), acc.std(), acc.min(), acc.max(), acc.count()};
}

Measurement measure_backend(classify::ClassifierBackend& backend,
                            const detect::RoiTensor& roi_fixture, const classify::TaskSpec& task,
                            int n, int warmup) {
    if (n < 30) throw Error(errc::validation_error, "measure_backend needs n >= 30");
    if (warmup < 1) throw Error(errc::validation_error, "measure_backend needs warmup >= 1");

    MemoryProbe probe;
    for (int i = 0; i < warmup; ++i) {
        backend.infer(roi_fixture, task);
    }
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double t0 = mono_ms();
        backend.infer(roi_fixture, task);
        samples.push_back(mono_ms() - t0);
    }
    probe.stop();
    return {compute_stats(samples), probe.peak_increment_mb()};
}

void CostRange::validate(const char* what) const {
    if (lo_ms < 0.0 || hi_ms < lo_ms) {
        throw Error(errc::validation_error, std::string(what) + ": range needs 0 <= lo <= hi");
    }
}

void CostModel::validate() const {
    read.validate("read");
    face.validate("face");
    pose.validate("pose");
    infer_per_face.validate("infer_per_face");
    init.validate("init");
    network.validate("network");
    frames::validate_resolution(reference);
}

namespace {
CostRange range_from_json(const json& j, const char* key, CostRange fallback) {
    if (!j.contains(key)) return fallback;
    const auto& e = j.at(key);
    return {e.at(0).get<double>(), e.at(1).get<double>()};
}
} // namespace

CostModel CostModel::from_json(const json& j) {
    CostModel m;
    try {
        m.read = range_from_json(j, "read_ms", m.read);
        m.face = range_from_json(j, "face_ms", m.face);
        m.pose = range_from_json(j, "pose_ms", m.pose);
        m.infer_per_face = range_from_json(j, "infer_ms_per_face", m.infer_per_face);
        m.init = range_from_json(j, "init_ms", m.init);
        m.network = range_from_json(j, "network_ms", m.network);
        if (j.contains("reference_resolution")) {
            m.reference = {j["reference_resolution"].at("width").get<int>(),
                           j["reference_resolution"].at("height").get<int>()};
        }
    } catch (const json::exception& e) {
        throw Error(errc::parse_error, std::string("cost model: ") + e.what());
    }
    m.validate();
    return m;
}

CostModel CostModel::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(errc::parse_error, "cannot open cost model " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(errc::parse_error, "cost model is not valid JSON");
    return from_json(j);
}

CostModel scale_cost(const CostModel& model, const frames::Resolution& resolution) {
    frames::validate_resolution(resolution);
    double factor = static_cast<double>(resolution.area()) /
                    static_cast<double>(model.reference.area());
    CostModel scaled = model;
    scaled.face = {model.face.lo_ms * factor, model.face.hi_ms * factor};
    scaled.pose = {model.pose.lo_ms * factor, model.pose.hi_ms * factor};
    scaled.reference = resolution;
    return scaled;
}

FeasibilityResult feasibility(const CostModel& model, int faces, double target_fps,
                              bool include_pose, int skip) {
    if (faces < 0) throw Error(errc::validation_error, "faces must be >= 0");
    if (target_fps <= 0.0) throw Error(errc::validation_error, "target_fps must be > 0");
    if (skip < 1) throw Error(errc::validation_error, "skip must be >= 1");

    FeasibilityResult r;
    r.faces = faces;
    r.target_fps = target_fps;
    r.skip = skip;
    r.include_pose = include_pose;
    r.budget_ms = 1000.0 / target_fps;

    double lo = model.read.lo_ms + model.face.lo_ms + faces * model.infer_per_face.lo_ms;
    double hi = model.read.hi_ms + model.face.hi_ms + faces * model.infer_per_face.hi_ms;
    if (include_pose) {
        lo += model.pose.lo_ms;
        hi += model.pose.hi_ms;
    }
    r.per_frame = {lo / skip, hi / skip};

    struct Contributor {
        const char* name;
        double mid;
    };
    std::vector<Contributor> contributors = {
        {"frame_read", model.read.mid()},
        {"face_detection", model.face.mid()},
        {"inference", faces * model.infer_per_face.mid()},
    };
    if (include_pose) contributors.push_back({"pose_detection", model.pose.mid()});
    const Contributor* top = &contributors[0];
    for (const auto& c : contributors) {
        if (c.mid > top->mid) top = &c;
    }
    r.limiting_stage = top->name;

    r.feasible_lo = r.per_frame.lo_ms <= r.budget_ms;
    r.feasible_mid = r.per_frame.mid() <= r.budget_ms;
    r.feasible_hi = r.per_frame.hi_ms <= r.budget_ms;
    return r;
}

BudgetVerdict end_to_end_budget_check(double mean_end_to_end_ms, std::size_t frames_processed,
                                      std::size_t budget_violations, double budget_ms) {
    BudgetVerdict v;
    v.mean_ms = mean_end_to_end_ms;
    v.violation_rate = frames_processed > 0
                           ? static_cast<double>(budget_violations) / frames_processed
                           : 0.0;
    if (mean_end_to_end_ms > budget_ms) {
        v.pass = false;
        v.reason = "mean end-to-end " + fmt_double(mean_end_to_end_ms) + " ms exceeds budget " +
                   fmt_double(budget_ms) + " ms";
    } else if (v.violation_rate >= 0.01) {
        v.pass = false;
        v.reason = "violation rate " + fmt_double(v.violation_rate) + " is not below 1%";
    } else {
        v.pass = true;
        v.reason = "within budget";
    }
    return v;
}

BenchRow row_from_profile(const classify::BackendProfile& p) {
    return {p.name, p.memory_txt, p.mean_txt, p.std_txt, p.min_txt, p.max_txt, p.size_txt};
}

BenchRow row_from_measurement(const std::string& model, const Measurement& m, double size_mb) {
    return {model,
            fmt_double(m.peak_memory_mb),
            fmt_double(m.stats.mean_ms),
            fmt_double(m.stats.std_ms),
            fmt_double(m.stats.min_ms),
            fmt_double(m.stats.max_ms),
            fmt_double(size_mb)};
}

namespace {
std::ofstream open_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    if (rows.empty()) throw Error(errc::validation_error, "no rows to report");
    std::ofstream out(path);
    if (!out) throw Error(errc::io_error, "cannot write " + path);
    return out;
}
} // namespace

void emit_inference_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    auto out = open_csv(path, rows);
    out << "model,memory_mb,mean_ms,std_ms,min_ms,max_ms,size_mb\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.memory_mb << ',' << r.mean_ms << ',' << r.std_ms << ','
            << r.min_ms << ',' << r.max_ms << ',' << r.size_mb << '\n';
    }
    if (!out) throw Error(errc::io_error, "short write to " + path);
}

void emit_tradeoff_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    auto out = open_csv(path, rows);
    out << "model,mean_ms,memory_mb,size_mb\n";
    for (const auto& r : rows) {
        out << r.model << ',' << r.mean_ms << ',' << r.memory_mb << ',' << r.size_mb << '\n';
    }
    if (!out) throw Error(errc::io_error, "short write to " + path);
}

std::vector<BenchRow> parse_inference_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(errc::io_error, "cannot open " + path);
    std::string line;
    std::getline(in, line); // header
    std::vector<BenchRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        BenchRow r;
        std::getline(ss, r.model, ',');
        std::getline(ss, r.memory_mb, ',');
        std::getline(ss, r.mean_ms, ',');
        std::getline(ss, r.std_ms, ',');
        std::getline(ss, r.min_ms, ',');
        std::getline(ss, r.max_ms, ',');
        std::getline(ss, r.size_mb, ',');
        rows.push_back(std::move(r));
    }
    return rows;
}

void emit_feasibility_csv(const std::string& path, const CostModel& model, const SweepSpec& sweep) {
    std::ofstream out(path);
    if (!out) throw Error(errc::io_error, "cannot write " + path);
    out << "width,height,faces,pose,skip,target_fps,lo_ms,mid_ms,hi_ms,budget_ms,"
           "feasible_lo,feasible_mid,feasible_hi,limiting_stage\n";
    for (const auto& res : sweep.resolutions) {
        CostModel scaled = scale_cost(model, res);
        for (int f : sweep.faces) {
            for (bool pose : sweep.pose) {
                for (int skip : sweep.skips) {
                    for (double fps : sweep.target_fps) {
                        auto r = feasibility(scaled, f, fps, pose, skip);
                        out << res.width << ',' << res.height << ',' << f << ','
                            << (pose ? 1 : 0) << ',' << skip << ',' << fmt_double(fps) << ','
                            << fmt_double(r.per_frame.lo_ms) << ','
                            << fmt_double(r.per_frame.mid()) << ','
                            << fmt_double(r.per_frame.hi_ms) << ',' << fmt_double(r.budget_ms)
                            << ',' << (r.feasible_lo ? 1 : 0) << ',' << (r.feasible_mid ? 1 : 0)
                            << ',' << (r.feasible_hi ? 1 : 0) << ',' << r.limiting_stage << '\n';
                    }
                }
            }
        }
    }
    if (!out) throw Error(errc::io_error, "short write to " + path);
}

} // namespace cribwatch::bench
