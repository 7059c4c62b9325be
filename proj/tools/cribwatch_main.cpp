#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cribwatch/bench.hpp"
#include "cribwatch/net.hpp"
#include "cribwatch/pipeline.hpp"
#include "cribwatch/telemetry.hpp"

using nlohmann::json;
using namespace cribwatch;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitBudget = 2;
constexpr int kExitSource = 3;

int exit_code_for(const std::string& code) {
    if (code == errc::source_error || code == errc::io_error || code == errc::empty_directory ||
        code == errc::unsupported_format || code == errc::connect_error ||
        code == errc::sink_unavailable) {
        return kExitSource;
    }
    return kExitConfig;
}

std::string default_output_dir() {
    const char* env = std::getenv("CRIBWATCH_OUTPUT_DIR");
    return env && *env ? env : ".";
}

// Applies a dotted-path override like "backend.kind=latency_model" onto the
// config tree. Values parse as JSON when they can, else as strings.
void apply_override(json& config, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(errc::config_error, "--set expects key.path=value, got: " + assignment);
    }
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    std::string pointer = "/";
    for (char c : path) pointer.push_back(c == '.' ? '/' : c);

    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    try {
        config[json::json_pointer(pointer)] = parsed;
    } catch (const json::exception& e) {
        throw Error(errc::config_error, "--set " + assignment + ": " + e.what());
    }
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(errc::config_error, "cannot open config " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(errc::config_error, "config is not valid JSON: " + path);
    if (!j.is_object()) throw Error(errc::config_error, "config root must be an object");
    return j;
}

struct RunArgs {
    std::string scenario;
    std::string images;
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::string backend;
    int workers = 0;
    double fps = 0.0;
    std::string pacing;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool enforce_budget = false;
    double budget_ms = 0.0;
    bool annotate = false;
};

int cmd_run(const RunArgs& args) {
    if (args.scenario.empty() == args.images.empty()) {
        throw Error(errc::config_error, "exactly one of --scenario or --images is required");
    }

    json config = json::object();
    if (!args.config_path.empty()) config = load_config_file(args.config_path);
    if (!args.backend.empty()) config["backend"]["kind"] = args.backend;
    if (args.workers > 0) config["workers"] = args.workers;
    if (args.fps > 0.0) config["fps"] = args.fps;
    if (!args.pacing.empty()) config["pacing"] = args.pacing;
    if (args.seed_set) config["backend"]["seed"] = args.seed;
    if (args.budget_ms > 0.0) config["latency_budget_ms"] = args.budget_ms;
    for (const auto& o : args.overrides) apply_override(config, o);

    std::filesystem::create_directories(args.out_dir);
    config["frame_log"] = args.out_dir + "/frames.ndjson";
    if (args.annotate) config["annotate_dir"] = args.out_dir + "/annotated";

    std::unique_ptr<frames::FrameSource> source;
    double source_fps;
    if (!args.scenario.empty()) {
        auto script = frames::load_scenario(args.scenario);
        source_fps = script.fps;
        if (!config.contains("resolution")) {
            config["resolution"] = {{"width", script.resolution.width},
                                    {"height", script.resolution.height}};
        }
        source = std::make_unique<frames::ScenarioSource>(std::move(script));
    } else {
        source_fps = config.value("fps", 25.0);
        source = std::make_unique<frames::ImageSequenceSource>(args.images, source_fps);
    }
    if (!config.contains("fps")) config["fps"] = source_fps;

    auto cfg = pipeline::PipelineConfig::from_json(config);

    // Telemetry: file sink into the output directory unless configured.
    json telemetry_cfg = config.value("telemetry", json::object());
    json sink_cfg = telemetry_cfg.value("sink", json{{"kind", "file"},
                                                     {"path", args.out_dir + "/telemetry.ndjson"}});
    auto sink = telemetry::connect_sink(sink_cfg);
    telemetry::BatcherConfig bcfg;
    bcfg.interval_ms = telemetry_cfg.value("interval_ms", bcfg.interval_ms);
    bcfg.max_batch = telemetry_cfg.value("max_batch", bcfg.max_batch);
    bcfg.buffer_capacity = telemetry_cfg.value("buffer_capacity", bcfg.buffer_capacity);
    bcfg.device_id = cfg.device_id;
    telemetry::ThreadedBatcher batcher(bcfg, *sink);

    pipeline::Pipeline pipe(cfg, &batcher);
    auto report = pipe.run(*source);
    batcher.stop_and_drain();

    {
        std::ofstream out(args.out_dir + "/report.json");
        out << report.to_json().dump(2) << "\n";
    }
    {
        std::ofstream out(args.out_dir + "/alerts.ndjson");
        for (const auto& a : report.alerts) {
            out << json{{"label", a.rule.label},
                        {"raised_at_ms", a.raised_at_ms},
                        {"episode_start_ms", a.episode_start_ms},
                        {"priority", "critical"}}
                       .dump()
                << "\n";
        }
    }

    std::cout << "frames_in=" << report.frames_in << " processed=" << report.frames_processed
              << " dropped=" << report.frames_dropped << " skipped=" << report.frames_skipped
              << " alerts=" << report.alerts.size() << " mean_e2e_ms="
              << fmt_double(report.end_to_end.mean_ms) << " achieved_fps="
              << fmt_double(report.achieved_fps) << "\n";

    if (report.incomplete) {
        std::cerr << "error_code=" << errc::source_error << " " << report.source_error << "\n";
        return kExitSource;
    }
    if (args.enforce_budget) {
        auto verdict = bench::end_to_end_budget_check(report.end_to_end.mean_ms,
                                                      report.frames_processed,
                                                      report.budget_violations,
                                                      cfg.latency_budget_ms);
        if (!verdict.pass) {
            std::cerr << "error_code=budget_exceeded " << verdict.reason << "\n";
            return kExitBudget;
        }
    }
    return kExitOk;
}

struct BenchArgs {
    std::string profiles_path;
    std::string out_dir;
    bool measure = false;
    int n = 200;
    int warmup = 5;
    std::string task = "cry_normal";
};

int cmd_bench(const BenchArgs& args) {
    if (args.n < 30) {
        throw Error(errc::validation_error, "bench needs n >= 30 samples per model");
    }
    auto profiles = classify::load_profiles(args.profiles_path);
    std::filesystem::create_directories(args.out_dir);

    std::vector<bench::BenchRow> rows;
    for (const auto& p : profiles) rows.push_back(bench::row_from_profile(p));

    if (args.measure) {
        // One synthetic ROI reused across all timed calls.
        frames::ScenarioScript script;
        script.fps = 25.0;
        script.noise_seed = 7;
        script.timeline = {{0.0, 1000.0, "normal", {200, 120, 160, 160}}};
        auto frame = detect::to_rgb(frames::synth_next_frame(script, 0));
        detect::MarkerDetector detector;
        auto boxes = detect::detect_faces(detector, frame);
        auto roi = detect::extract_roi(frame, boxes.at(0));
        auto task = classify::task_by_name(args.task);

        for (const auto& p : profiles) {
            classify::LatencyModelConfig lm;
            lm.profile = p;
            lm.seed = 42;
            auto backend = classify::make_latency_model_backend(lm);
            auto m = bench::measure_backend(*backend, roi, task, args.n, args.warmup);
            rows.push_back(bench::row_from_measurement(p.name + "_measured", m, p.stored_size_mb));
            std::cout << p.name << " measured mean=" << fmt_double(m.stats.mean_ms)
                      << "ms std=" << fmt_double(m.stats.std_ms) << "ms\n";
        }
    }

    bench::emit_inference_csv(args.out_dir + "/inference_bench.csv", rows);
    bench::emit_tradeoff_csv(args.out_dir + "/tradeoff_scatter.csv", rows);
    std::cout << "wrote " << args.out_dir << "/inference_bench.csv and tradeoff_scatter.csv\n";
    return kExitOk;
}

struct AnalyzeArgs {
    std::string model_path;
    std::string out_dir;
    std::string resolutions = "1280x720,854x480,640x360";
    std::string faces = "1";
    std::string fps = "30,25";
    std::string pose = "both";
    std::string skips = "1";
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

int cmd_analyze(const AnalyzeArgs& args) {
    bench::CostModel model; // Table 5 defaults
    if (!args.model_path.empty()) model = bench::CostModel::load(args.model_path);

    bench::SweepSpec sweep;
    for (const auto& r : split_csv(args.resolutions)) {
        auto x = r.find('x');
        if (x == std::string::npos) {
            throw Error(errc::config_error, "resolution must look like 1280x720, got " + r);
        }
        sweep.resolutions.push_back({std::stoi(r.substr(0, x)), std::stoi(r.substr(x + 1))});
    }
    for (const auto& f : split_csv(args.faces)) sweep.faces.push_back(std::stoi(f));
    for (const auto& f : split_csv(args.fps)) sweep.target_fps.push_back(std::stod(f));
    for (const auto& s : split_csv(args.skips)) sweep.skips.push_back(std::stoi(s));
    if (args.pose == "both") sweep.pose = {false, true};
    else if (args.pose == "on") sweep.pose = {true};
    else if (args.pose == "off") sweep.pose = {false};
    else throw Error(errc::config_error, "--pose must be on, off, or both");

    std::filesystem::create_directories(args.out_dir);
    std::string path = args.out_dir + "/feasibility.csv";
    bench::emit_feasibility_csv(path, model, sweep);
    std::cout << "wrote " << path << "\n";
    return kExitOk;
}

std::atomic<bool> g_broker_stop{false};

struct BrokerArgs {
    int port = 0;
    std::string log_path = "broker.ndjson";
    int fail_every = 0;
    std::string tls_cert;
    std::string tls_key;
};

int cmd_broker(const BrokerArgs& args) {
    std::optional<net::TlsServerConfig> tls;
    if (!args.tls_cert.empty() || !args.tls_key.empty()) {
        if (args.tls_cert.empty() || args.tls_key.empty()) {
            throw Error(errc::tls_config_error, "broker TLS needs both --tls-cert and --tls-key");
        }
        tls = net::TlsServerConfig{args.tls_cert, args.tls_key, 2};
    }

    net::MockBroker broker(args.port, args.log_path, args.fail_every, tls);
    broker.start();
    std::cout << "listening on port " << broker.port() << "\n" << std::flush;

    struct sigaction sa{};
    sa.sa_handler = [](int) { g_broker_stop = true; };
    sigaction(SIGTERM, &sa, nullptr);
    sigaction(SIGINT, &sa, nullptr);

    while (!g_broker_stop) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    broker.stop(); // flushes the NDJSON log
    std::cout << "received " << broker.frames_received() << " frames\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cribwatch: real-time behavioral monitoring pipeline and benchmark harness"};
    app.require_subcommand(1);

    RunArgs run_args;
    run_args.out_dir = default_output_dir();
    auto* run = app.add_subcommand("run", "process a scenario or image sequence");
    run->add_option("--scenario", run_args.scenario, "scenario script (.scn JSON)");
    run->add_option("--images", run_args.images, "directory of .ppm frames");
    run->add_option("--config", run_args.config_path, "pipeline config JSON");
    run->add_option("--set", run_args.overrides, "dotted-path config override key=value");
    run->add_option("--out", run_args.out_dir, "output directory");
    run->add_option("--backend", run_args.backend, "backend kind shorthand");
    run->add_option("--workers", run_args.workers, "worker thread count");
    run->add_option("--fps", run_args.fps, "frame rate override");
    run->add_option("--pacing", run_args.pacing, "fast|realtime");
    run->add_option("--seed", run_args.seed, "backend seed")->each([&](const std::string&) {
        run_args.seed_set = true;
    });
    run->add_flag("--enforce-budget", run_args.enforce_budget, "exit 2 when the budget check fails");
    run->add_option("--budget-ms", run_args.budget_ms, "latency budget override (ms)");
    run->add_flag("--annotate", run_args.annotate, "write annotated rasters + sidecars");

    RunArgs replay_args;
    replay_args.out_dir = default_output_dir();
    auto* replay = app.add_subcommand("replay", "replay a prerecorded image sequence");
    replay->add_option("dir", replay_args.images, "directory of .ppm frames")->required();
    replay->add_option("--config", replay_args.config_path, "pipeline config JSON");
    replay->add_option("--set", replay_args.overrides, "dotted-path config override key=value");
    replay->add_option("--out", replay_args.out_dir, "output directory");
    replay->add_option("--backend", replay_args.backend, "backend kind shorthand");
    replay->add_option("--fps", replay_args.fps, "replay frame rate");
    replay->add_option("--pacing", replay_args.pacing, "fast|realtime");

    BenchArgs bench_args;
    bench_args.out_dir = default_output_dir();
    auto* bench_cmd = app.add_subcommand("bench", "emit inference benchmark reports");
    bench_cmd->add_option("--profiles", bench_args.profiles_path, "backend profiles JSON")
        ->required();
    bench_cmd->add_option("--out", bench_args.out_dir, "output directory");
    bench_cmd->add_flag("--measure", bench_args.measure,
                        "measure the latency-model backends alongside profile rows");
    bench_cmd->add_option("--n", bench_args.n, "timed samples per model (>= 30)");
    bench_cmd->add_option("--warmup", bench_args.warmup, "warmup calls per model");
    bench_cmd->add_option("--task", bench_args.task, "classification task");

    AnalyzeArgs analyze_args;
    analyze_args.out_dir = default_output_dir();
    auto* analyze = app.add_subcommand("analyze", "feasibility sweep over the cost model");
    analyze->add_option("--model", analyze_args.model_path, "cost model JSON (defaults built in)");
    analyze->add_option("--out", analyze_args.out_dir, "output directory");
    analyze->add_option("--resolutions", analyze_args.resolutions, "WxH list, comma separated");
    analyze->add_option("--faces", analyze_args.faces, "face counts, comma separated");
    analyze->add_option("--fps", analyze_args.fps, "target fps list, comma separated");
    analyze->add_option("--pose", analyze_args.pose, "on|off|both");
    analyze->add_option("--skip", analyze_args.skips, "frame-skip factors, comma separated");

    BrokerArgs broker_args;
    auto* broker = app.add_subcommand("broker", "run the mock telemetry broker");
    broker->add_option("--port", broker_args.port, "listen port (0 = ephemeral)");
    broker->add_option("--log", broker_args.log_path, "NDJSON log path");
    broker->add_option("--fail-every", broker_args.fail_every, "refuse every Nth connection");
    broker->add_option("--tls-cert", broker_args.tls_cert, "PEM certificate");
    broker->add_option("--tls-key", broker_args.tls_key, "PEM private key");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(run_args);
        if (replay->parsed()) return cmd_run(replay_args);
        if (bench_cmd->parsed()) return cmd_bench(bench_args);
        if (analyze->parsed()) return cmd_analyze(analyze_args);
        if (broker->parsed()) return cmd_broker(broker_args);
    } catch (const Error& e) {
        std::cerr << "error_code=" << e.code() << " " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error_code=internal " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
