#include "cribwatch/frames.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cribwatch::frames {

void validate_resolution(const Resolution& r) {
    if (r.width < 16 || r.height < 16) {
        throw Error(errc::validation_error, "resolution must be at least 16x16, got " +
                                                std::to_string(r.width) + "x" +
                                                std::to_string(r.height));
    }
}

std::uint8_t label_band(const std::string& label) {
    if (label == "sleep") return 200;
    if (label == "awake") return 216;
    if (label == "crying") return 232;
    if (label == "normal") return 248;
    throw Error(errc::validation_error, "unknown behavioral label: " + label);
}

std::int64_t ScenarioScript::frame_count() const {
    if (timeline.empty()) return 0;
    return static_cast<std::int64_t>(std::ceil(duration_ms() * fps / 1000.0));
}

const Segment* ScenarioScript::segment_at(double t_ms) const {
    for (const auto& seg : timeline) {
        if (t_ms >= seg.start_ms && t_ms < seg.end_ms) return &seg;
    }
    return nullptr;
}

namespace {

ScenarioScript parse_script(const json& j) {
    ScenarioScript s;
    try {
        s.fps = j.at("fps").get<double>();
        s.resolution.width = j.at("width").get<int>();
        s.resolution.height = j.at("height").get<int>();
        s.noise_seed = j.at("noise_seed").get<std::uint64_t>();
        for (const auto& e : j.at("timeline")) {
            Segment seg;
            seg.start_ms = e.at("start_ms").get<double>();
            seg.end_ms = e.at("end_ms").get<double>();
            seg.label = e.at("label").get<std::string>();
            const auto& r = e.at("region");
            seg.region = {r.at("x").get<int>(), r.at("y").get<int>(),
                          r.at("w").get<int>(), r.at("h").get<int>()};
            s.timeline.push_back(seg);
        }
    } catch (const json::exception& e) {
        throw Error(errc::parse_error, std::string("scenario: ") + e.what());
    }

    if (s.fps <= 0.0) throw Error(errc::validation_error, "scenario: fps must be > 0");
    validate_resolution(s.resolution);
    for (std::size_t i = 0; i < s.timeline.size(); ++i) {
        const auto& seg = s.timeline[i];
        if (seg.end_ms <= seg.start_ms) {
            throw Error(errc::validation_error, "scenario: segment " + std::to_string(i) +
                                                    " has non-positive duration");
        }
        label_band(seg.label); // rejects labels outside the closed sets
        const auto& r = seg.region;
        if (r.w <= 0 || r.h <= 0 || r.x < 0 || r.y < 0 ||
            r.x + r.w > s.resolution.width || r.y + r.h > s.resolution.height) {
            throw Error(errc::validation_error,
                        "scenario: segment " + std::to_string(i) + " region out of bounds");
        }
        if (i > 0) {
            if (seg.start_ms < s.timeline[i - 1].start_ms) {
                throw Error(errc::validation_error, "scenario: timeline not sorted by start");
            }
            if (seg.start_ms < s.timeline[i - 1].end_ms) {
                throw Error(errc::validation_error,
                            "scenario: segments overlap at t=" + std::to_string(seg.start_ms));
            }
        }
    }
    return s;
}

} // namespace

ScenarioScript scenario_from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw Error(errc::parse_error, "scenario: invalid JSON");
    return parse_script(j);
}

ScenarioScript load_scenario(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(errc::parse_error, "scenario: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return scenario_from_json_text(text);
}

Frame synth_next_frame(const ScenarioScript& script, std::int64_t index) {
    if (index < 0) throw Error(errc::validation_error, "frame index must be >= 0");

    Frame f;
    f.index = index;
    f.timestamp_ms = static_cast<double>(index) * (1000.0 / script.fps);
    f.resolution = script.resolution;
    f.channels = ChannelOrder::bgr;

    const std::size_t n = static_cast<std::size_t>(script.resolution.area()) * 3;
    f.pixels.resize(n);

    // Static base texture from the seed alone plus a tiny per-frame flicker:
    // adjacent frames of a static scene stay under small motion thresholds
    // while never being byte-identical.
    SplitMix64 base_rng(script.noise_seed);
    SplitMix64 flicker_rng(SplitMix64::mix(script.noise_seed, static_cast<std::uint64_t>(index) + 1));
    std::size_t i = 0;
    while (i < n) {
        std::uint64_t base_bits = base_rng.next();
        std::uint64_t flick_bits = flicker_rng.next();
        for (int b = 0; b < 8 && i < n; ++b, ++i) {
            auto base = static_cast<std::uint8_t>(112 + ((base_bits >> (8 * b)) & 31));
            auto flick = static_cast<std::uint8_t>((flick_bits >> (8 * b)) & 3);
            f.pixels[i] = static_cast<std::uint8_t>(base + flick);
        }
    }

    const Segment* seg = script.segment_at(f.timestamp_ms);
    if (seg != nullptr) {
        std::uint8_t band = label_band(seg->label);
        for (int y = seg->region.y; y < seg->region.y + seg->region.h; ++y) {
            std::uint8_t* row = f.at(seg->region.x, y);
            std::fill(row, row + static_cast<std::size_t>(seg->region.w) * 3, band);
        }
        f.ground_truth = seg->label;
    } else {
        f.ground_truth = "absent";
    }
    return f;
}

Frame read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(errc::io_error, "cannot open " + path);

    std::string magic;
    in >> magic;
    if (magic != "P6") throw Error(errc::unsupported_format, path + ": not a binary PPM (P6)");

    auto next_token = [&in, &path]() -> long {
        // Skips whitespace and '#' comments per the PPM grammar.
        for (;;) {
            int c = in.peek();
            if (c == '#') {
                std::string junk;
                std::getline(in, junk);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        long v = -1;
        in >> v;
        if (!in) throw Error(errc::unsupported_format, path + ": truncated PPM header");
        return v;
    };

    long w = next_token();
    long h = next_token();
    long maxval = next_token();
    if (maxval != 255) throw Error(errc::unsupported_format, path + ": maxval must be 255");
    in.get(); // single whitespace after header

    Frame f;
    f.resolution = {static_cast<int>(w), static_cast<int>(h)};
    validate_resolution(f.resolution);
    f.channels = ChannelOrder::rgb;
    f.pixels.resize(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(f.pixels.size())) {
        throw Error(errc::unsupported_format, path + ": truncated pixel data");
    }
    return f;
}

void write_ppm(const std::string& path, const Frame& frame) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(errc::io_error, "cannot write " + path);
    out << "P6\n" << frame.resolution.width << " " << frame.resolution.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(frame.pixels.data()),
              static_cast<std::streamsize>(frame.pixels.size()));
    if (!out) throw Error(errc::io_error, "short write to " + path);
}

ScenarioSource::ScenarioSource(ScenarioScript script)
    : script_(std::move(script)), total_(script_.frame_count()) {}

std::optional<Frame> ScenarioSource::next() {
    if (next_index_ >= total_) return std::nullopt;
    return synth_next_frame(script_, next_index_++);
}

ImageSequenceSource::ImageSequenceSource(const std::string& dir, double fps) : fps_(fps) {
    if (fps <= 0.0) throw Error(errc::validation_error, "fps must be > 0");
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(dir, ec)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
            files_.push_back(entry.path().string());
        }
    }
    if (ec) throw Error(errc::io_error, "cannot read directory " + dir);
    if (files_.empty()) throw Error(errc::empty_directory, "no .ppm files in " + dir);
    std::sort(files_.begin(), files_.end());
}

std::optional<Frame> ImageSequenceSource::next() {
    if (next_index_ >= static_cast<std::int64_t>(files_.size())) return std::nullopt;
    Frame f = read_ppm(files_[static_cast<std::size_t>(next_index_)]);
    f.index = next_index_;
    f.timestamp_ms = static_cast<double>(next_index_) * (1000.0 / fps_);
    ++next_index_;
    return f;
}

PacedSource::PacedSource(std::unique_ptr<FrameSource> inner, double fps, PaceMode mode)
    : inner_(std::move(inner)), interval_ms_(1000.0 / fps), mode_(mode) {
    if (fps <= 0.0) throw Error(errc::validation_error, "fps must be > 0");
}

std::optional<Frame> PacedSource::next() {
    auto f = inner_->next();
    if (!f) return f;
    if (mode_ == PaceMode::realtime) {
        // Per-gap spacing, not an absolute schedule: even after a stall the
        // next delivery still waits a full interval.
        double now = mono_ms();
        double due = last_emit_ms_ < 0.0 ? now : last_emit_ms_ + interval_ms_;
        if (due > now) sleep_until_mono(due);
        last_emit_ms_ = mono_ms();
    }
    return f;
}

} // namespace cribwatch::frames
