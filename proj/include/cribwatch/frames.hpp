#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cribwatch/util.hpp"

namespace cribwatch::frames {

struct Resolution {
    int width = 0;
    int height = 0;

    bool operator==(const Resolution&) const = default;
    std::int64_t area() const { return static_cast<std::int64_t>(width) * height; }
};

// Sources below guarantee width/height >= 16.
void validate_resolution(const Resolution& r);

enum class ChannelOrder { bgr, rgb };

// The unit of pipeline work: a timestamped 8-bit 3-channel pixel buffer.
// Ground truth rides along for synthetic sources so end-to-end accuracy can
// be asserted without any clock alignment.
struct Frame {
    std::int64_t index = 0;
    double timestamp_ms = 0.0;
    Resolution resolution;
    ChannelOrder channels = ChannelOrder::bgr;
    std::vector<std::uint8_t> pixels; // height * width * 3
    std::optional<std::string> ground_truth;

    std::uint8_t* at(int x, int y) {
        return pixels.data() + (static_cast<std::size_t>(y) * resolution.width + x) * 3;
    }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<std::size_t>(y) * resolution.width + x) * 3;
    }
};

struct FaceRegion {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
};

struct Segment {
    double start_ms = 0.0;
    double end_ms = 0.0;
    std::string label;
    FaceRegion region;
};

// A scripted stream: behavioral segments on a timeline, rendered as marker
// rectangles over seeded background noise.
struct ScenarioScript {
    double fps = 25.0;
    Resolution resolution{640, 480};
    std::uint64_t noise_seed = 0;
    std::vector<Segment> timeline;

    double duration_ms() const { return timeline.empty() ? 0.0 : timeline.back().end_ms; }
    std::int64_t frame_count() const;
    // Active segment at time t, or nullptr (gap / past the end).
    const Segment* segment_at(double t_ms) const;
};

// Marker intensity band for a behavioral label. Bands sit far above the
// background noise ceiling so detection can be exact.
std::uint8_t label_band(const std::string& label);
constexpr std::uint8_t kNoiseCeiling = 160;
constexpr std::uint8_t kMarkerThreshold = 180;

// Parses and validates a scenario JSON file.
// Throws Error(parse_error) on malformed input, Error(validation_error) when
// invariants fail (overlapping segments, out-of-bounds region, bad fps...).
ScenarioScript load_scenario(const std::string& path);
ScenarioScript scenario_from_json_text(const std::string& text);

// Deterministic frame synthesis: pure function of (script, index).
// Background is seeded noise plus a small per-frame flicker; the active
// segment's region is filled with its label band. Past the timeline the
// frame is background-only with ground_truth "absent". Emitted as BGR.
Frame synth_next_frame(const ScenarioScript& script, std::int64_t index);

// Binary PPM (P6, maxval 255) read/write. The only raster format supported.
Frame read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Frame& frame);

// Single-consumer frame iterator. next() returns nullopt at end of stream.
class FrameSource {
public:
    virtual ~FrameSource() = default;
    virtual std::optional<Frame> next() = 0;
};

class ScenarioSource : public FrameSource {
public:
    explicit ScenarioSource(ScenarioScript script);
    std::optional<Frame> next() override;
    const ScenarioScript& script() const { return script_; }

private:
    ScenarioScript script_;
    std::int64_t next_index_ = 0;
    std::int64_t total_ = 0;
};

// Lexicographically ordered .ppm files replayed at a fixed rate with
// synthesized timestamps. Throws Error(empty_directory) / Error(unsupported_format).
class ImageSequenceSource : public FrameSource {
public:
    ImageSequenceSource(const std::string& dir, double fps);
    std::optional<Frame> next() override;
    std::size_t file_count() const { return files_.size(); }

private:
    std::vector<std::string> files_;
    double fps_;
    std::int64_t next_index_ = 0;
};

enum class PaceMode { realtime, fast };

// realtime: delivery is delayed so consecutive frames are >= 1000/fps ms of
// wall time apart. fast: immediate delivery, logical timestamps untouched.
class PacedSource : public FrameSource {
public:
    PacedSource(std::unique_ptr<FrameSource> inner, double fps, PaceMode mode);
    std::optional<Frame> next() override;

private:
    std::unique_ptr<FrameSource> inner_;
    double interval_ms_;
    PaceMode mode_;
    double last_emit_ms_ = -1.0;
};

} // namespace cribwatch::frames
