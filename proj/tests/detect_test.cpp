#include <doctest.h>

#include <algorithm>

#include "cribwatch/detect.hpp"
#include "test_support.hpp"

using namespace cribwatch;
using namespace cribwatch::detect;

namespace {

frames::Frame solid_frame(int w, int h, std::uint8_t value,
                          frames::ChannelOrder order = frames::ChannelOrder::rgb) {
    frames::Frame f;
    f.resolution = {w, h};
    f.channels = order;
    f.pixels.assign(static_cast<std::size_t>(w) * h * 3, value);
    return f;
}

// Brute-force oracle: tight bounds of pixels whose darkest channel clears
// the marker threshold.
struct ScanResult {
    bool found = false;
    int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
};

ScanResult pixel_scan(const frames::Frame& f) {
    ScanResult r;
    for (int y = 0; y < f.resolution.height; ++y) {
        for (int x = 0; x < f.resolution.width; ++x) {
            const auto* p = f.at(x, y);
            if (std::min({p[0], p[1], p[2]}) >= frames::kMarkerThreshold) {
                if (!r.found) {
                    r = {true, x, y, x, y};
                } else {
                    r.min_x = std::min(r.min_x, x);
                    r.min_y = std::min(r.min_y, y);
                    r.max_x = std::max(r.max_x, x);
                    r.max_y = std::max(r.max_y, y);
                }
            }
        }
    }
    return r;
}

// Reference corner-aligned bilinear sample of a crop, channel c, at
// destination pixel (dx, dy).
double bilinear_ref(const frames::Frame& f, const BoundingBox& box, int dx, int dy, int c,
                    int dst = kRoiSize) {
    double sx = box.w > 1 ? static_cast<double>(box.w - 1) / (dst - 1) : 0.0;
    double sy = box.h > 1 ? static_cast<double>(box.h - 1) / (dst - 1) : 0.0;
    double fx = dx * sx, fy = dy * sy;
    int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    int x1 = std::min(x0 + 1, box.w - 1), y1 = std::min(y0 + 1, box.h - 1);
    double wx = fx - x0, wy = fy - y0;
    auto px = [&](int xx, int yy) { return static_cast<double>(f.at(box.x + xx, box.y + yy)[c]); };
    double top = px(x0, y0) * (1 - wx) + px(x1, y0) * wx;
    double bot = px(x0, y1) * (1 - wx) + px(x1, y1) * wx;
    return (top * (1 - wy) + bot * wy) / 255.0;
}

} // namespace

TEST_CASE("to_rgb swaps channels of a BGR frame") {
    auto f = solid_frame(16, 16, 0, frames::ChannelOrder::bgr);
    f.at(3, 2)[0] = 10;
    f.at(3, 2)[1] = 20;
    f.at(3, 2)[2] = 30;
    auto rgb = to_rgb(f);
    CHECK(rgb.channels == frames::ChannelOrder::rgb);
    CHECK(rgb.at(3, 2)[0] == 30);
    CHECK(rgb.at(3, 2)[1] == 20);
    CHECK(rgb.at(3, 2)[2] == 10);
}

TEST_CASE("to_rgb is the identity on RGB input and idempotent") {
    auto s = testsup::static_scenario("crying", 1000.0, 25.0, 64, 48);
    auto bgr = frames::synth_next_frame(s, 0);
    auto once = to_rgb(bgr);
    auto tagged = once;
    auto twice = to_rgb(once);
    CHECK(twice.pixels == tagged.pixels); // already RGB: byte-identical

    auto direct = to_rgb(bgr);
    CHECK(direct.pixels == twice.pixels);
}

TEST_CASE("marker detector finds the scripted region exactly") {
    frames::ScenarioScript s;
    s.fps = 25.0;
    s.resolution = {640, 480};
    s.noise_seed = 11;
    s.timeline = {{0.0, 1000.0, "sleep", {100, 80, 120, 120}}};
    auto frame = to_rgb(frames::synth_next_frame(s, 0));

    MarkerDetector det;
    auto boxes = detect_faces(det, frame, 0.5);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].x == 100);
    CHECK(boxes[0].y == 80);
    CHECK(boxes[0].w == 120);
    CHECK(boxes[0].h == 120);
    CHECK(boxes[0].confidence >= 0.9);
    CHECK(boxes[0].confidence <= 1.0);

    // Cross-check against the brute-force pixel scan.
    auto scan = pixel_scan(frame);
    REQUIRE(scan.found);
    CHECK(scan.min_x == boxes[0].x);
    CHECK(scan.min_y == boxes[0].y);
    CHECK(scan.max_x - scan.min_x + 1 == boxes[0].w);
    CHECK(scan.max_y - scan.min_y + 1 == boxes[0].h);
}

TEST_CASE("detector returns nothing for background frames or impossible thresholds") {
    auto s = testsup::static_scenario("sleep", 1000.0, 25.0, 64, 48);
    auto background = to_rgb(frames::synth_next_frame(s, 100000)); // past the timeline
    MarkerDetector det;
    CHECK(detect_faces(det, background, 0.5).empty());

    auto marked = to_rgb(frames::synth_next_frame(s, 0));
    CHECK(detect_faces(det, marked, 1.1).empty()); // confidence can never reach 1.1
    CHECK(detect_faces(det, marked, 0.5).size() == 1);
}

TEST_CASE("detected boxes always sit inside the frame") {
    SplitMix64 rng(2024);
    MarkerDetector det;
    for (int trial = 0; trial < 50; ++trial) {
        int w = 64 + static_cast<int>(rng.next() % 300);
        int h = 64 + static_cast<int>(rng.next() % 300);
        frames::ScenarioScript s;
        s.fps = 25.0;
        s.resolution = {w, h};
        s.noise_seed = rng.next();
        int rw = 8 + static_cast<int>(rng.next() % (static_cast<unsigned>(w) / 2));
        int rh = 8 + static_cast<int>(rng.next() % (static_cast<unsigned>(h) / 2));
        int rx = static_cast<int>(rng.next() % static_cast<unsigned>(w - rw));
        int ry = static_cast<int>(rng.next() % static_cast<unsigned>(h - rh));
        s.timeline = {{0.0, 1000.0, "awake", {rx, ry, rw, rh}}};
        auto frame = to_rgb(frames::synth_next_frame(s, 0));
        for (const auto& box : det.detect(frame, 0.0)) {
            CHECK(box.inside(frame.resolution));
            CHECK(box.x == rx);
            CHECK(box.y == ry);
        }
    }
}

TEST_CASE("extract_roi normalization endpoints") {
    auto white = solid_frame(300, 300, 255);
    auto t = extract_roi(white, {10, 10, 256, 256, 1.0});
    CHECK(t.data.size() == std::size_t(256) * 256 * 3);
    CHECK(*std::min_element(t.data.begin(), t.data.end()) == 1.0f);

    auto black = solid_frame(300, 300, 0);
    auto t0 = extract_roi(black, {10, 10, 256, 256, 1.0});
    CHECK(*std::max_element(t0.data.begin(), t0.data.end()) == 0.0f);
}

TEST_CASE("extract_roi bilinear matches the reference at grid points") {
    // 2x2 checkerboard crop inside a 32x32 frame, upscaled to 256x256.
    auto f = solid_frame(32, 32, 7);
    f.at(5, 5)[0] = f.at(5, 5)[1] = f.at(5, 5)[2] = 0;
    f.at(6, 5)[0] = f.at(6, 5)[1] = f.at(6, 5)[2] = 255;
    f.at(5, 6)[0] = f.at(5, 6)[1] = f.at(5, 6)[2] = 255;
    f.at(6, 6)[0] = f.at(6, 6)[1] = f.at(6, 6)[2] = 0;
    BoundingBox box{5, 5, 2, 2, 1.0};
    auto t = extract_roi(f, box);

    // Corners land exactly on the source corners.
    CHECK(t.at(0, 0, 0) == 0.0f);
    CHECK(t.at(255, 0, 0) == 1.0f);
    CHECK(t.at(0, 255, 0) == 1.0f);
    CHECK(t.at(255, 255, 0) == 0.0f);

    // Interior is strictly between the extremes and matches the oracle.
    SplitMix64 rng(5);
    for (int i = 0; i < 200; ++i) {
        int dx = 1 + static_cast<int>(rng.next() % 254);
        int dy = 1 + static_cast<int>(rng.next() % 254);
        double expected = bilinear_ref(f, box, dx, dy, 0);
        CHECK(t.at(dx, dy, 0) == doctest::Approx(expected).epsilon(1e-6));
        CHECK(t.at(dx, dy, 0) > 0.0f);
        CHECK(t.at(dx, dy, 0) < 1.0f);
    }
}

TEST_CASE("extract_roi output stays in range on random crops") {
    auto s = testsup::static_scenario("normal", 1000.0, 25.0, 320, 240);
    auto frame = to_rgb(frames::synth_next_frame(s, 0));
    SplitMix64 rng(77);
    for (int i = 0; i < 25; ++i) {
        int w = 1 + static_cast<int>(rng.next() % 200);
        int h = 1 + static_cast<int>(rng.next() % 150);
        int x = static_cast<int>(rng.next() % static_cast<unsigned>(320 - w + 1));
        int y = static_cast<int>(rng.next() % static_cast<unsigned>(240 - h + 1));
        auto t = extract_roi(frame, {x, y, w, h, 1.0});
        auto [mn, mx] = std::minmax_element(t.data.begin(), t.data.end());
        CHECK(*mn >= 0.0f);
        CHECK(*mx <= 1.0f);
        // Random grid points agree with the reference resampler.
        for (int k = 0; k < 8; ++k) {
            int dx = static_cast<int>(rng.next() % 256);
            int dy = static_cast<int>(rng.next() % 256);
            int c = static_cast<int>(rng.next() % 3);
            CHECK(t.at(dx, dy, c) ==
                  doctest::Approx(bilinear_ref(frame, {x, y, w, h, 1.0}, dx, dy, c)).epsilon(1e-6));
        }
    }
}

TEST_CASE("extract_roi rejects out-of-bounds boxes") {
    auto f = solid_frame(64, 64, 10);
    try {
        extract_roi(f, {60, 60, 10, 10, 1.0});
        FAIL("expected box_out_of_bounds");
    } catch (const Error& e) {
        CHECK(e.code() == errc::box_out_of_bounds);
    }
    CHECK_THROWS_AS(extract_roi(f, {0, 0, 0, 5, 1.0}), Error);
}

TEST_CASE("motion gate thresholds on mean absolute per-byte difference") {
    auto a = solid_frame(64, 64, 0);
    CHECK_FALSE(motion_gate(a, a, 0.0)); // identical: difference not strictly greater

    auto b = solid_frame(64, 64, 255);
    CHECK(mean_abs_diff(a, b) == 255.0);
    CHECK(motion_gate(a, b, 100.0));

    auto s = testsup::static_scenario("sleep", 10000.0);
    auto f1 = frames::synth_next_frame(s, 100);
    auto f2 = frames::synth_next_frame(s, 101);
    // Oracle recomputation of the MAD, then the gate decision from it.
    double sum = 0.0;
    for (std::size_t i = 0; i < f1.pixels.size(); ++i) {
        sum += std::abs(static_cast<int>(f1.pixels[i]) - static_cast<int>(f2.pixels[i]));
    }
    double mad = sum / static_cast<double>(f1.pixels.size());
    CHECK(mean_abs_diff(f1, f2) == doctest::Approx(mad).epsilon(1e-12));
    CHECK(motion_gate(f1, f2, 5.0) == (mad > 5.0));
    CHECK_FALSE(motion_gate(f1, f2, 5.0)); // static segment stays quiet

    auto small = solid_frame(16, 16, 0);
    CHECK_THROWS_AS(motion_gate(a, small, 1.0), Error);
}

TEST_CASE("detector cost scales roughly with pixel count") {
    frames::ScenarioScript hi = testsup::static_scenario("sleep", 1000.0, 25.0, 1280, 720);
    frames::ScenarioScript lo = testsup::static_scenario("sleep", 1000.0, 25.0, 640, 360);
    auto frame_hi = to_rgb(frames::synth_next_frame(hi, 0));
    auto frame_lo = to_rgb(frames::synth_next_frame(lo, 0));
    MarkerDetector det;

    auto median_time = [&det](const frames::Frame& f) {
        std::vector<double> times;
        for (int i = 0; i < 7; ++i) {
            double t0 = mono_ms();
            det.detect(f, 0.5);
            times.push_back(mono_ms() - t0);
        }
        std::sort(times.begin(), times.end());
        return times[times.size() / 2];
    };

    median_time(frame_hi); // warm caches
    double t_hi = median_time(frame_hi);
    double t_lo = median_time(frame_lo);
    double ratio = t_hi / t_lo;
    // 921600 px vs 230400 px is exactly 4x the work; +-50% for host noise.
    CHECK(ratio > 2.0);
    CHECK(ratio < 6.0);
}
