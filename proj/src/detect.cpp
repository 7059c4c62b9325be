#include "cribwatch/detect.hpp"

#include <algorithm>
#include <cmath>

namespace cribwatch::detect {

double iou(const BoundingBox& a, const BoundingBox& b) {
    int x0 = std::max(a.x, b.x);
    int y0 = std::max(a.y, b.y);
    int x1 = std::min(a.x + a.w, b.x + b.w);
    int y1 = std::min(a.y + a.h, b.y + b.h);
    if (x1 <= x0 || y1 <= y0) return 0.0;
    double inter = static_cast<double>(x1 - x0) * (y1 - y0);
    double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
    return inter / uni;
}

frames::Frame to_rgb(frames::Frame frame) {
    if (frame.channels == frames::ChannelOrder::rgb) return frame;
    for (std::size_t i = 0; i + 2 < frame.pixels.size(); i += 3) {
        std::swap(frame.pixels[i], frame.pixels[i + 2]);
    }
    frame.channels = frames::ChannelOrder::rgb;
    return frame;
}

std::vector<BoundingBox> MarkerDetector::detect(const frames::Frame& frame, double min_confidence) {
    if (frame.channels != frames::ChannelOrder::rgb) {
        throw Error(errc::validation_error, "detector expects an RGB-tagged frame");
    }

    const int w = frame.resolution.width;
    const int h = frame.resolution.height;
    int min_x = w, min_y = h, max_x = -1, max_y = -1;
    double marker_sum = 0.0, bg_sum = 0.0;
    std::int64_t marker_n = 0, bg_n = 0;

    const std::uint8_t* p = frame.pixels.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x, p += 3) {
            std::uint8_t lo = std::min(p[0], std::min(p[1], p[2]));
            double v = (static_cast<double>(p[0]) + p[1] + p[2]) / 3.0;
            if (lo >= frames::kMarkerThreshold) {
                marker_sum += v;
                ++marker_n;
                min_x = std::min(min_x, x);
                min_y = std::min(min_y, y);
                max_x = std::max(max_x, x);
                max_y = std::max(max_y, y);
            } else {
                bg_sum += v;
                ++bg_n;
            }
        }
    }

    if (marker_n == 0) return {};

    double marker_mean = marker_sum / static_cast<double>(marker_n);
    double bg_mean = bg_n > 0 ? bg_sum / static_cast<double>(bg_n) : 0.0;
    double confidence = std::clamp((marker_mean - bg_mean) / 64.0, 0.0, 1.0);

    BoundingBox box{min_x, min_y, max_x - min_x + 1, max_y - min_y + 1, confidence};
    if (confidence < min_confidence) return {};
    return {box};
}

std::vector<BoundingBox> detect_faces(Detector& detector, const frames::Frame& frame,
                                      double min_confidence) {
    auto boxes = detector.detect(frame, min_confidence);
    std::sort(boxes.begin(), boxes.end(),
              [](const BoundingBox& a, const BoundingBox& b) { return a.confidence > b.confidence; });
    return boxes;
}

RoiTensor extract_roi(const frames::Frame& frame, const BoundingBox& box) {
    if (!box.inside(frame.resolution)) {
        throw Error(errc::box_out_of_bounds, "roi box leaves the frame bounds");
    }

    RoiTensor t;
    t.data.resize(static_cast<std::size_t>(kRoiSize) * kRoiSize * 3);
    t.source_box = box;
    t.frame_index = frame.index;
    t.ground_truth = frame.ground_truth;

    // Corner-aligned bilinear sampling: destination corners map exactly onto
    // source corners, so grid points are reproducible by hand.
    const double sx = box.w > 1 ? static_cast<double>(box.w - 1) / (kRoiSize - 1) : 0.0;
    const double sy = box.h > 1 ? static_cast<double>(box.h - 1) / (kRoiSize - 1) : 0.0;

    float* out = t.data.data();
    for (int dy = 0; dy < kRoiSize; ++dy) {
        double fy = dy * sy;
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, box.h - 1);
        double wy = fy - y0;
        for (int dx = 0; dx < kRoiSize; ++dx) {
            double fx = dx * sx;
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, box.w - 1);
            double wx = fx - x0;

            const std::uint8_t* p00 = frame.at(box.x + x0, box.y + y0);
            const std::uint8_t* p10 = frame.at(box.x + x1, box.y + y0);
            const std::uint8_t* p01 = frame.at(box.x + x0, box.y + y1);
            const std::uint8_t* p11 = frame.at(box.x + x1, box.y + y1);
            for (int c = 0; c < 3; ++c) {
                double top = p00[c] + (p10[c] - p00[c]) * wx;
                double bot = p01[c] + (p11[c] - p01[c]) * wx;
                *out++ = static_cast<float>((top + (bot - top) * wy) / 255.0);
            }
        }
    }
    return t;
}

double mean_abs_diff(const frames::Frame& prev, const frames::Frame& curr) {
    if (prev.resolution != curr.resolution) {
        throw Error(errc::resolution_mismatch, "motion gate frames differ in resolution");
    }
    std::uint64_t sum = 0;
    const std::size_t n = curr.pixels.size();
    for (std::size_t i = 0; i < n; ++i) {
        sum += static_cast<std::uint64_t>(
            std::abs(static_cast<int>(prev.pixels[i]) - static_cast<int>(curr.pixels[i])));
    }
    return n > 0 ? static_cast<double>(sum) / static_cast<double>(n) : 0.0;
}

bool motion_gate(const frames::Frame& prev, const frames::Frame& curr, double threshold) {
    return mean_abs_diff(prev, curr) > threshold;
}

} // namespace cribwatch::detect
