#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cribwatch/frames.hpp"

namespace cribwatch::detect {

struct BoundingBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
    double confidence = 0.0;

    bool inside(const frames::Resolution& r) const {
        return w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= r.width && y + h <= r.height;
    }
};

// Intersection-over-union, used for face-track matching.
double iou(const BoundingBox& a, const BoundingBox& b);

constexpr int kRoiSize = 256;

// Classifier input: cropped face, resized to 256x256, channels scaled to
// [0,1]. Carries provenance (source box, frame index, the frame's ground
// truth if any) so stand-in backends can be exact.
struct RoiTensor {
    std::vector<float> data; // kRoiSize * kRoiSize * 3, row-major, RGB
    BoundingBox source_box;
    std::int64_t frame_index = 0;
    std::optional<std::string> ground_truth;

    float at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * kRoiSize + x) * 3 + static_cast<std::size_t>(c)];
    }
};

// Returns an RGB-tagged frame. BGR input gets channels 0 and 2 swapped;
// RGB input is passed through untouched (idempotent).
frames::Frame to_rgb(frames::Frame frame);

// Locates face ROIs in an RGB frame. Pluggable so a real landmark detector
// can replace the bundled synthetic one later.
class Detector {
public:
    virtual ~Detector() = default;
    // Boxes sorted by descending confidence, each with confidence >= min_confidence.
    virtual std::vector<BoundingBox> detect(const frames::Frame& frame, double min_confidence) = 0;
};

// Bundled detector for the synthetic marker frames: one threshold scan for
// pixels above the marker band floor, confidence from contrast against the
// background mean.
class MarkerDetector : public Detector {
public:
    std::vector<BoundingBox> detect(const frames::Frame& frame, double min_confidence) override;
};

std::vector<BoundingBox> detect_faces(Detector& detector, const frames::Frame& frame,
                                      double min_confidence = 0.5);

// Crop + bilinear resize (corner-aligned) + byte/255 normalization.
// Throws Error(box_out_of_bounds) when the box leaves the frame.
RoiTensor extract_roi(const frames::Frame& frame, const BoundingBox& box);

// True iff the mean absolute per-byte difference exceeds `threshold`.
// Single O(HW) pass; throws Error(resolution_mismatch).
bool motion_gate(const frames::Frame& prev, const frames::Frame& curr, double threshold);

// The raw MAD value behind motion_gate, exposed for diagnostics and tests.
double mean_abs_diff(const frames::Frame& prev, const frames::Frame& curr);

} // namespace cribwatch::detect
