#pragma once

/// \file types.hpp
/// \brief Domain value types shared by every stage: poses, heatmaps, images, masks.

#include <cmath>
#include <string>
#include <vector>

#include "tgps/errors.hpp"
#include "tgps/tensor.hpp"

namespace tgps {

/// Default joint count (COCO 18-keypoint layout).
inline constexpr int kDefaultJoints = 18;
inline constexpr int kDefaultHeight = 128;
inline constexpr int kDefaultWidth = 64;

struct Frame {
    int height = kDefaultHeight;
    int width = kDefaultWidth;
    friend bool operator==(const Frame&, const Frame&) = default;
};

struct Joint {
    double x = 0.0;
    double y = 0.0;
    bool visible = false;
    friend bool operator==(const Joint&, const Joint&) = default;
};

/// Ordered joint list inside a pixel frame. Every visible joint lies in [0,W) x [0,H).
class Pose {
public:
    Pose() = default;
    Pose(Frame frame, std::vector<Joint> joints) : frame_(frame), joints_(std::move(joints)) { validate(); }

    const Frame& frame() const { return frame_; }
    const std::vector<Joint>& joints() const { return joints_; }
    const Joint& operator[](std::size_t i) const { return joints_[i]; }
    int size() const { return static_cast<int>(joints_.size()); }

    int visible_count() const {
        int n = 0;
        for (const auto& j : joints_) n += j.visible ? 1 : 0;
        return n;
    }

    friend bool operator==(const Pose&, const Pose&) = default;

private:
    void validate() const {
        if (frame_.height <= 0 || frame_.width <= 0) throw ValidationError("frame", "pose frame must be positive");
        for (std::size_t i = 0; i < joints_.size(); ++i) {
            const Joint& j = joints_[i];
            if (!j.visible) continue;
            if (!std::isfinite(j.x) || !std::isfinite(j.y) || j.x < 0 || j.y < 0 || j.x >= frame_.width ||
                j.y >= frame_.height)
                throw ValidationError("pose", "visible joint " + std::to_string(i) + " lies outside the " +
                                                  std::to_string(frame_.height) + "x" + std::to_string(frame_.width) +
                                                  " frame");
        }
    }

    Frame frame_;
    std::vector<Joint> joints_;
};

/// Per-joint activation maps, shape [J,H,W], values in [0,1].
struct Heatmap {
    Tensor data;

    Heatmap() = default;
    explicit Heatmap(Tensor t) : data(std::move(t)) {
        if (data.rank() != 3) throw ShapeError("heatmap must be [J,H,W], got " + shape_str(data.shape));
    }
    int joints() const { return data.dim(0); }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
    Frame frame() const { return {height(), width()}; }
};

/// RGB image, shape [3,H,W], values in [-1,1].
struct ImageTensor {
    Tensor data;

    ImageTensor() = default;
    explicit ImageTensor(Tensor t) : data(std::move(t)) {
        if (data.rank() != 3 || data.dim(0) != 3) throw ShapeError("image must be [3,H,W], got " + shape_str(data.shape));
    }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
    Frame frame() const { return {height(), width()}; }
};

/// Binary mask, shape [1,H,W], values in {0,1}.
struct Mask {
    Tensor data;

    Mask() = default;
    explicit Mask(Tensor t) : data(std::move(t)) {
        if (data.rank() != 3 || data.dim(0) != 1) throw ShapeError("mask must be [1,H,W], got " + shape_str(data.shape));
    }
    int height() const { return data.dim(1); }
    int width() const { return data.dim(2); }
    bool contains(int y, int x) const { return data.at(0, y, x) > 0.5; }
    std::size_t count() const {
        std::size_t n = 0;
        for (double v : data.data) n += v > 0.5 ? 1 : 0;
        return n;
    }
};

/// Normalised pose vector (x1, y1, x2, y2, ...) with coordinates divided by the frame size.
/// Invisible joints take the centroid of the visible ones.
inline std::vector<double> normalize_pose(const Pose& p) {
    const int n = p.size();
    double cx = 0, cy = 0;
    int vis = 0;
    for (const auto& j : p.joints())
        if (j.visible) {
            cx += j.x;
            cy += j.y;
            ++vis;
        }
    if (vis == 0) throw DegeneratePoseError("pose has no visible joints");
    cx /= vis;
    cy /= vis;
    const double W = p.frame().width, H = p.frame().height;
    std::vector<double> out(2 * static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Joint& j = p[i];
        out[2 * i] = (j.visible ? j.x : cx) / W;
        out[2 * i + 1] = (j.visible ? j.y : cy) / H;
    }
    return out;
}

/// Inverse of normalize_pose for a fully visible vector.
inline Pose denormalize_pose(const std::vector<double>& v, Frame frame) {
    std::vector<Joint> joints(v.size() / 2);
    for (std::size_t i = 0; i < joints.size(); ++i) {
        double x = v[2 * i] * frame.width, y = v[2 * i + 1] * frame.height;
        // Clamp rounding spill at the open upper edge.
        x = std::min(std::max(x, 0.0), std::nextafter(static_cast<double>(frame.width), 0.0));
        y = std::min(std::max(y, 0.0), std::nextafter(static_cast<double>(frame.height), 0.0));
        joints[i] = {x, y, true};
    }
    return Pose(frame, std::move(joints));
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

}  // namespace tgps
