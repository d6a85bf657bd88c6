#pragma once

/// \file pose_prior.hpp
/// \brief Basic-pose clustering, heatmap/mask rendering, orientation labels, and
/// the BasicPoseSet JSON document.

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tgps/kmeans.hpp"
#include "tgps/log.hpp"
#include "tgps/types.hpp"

namespace tgps {

/// COCO-18 joint indices.
namespace coco {
enum : int {
    kNose = 0, kNeck, kRShoulder, kRElbow, kRWrist, kLShoulder, kLElbow, kLWrist,
    kRHip, kRKnee, kRAnkle, kLHip, kLKnee, kLAnkle, kREye, kLEye, kREar, kLEar
};

inline constexpr std::array<std::pair<int, int>, 18> kSkeleton{{
    {kNeck, kRShoulder}, {kNeck, kLShoulder}, {kRShoulder, kRElbow}, {kRElbow, kRWrist},
    {kLShoulder, kLElbow}, {kLElbow, kLWrist}, {kNeck, kRHip}, {kRHip, kRKnee},
    {kRKnee, kRAnkle}, {kNeck, kLHip}, {kLHip, kLKnee}, {kLKnee, kLAnkle},
    {kNeck, kNose}, {kNose, kREye}, {kREye, kREar}, {kNose, kLEye}, {kLEye, kLEar},
    {kRHip, kLHip},
}};
}  // namespace coco

using Edge = std::pair<int, int>;

inline std::vector<Edge> default_skeleton(int joints) {
    std::vector<Edge> out;
    for (const auto& e : coco::kSkeleton)
        if (e.first < joints && e.second < joints) out.push_back(e);
    return out;
}

// ---------------------------------------------------------------- rendering

/// Binary disks: channel j is 1 where the pixel centre is within r of joint j.
inline Heatmap render_heatmap(const Pose& p, double radius) {
    const int H = p.frame().height, W = p.frame().width;
    Tensor t({p.size(), H, W});
    const double r2 = radius * radius;
    for (int j = 0; j < p.size(); ++j) {
        const Joint& jt = p[j];
        if (!jt.visible) continue;
        const int y0 = std::max(0, static_cast<int>(std::floor(jt.y - radius)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(jt.y + radius)));
        const int x0 = std::max(0, static_cast<int>(std::floor(jt.x - radius)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(jt.x + radius)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = x - jt.x, dy = y - jt.y;
                if (dx * dx + dy * dy <= r2) t.at(j, y, x) = 1.0;
            }
    }
    return Heatmap(std::move(t));
}

inline double point_segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

/// Union of radius-`dilation` disks around the selected visible joints and around
/// every skeleton segment whose two endpoints are both selected and visible.
/// An empty `subset` selects all joints.
inline Mask pose_mask(const Pose& p, double dilation, std::span<const int> subset = {},
                      const std::vector<Edge>* edges = nullptr) {
    const int H = p.frame().height, W = p.frame().width;
    std::vector<bool> selected(p.size(), subset.empty());
    for (int j : subset)
        if (j >= 0 && j < p.size()) selected[j] = true;
    auto usable = [&](int j) { return j < p.size() && selected[j] && p[j].visible; };

    std::vector<std::array<double, 4>> segments;
    for (int j = 0; j < p.size(); ++j)
        if (usable(j)) segments.push_back({p[j].x, p[j].y, p[j].x, p[j].y});
    if (segments.empty()) {
        log_event("warn", "pose_mask", {{"reason", "no visible joints; using full-frame mask"}});
        return Mask(Tensor({1, H, W}, 1.0));
    }
    const std::vector<Edge> skel = edges ? *edges : default_skeleton(p.size());
    for (const auto& [a, b] : skel)
        if (usable(a) && usable(b)) segments.push_back({p[a].x, p[a].y, p[b].x, p[b].y});

    Tensor t({1, H, W});
    for (const auto& s : segments) {
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s[1], s[3]) - dilation)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(s[1], s[3]) + dilation)));
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s[0], s[2]) - dilation)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(s[0], s[2]) + dilation)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (point_segment_distance(x, y, s[0], s[1], s[2], s[3]) <= dilation) t.at(0, y, x) = 1.0;
    }
    return Mask(std::move(t));
}

/// Per channel: activation-weighted centroid of pixels >= 0.5; none above threshold -> invisible.
inline Pose heatmap_to_keypoints(const Heatmap& h) {
    std::vector<Joint> joints(h.joints());
    for (int j = 0; j < h.joints(); ++j) {
        double sw = 0, sx = 0, sy = 0;
        for (int y = 0; y < h.height(); ++y)
            for (int x = 0; x < h.width(); ++x) {
                const double v = h.data.at(j, y, x);
                if (v >= 0.5) {
                    sw += v;
                    sx += v * x;
                    sy += v * y;
                }
            }
        if (sw > 0) joints[j] = {sx / sw, sy / sw, true};
    }
    return Pose(h.frame(), std::move(joints));
}

// ---------------------------------------------------------------- basic poses

struct BasicPoseSet {
    std::vector<Pose> poses;
    /// Training-sample id -> cluster index. Not part of the serialized document.
    std::map<std::string, int> assignments;

    int K() const { return static_cast<int>(poses.size()); }
    int J() const { return poses.empty() ? 0 : poses.front().size(); }
    Frame frame() const { return poses.empty() ? Frame{} : poses.front().frame(); }
};

struct ClusterOutcome {
    BasicPoseSet basics;
    KMeansResult kmeans;
};

/// K-means over normalize_pose vectors. `ids` (optional, parallel to `poses`) keys the assignment map.
inline ClusterOutcome cluster_basic_poses(const std::vector<Pose>& poses, int K, std::uint64_t seed,
                                          const std::vector<std::string>& ids = {}, const KMeansOptions& opt = {}) {
    if (K < 1) throw ClusteringError("K must be at least 1");
    if (static_cast<int>(poses.size()) < K)
        throw ClusteringError("need at least K=" + std::to_string(K) + " poses, got " + std::to_string(poses.size()));
    std::vector<std::vector<double>> pts;
    pts.reserve(poses.size());
    for (const auto& p : poses) pts.push_back(normalize_pose(p));
    ClusterOutcome out;
    out.kmeans = kmeans(pts, K, seed, opt);
    const Frame frame = poses.front().frame();
    for (const auto& c : out.kmeans.centers) out.basics.poses.push_back(denormalize_pose(c, frame));
    for (std::size_t i = 0; i < poses.size(); ++i) {
        const std::string id = i < ids.size() ? ids[i] : std::to_string(i);
        out.basics.assignments[id] = out.kmeans.assignment[i];
    }
    return out;
}

/// Index (0-based) of the nearest basic pose in normalized coordinates; ties -> lowest index.
inline int orientation_label(const Pose& p, const BasicPoseSet& basics) {
    if (basics.poses.empty()) throw ClusteringError("empty basic pose set");
    const std::vector<double> v = normalize_pose(p);
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int k = 0; k < basics.K(); ++k) {
        const std::vector<double> c = normalize_pose(basics.poses[k]);
        if (c.size() != v.size()) throw ShapeError("joint count differs from basic poses");
        const double d = squared_distance(v, c);
        if (d < bd) {
            bd = d;
            best = k;
        }
    }
    return best;
}

/// Facing direction of a COCO-18 pose relative to a reference scale, in [0, 2pi):
/// 0 faces the camera, pi/2 faces image-right, pi faces away.
inline double facing_angle(const Pose& p, double shoulder_scale, double nose_scale) {
    const double dx = (p[coco::kLShoulder].x - p[coco::kRShoulder].x) / shoulder_scale;
    const double dn = (p[coco::kNose].x - p[coco::kNeck].x) / nose_scale;
    double a = std::atan2(dn, dx);
    if (a < 0) a += 2 * std::numbers::pi;
    return a;
}

/// Reorders a COCO-18 basic pose set by facing direction so index 0 is the most
/// frontal pose and indices advance toward image-right. The assignment map is
/// remapped to the new indices. Sets with other joint layouts are left unchanged.
inline void sort_by_facing(BasicPoseSet& basics) {
    if (basics.J() != kDefaultJoints || basics.K() < 2) return;
    double ss = 0, ns = 0;
    for (const auto& p : basics.poses) {
        ss = std::max(ss, std::fabs(p[coco::kLShoulder].x - p[coco::kRShoulder].x));
        ns = std::max(ns, std::fabs(p[coco::kNose].x - p[coco::kNeck].x));
    }
    if (ss <= 0 || ns <= 0) return;
    const double half_bin = std::numbers::pi / basics.K();
    std::vector<std::pair<double, int>> keyed;
    for (int k = 0; k < basics.K(); ++k) {
        const double a = std::fmod(facing_angle(basics.poses[k], ss, ns) + half_bin, 2 * std::numbers::pi);
        keyed.emplace_back(a, k);
    }
    std::stable_sort(keyed.begin(), keyed.end());
    std::vector<int> new_index(basics.K());
    std::vector<Pose> sorted;
    for (int i = 0; i < basics.K(); ++i) {
        sorted.push_back(basics.poses[keyed[i].second]);
        new_index[keyed[i].second] = i;
    }
    basics.poses = std::move(sorted);
    for (auto& [id, k] : basics.assignments) k = new_index[k];
}

// ---------------------------------------------------------------- serialization

inline nlohmann::json pose_to_json(const Pose& p) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& j : p.joints()) arr.push_back({j.x, j.y, j.visible ? 1 : 0});
    return arr;
}

inline Pose pose_from_json(const nlohmann::json& arr, Frame frame, int expected_joints, const std::string& field = "pose") {
    if (!arr.is_array()) throw ValidationError(field, field + " must be an array of [x, y, visible]");
    if (expected_joints > 0 && static_cast<int>(arr.size()) != expected_joints)
        throw ValidationError(field, field + " has " + std::to_string(arr.size()) + " joints, expected " +
                                         std::to_string(expected_joints));
    std::vector<Joint> joints;
    for (const auto& j : arr) {
        if (!j.is_array() || j.size() != 3 || !j[0].is_number() || !j[1].is_number() ||
            !(j[2].is_number() || j[2].is_boolean()))
            throw ValidationError(field, field + " entries must be [x, y, visible]");
        const bool vis = j[2].is_boolean() ? j[2].get<bool>() : j[2].get<double>() != 0.0;
        joints.push_back({j[0].get<double>(), j[1].get<double>(), vis});
    }
    return Pose(frame, std::move(joints));
}

inline nlohmann::json basic_poses_to_json(const BasicPoseSet& b) {
    nlohmann::json poses = nlohmann::json::array();
    for (const auto& p : b.poses) poses.push_back(pose_to_json(p));
    return {{"version", 1}, {"K", b.K()}, {"J", b.J()}, {"frame", {b.frame().height, b.frame().width}}, {"poses", poses}};
}

inline BasicPoseSet basic_poses_from_json(const nlohmann::json& doc) {
    try {
        if (doc.at("version").get<int>() != 1) throw FormatError("unsupported basic-pose version");
        const int K = doc.at("K").get<int>();
        const int J = doc.at("J").get<int>();
        const Frame frame{doc.at("frame").at(0).get<int>(), doc.at("frame").at(1).get<int>()};
        const auto& poses = doc.at("poses");
        if (static_cast<int>(poses.size()) != K) throw FormatError("basic-pose count does not match K");
        BasicPoseSet b;
        for (const auto& p : poses) b.poses.push_back(pose_from_json(p, frame, J));
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed basic-pose document: ") + e.what());
    }
}

}  // namespace tgps
