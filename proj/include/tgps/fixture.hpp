#pragma once

/// \file fixture.hpp
/// \brief Procedural stick-figure pedestrians with known poses, colours, and captions.
///
/// Each identity has fixed clothing colours; its images show the figure turned to
/// orientation (identity * per_identity + j) % 8, i.e. rotated about the vertical
/// axis by 45 degrees per step and projected orthographically.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "tgps/dataset.hpp"
#include "tgps/image_io.hpp"
#include "tgps/metrics.hpp"
#include "tgps/pose_prior.hpp"

namespace tgps {

struct FixtureRecord {
    std::string id;
    std::string identity;
    int orientation = 0;
    Pose pose;
    Caption caption;
    std::map<std::string, std::string> colors;
};

struct FixtureResult {
    std::filesystem::path manifest;
    std::vector<FixtureRecord> records;
};

namespace fixture {

inline constexpr int kOrientations = 8;
inline constexpr double kBodyRadius = 5.0;
inline constexpr double kShoeRadius = 5.0;
inline constexpr double kHeadRadius = 7.0;
inline constexpr std::array<double, 3> kBackground{200, 200, 200};
inline constexpr std::array<double, 3> kSkin{224, 172, 105};

/// Body-frame joints (X toward the figure's left, y down, Z toward the camera) in COCO-18 order.
inline constexpr std::array<std::array<double, 3>, 18> kTemplate{{
    {0, 14, 4},    {0, 24, 0},   {-10, 26, 0}, {-12, 44, 0}, {-13, 60, 0}, {10, 26, 0},
    {12, 44, 0},   {13, 60, 0},  {-6, 64, 0},  {-6, 88, 0},  {-6, 112, 0}, {6, 64, 0},
    {6, 88, 0},    {6, 112, 0},  {-2.5, 12, 3.5}, {2.5, 12, 3.5}, {-5, 13, 0}, {5, 13, 0},
}};

/// Figure turned to `orientation` and shifted by (dx, dy), before per-joint jitter.
inline std::vector<Joint> project(int orientation, double dx, double dy, Frame frame) {
    const double th = orientation * std::numbers::pi / 4.0;
    const double cx = frame.width / 2.0 + dx;
    const double sy = frame.height / 128.0;
    std::vector<Joint> out;
    for (const auto& [X, y, Z] : kTemplate) out.push_back({cx + X * std::cos(th) + Z * std::sin(th), y * sy + dy, true});
    return out;
}

class Canvas {
public:
    Canvas(int H, int W) : H_(H), W_(W), px_(static_cast<std::size_t>(H) * W, kBackground) {}

    void capsule(const Joint& a, const Joint& b, double r, const std::array<double, 3>& rgb) {
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r)));
        const int y1 = std::min(H_ - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r)));
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r)));
        const int x1 = std::min(W_ - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (point_segment_distance(x, y, a.x, a.y, b.x, b.y) <= r) px_[static_cast<std::size_t>(y) * W_ + x] = rgb;
    }
    void disk(const Joint& c, double r, const std::array<double, 3>& rgb) { capsule(c, c, r, rgb); }

    RgbImage image() const {
        RgbImage im;
        im.height = H_;
        im.width = W_;
        im.data.resize(px_.size() * 3);
        for (std::size_t i = 0; i < px_.size(); ++i)
            for (int c = 0; c < 3; ++c) im.data[i * 3 + c] = px_[i][c] / 255.0;
        return im;
    }

private:
    int H_, W_;
    std::vector<std::array<double, 3>> px_;
};

inline const std::array<double, 3>& rgb_of(const std::string& name) {
    for (const auto& c : default_palette())
        if (c.name == name) return c.rgb;
    throw ConfigError("unknown palette colour " + name);
}

/// Paints pants, then shirt and sleeves, then shoes and head, so every part's
/// oracle region is covered by that part's colour.
inline RgbImage paint(const Pose& p, const std::map<std::string, std::string>& colors) {
    using namespace coco;
    Canvas cv(p.frame().height, p.frame().width);
    const auto& j = p.joints();
    const auto& pants = rgb_of(colors.at("pants"));
    for (auto [a, b] : {std::pair{kRHip, kRKnee}, {kRKnee, kRAnkle}, {kLHip, kLKnee}, {kLKnee, kLAnkle}, {kRHip, kLHip}})
        cv.capsule(j[a], j[b], kBodyRadius, pants);
    const auto& shirt = rgb_of(colors.at("shirt"));
    for (auto [a, b] : {std::pair{kNeck, kRShoulder}, {kNeck, kLShoulder}, {kRShoulder, kLShoulder}, {kRShoulder, kRElbow},
                        {kRElbow, kRWrist}, {kLShoulder, kLElbow}, {kLElbow, kLWrist}, {kNeck, kRHip}, {kNeck, kLHip},
                        {kRShoulder, kRHip}, {kLShoulder, kLHip}})
        cv.capsule(j[a], j[b], kBodyRadius, shirt);
    // Pants again over the waist so the hip joints read as pants.
    cv.capsule(j[kRHip], j[kLHip], kBodyRadius, pants);
    cv.disk(j[kRHip], kBodyRadius, pants);
    cv.disk(j[kLHip], kBodyRadius, pants);
    const auto& shoes = rgb_of(colors.at("shoes"));
    cv.disk(j[kRAnkle], kShoeRadius, shoes);
    cv.disk(j[kLAnkle], kShoeRadius, shoes);
    const Joint head{(j[kREar].x + j[kLEar].x) / 2, (j[kREye].y + j[kNose].y) / 2 - 1, true};
    cv.disk(head, kHeadRadius, kSkin);
    return cv.image();
}

inline Caption caption_for(int tmpl, const std::string& who, const std::map<std::string, std::string>& c,
                           const std::string& phrase) {
    const std::string &s = c.at("shirt"), &p = c.at("pants"), &h = c.at("shoes");
    switch (tmpl % 3) {
        case 0: return "a " + who + " wearing a " + s + " shirt and " + p + " pants with " + h + " shoes, " + phrase;
        case 1: return "a " + who + " in a " + s + " shirt, " + p + " pants and " + h + " shoes, " + phrase;
        default: return "this " + who + " has a " + s + " shirt, " + p + " pants and " + h + " shoes, " + phrase;
    }
}

}  // namespace fixture

/// Writes images/<id>.png and manifest.jsonl under `out_dir`; byte-identical for a fixed seed.
inline FixtureResult generate_synthetic_fixture(int n_identities, int per_identity, std::uint64_t seed,
                                                const std::filesystem::path& out_dir, Frame frame = {}) {
    if (n_identities < 1 || per_identity < 1) throw ConfigError("fixture needs at least one identity and one image each");
    if (frame.height < 64 || frame.width < 40) throw ConfigError("fixture frame must be at least 64x40");
    std::filesystem::create_directories(out_dir / "images");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> shift(-1.0, 1.0), wobble(-0.5, 0.5);
    const auto& palette = default_palette();
    std::uniform_int_distribution<std::size_t> color(0, palette.size() - 1);
    std::uniform_int_distribution<int> tmpl(0, 2);
    static const std::array<std::string, 3> who{"man", "woman", "person"};
    const auto phrases = default_phrasebook(fixture::kOrientations);

    FixtureResult res;
    res.manifest = out_dir / "manifest.jsonl";
    std::string manifest;
    for (int i = 0; i < n_identities; ++i) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "id%03d", i);
        const std::map<std::string, std::string> colors{
            {"shirt", palette[color(rng)].name}, {"pants", palette[color(rng)].name}, {"shoes", palette[color(rng)].name}};
        const std::string person = who[static_cast<std::size_t>(tmpl(rng))];
        for (int k = 0; k < per_identity; ++k) {
            FixtureRecord r;
            r.identity = idbuf;
            r.id = std::string(idbuf) + "_" + std::to_string(k);
            r.orientation = (i * per_identity + k) % fixture::kOrientations;
            const double dx = shift(rng), dy = shift(rng);
            auto joints = fixture::project(r.orientation, dx, dy, frame);
            for (auto& jt : joints) {
                jt.x += wobble(rng);
                jt.y += wobble(rng);
            }
            r.pose = Pose(frame, std::move(joints));
            r.colors = colors;
            r.caption = fixture::caption_for(tmpl(rng), person, colors, phrases[r.orientation]);
            const std::filesystem::path rel = std::filesystem::path("images") / (r.id + ".png");
            write_file_bytes(out_dir / rel, encode_png(fixture::paint(r.pose, colors)));
            nlohmann::json line{{"id", r.id},           {"identity", r.identity}, {"image", rel.generic_string()},
                                {"caption", r.caption}, {"pose", pose_to_json(r.pose)}, {"colors", colors},
                                {"orientation", r.orientation}};
            manifest += line.dump() + "\n";
            res.records.push_back(std::move(r));
        }
    }
    std::ofstream(res.manifest, std::ios::binary) << manifest;
    return res;
}

}  // namespace tgps
