#pragma once

/// \file dataset.hpp
/// \brief JSON-lines manifests, identity-disjoint splits, same-identity pose pairs,
/// and orientation-phrase augmentation.
///
/// Manifest line: {"id", "identity", "image", "caption", "pose": [[x, y, v] x J]},
/// optionally "frame": [h, w] when the pose is given in the source image's pixel
/// frame (it is then rescaled to the configured frame) and "colors": {part: color}.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "tgps/errors.hpp"
#include "tgps/image_io.hpp"
#include "tgps/pose_prior.hpp"
#include "tgps/text.hpp"
#include "tgps/types.hpp"

namespace tgps {

struct Sample {
    std::string id;
    std::string identity;
    std::filesystem::path image;  ///< absolute, or relative to the working directory
    Pose pose;
    Caption caption;
    std::map<std::string, std::string> colors;  ///< ground-truth part colours, when known

    /// Decodes and resizes the image to the pose frame.
    ImageTensor load_image() const { return resize_image(read_file_bytes(image), pose.frame().height, pose.frame().width); }
};

struct ManifestOptions {
    Frame frame{};
    int joints = kDefaultJoints;
};

inline Sample parse_manifest_record(const nlohmann::json& rec, const std::filesystem::path& base, const ManifestOptions& opt) {
    if (!rec.is_object()) throw ValidationError("record", "record must be a JSON object");
    auto text = [&](const char* key) {
        if (!rec.contains(key) || !rec[key].is_string()) throw ValidationError(key, std::string(key) + " must be a string");
        return rec[key].get<std::string>();
    };
    Sample s;
    s.id = text("id");
    s.identity = text("identity");
    const std::filesystem::path img = text("image");
    s.image = img.is_absolute() ? img : base / img;
    s.caption = text("caption");
    if (split_words(s.caption).empty()) throw ValidationError("caption", "caption has no tokens");
    if (!rec.contains("pose")) throw ValidationError("pose", "pose is missing");

    Frame src = opt.frame;
    if (rec.contains("frame")) {
        const auto& f = rec["frame"];
        if (!f.is_array() || f.size() != 2 || !f[0].is_number_integer() || !f[1].is_number_integer() ||
            f[0].get<int>() <= 0 || f[1].get<int>() <= 0)
            throw ValidationError("frame", "frame must be [height, width] with positive integers");
        src = {f[0].get<int>(), f[1].get<int>()};
    }
    Pose raw = pose_from_json(rec["pose"], src, opt.joints);
    if (src == opt.frame) {
        s.pose = std::move(raw);
    } else {
        const double sy = static_cast<double>(opt.frame.height) / src.height;
        const double sx = static_cast<double>(opt.frame.width) / src.width;
        std::vector<Joint> js = raw.joints();
        for (auto& j : js) {
            j.x *= sx;
            j.y *= sy;
        }
        s.pose = Pose(opt.frame, std::move(js));
    }
    if (rec.contains("colors")) {
        if (!rec["colors"].is_object()) throw ValidationError("colors", "colors must be an object");
        for (const auto& [k, v] : rec["colors"].items()) {
            if (!v.is_string()) throw ValidationError("colors", "colors values must be strings");
            s.colors[k] = v.get<std::string>();
        }
    }
    return s;
}

/// Parses every non-blank line; the first invalid record raises an error naming its line and field.
inline std::vector<Sample> load_manifest(const std::filesystem::path& path, const ManifestOptions& opt = {}) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest " + path.string());
    const std::filesystem::path base = path.parent_path();
    std::vector<Sample> out;
    std::set<std::string> ids;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw ValidationError("record", where + ": not valid JSON");
        }
        try {
            out.push_back(parse_manifest_record(rec, base, opt));
        } catch (const ValidationError& e) {
            throw ValidationError(e.field(), where + ": field '" + e.field() + "': " + e.what());
        }
        if (!ids.insert(out.back().id).second) throw ValidationError("id", where + ": field 'id': duplicate id " + out.back().id);
    }
    return out;
}

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json j{{"id", s.id}, {"identity", s.identity}, {"image", s.image.generic_string()},
                     {"caption", s.caption}, {"pose", pose_to_json(s.pose)}};
    if (!s.colors.empty()) j["colors"] = s.colors;
    return j;
}

// ---------------------------------------------------------------- splits and pairs

struct Split {
    std::vector<Sample> train, test;
};

/// Identities are sorted, shuffled with `seed`, and the first round(fraction * n)
/// go to test (at most n - 1, so train keeps at least one identity).
inline Split split_identities(const std::vector<Sample>& samples, double test_fraction, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& s : samples) ids.push_back(s.identity);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    int n_test = static_cast<int>(std::lround(test_fraction * static_cast<double>(ids.size())));
    n_test = std::clamp(n_test, 0, std::max(0, static_cast<int>(ids.size()) - 1));
    const std::set<std::string> test_ids(ids.begin(), ids.begin() + n_test);
    Split out;
    for (const auto& s : samples) (test_ids.count(s.identity) ? out.test : out.train).push_back(s);
    return out;
}

struct Pair {
    int source = 0;  ///< index into the sample list
    int target = 0;
};

struct PairIndex {
    std::vector<Pair> pairs;
    std::size_t size() const { return pairs.size(); }
};

inline constexpr double kPoseTolerance = 1e-6;

/// Normalized pose vector with visibility flags appended, so that fully invisible
/// poses still compare.
inline std::vector<double> pose_signature(const Pose& p) {
    std::vector<double> v;
    try {
        v = normalize_pose(p);
    } catch (const DegeneratePoseError&) {
        v.assign(2 * static_cast<std::size_t>(p.size()), 0.0);
    }
    for (const auto& j : p.joints()) v.push_back(j.visible ? 1.0 : 0.0);
    return v;
}

inline bool poses_differ(const Pose& a, const Pose& b) {
    if (a.size() != b.size()) return true;
    return std::sqrt(squared_distance(pose_signature(a), pose_signature(b))) > kPoseTolerance;
}

/// All ordered (a, b), a != b, of the same identity whose poses differ. Ordered by
/// identity of first appearance, then source index, then target index.
inline PairIndex make_pairs(const std::vector<Sample>& samples) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<int>> groups;
    for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
        auto [it, fresh] = groups.try_emplace(samples[i].identity);
        if (fresh) order.push_back(samples[i].identity);
        it->second.push_back(i);
    }
    PairIndex out;
    for (const auto& id : order) {
        const auto& g = groups[id];
        for (int a : g)
            for (int b : g)
                if (a != b && poses_differ(samples[a].pose, samples[b].pose)) out.pairs.push_back({a, b});
    }
    return out;
}

// ---------------------------------------------------------------- orientation phrases

/// Default phrases indexed by orientation (see sort_by_facing for the order).
inline std::vector<std::string> default_phrasebook(int K) {
    static const std::vector<std::string> eight{
        "facing the camera", "facing front right", "facing right", "facing back right",
        "facing away from the camera", "facing back left", "facing left", "facing front left"};
    if (K == 8) return eight;
    std::vector<std::string> out;
    for (int k = 0; k < K; ++k) out.push_back("pose group " + std::to_string(k));
    return out;
}

inline std::string rstrip(std::string s) {
    while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.back())) || s.back() == '.')) s.pop_back();
    return s;
}

/// Index of the phrasebook entry the caption ends with, or -1.
inline int trailing_phrase(const Caption& caption, const std::vector<std::string>& phrasebook) {
    const std::string c = rstrip(caption);
    int best = -1;
    std::size_t best_len = 0;
    for (int k = 0; k < static_cast<int>(phrasebook.size()); ++k) {
        const std::string& p = phrasebook[k];
        if (c.size() < p.size() || c.compare(c.size() - p.size(), p.size(), p) != 0) continue;
        const std::size_t at = c.size() - p.size();
        if (at > 0 && std::isalnum(static_cast<unsigned char>(c[at - 1]))) continue;
        if (p.size() > best_len) {
            best = k;
            best_len = p.size();
        }
    }
    return best;
}

/// Appends ", <phrase>" for the sample's orientation unless the caption already ends with a phrase.
inline Sample append_orientation_phrase(Sample s, const BasicPoseSet& basics, const std::vector<std::string>& phrasebook) {
    if (static_cast<int>(phrasebook.size()) != basics.K())
        throw ConfigError("phrasebook size " + std::to_string(phrasebook.size()) + " differs from K=" +
                          std::to_string(basics.K()));
    if (trailing_phrase(s.caption, phrasebook) >= 0) return s;
    s.caption = rstrip(s.caption) + ", " + phrasebook[orientation_label(s.pose, basics)];
    return s;
}

}  // namespace tgps
