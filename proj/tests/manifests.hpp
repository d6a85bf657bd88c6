#pragma once

// Random in-memory manifests for the dataset property checks.

#include "oracles.hpp"
#include "tgps/dataset.hpp"

namespace manifests {

using namespace tgps;

inline Pose random_pose(oracle::Rng& rng) {
    std::vector<Joint> js(18);
    for (auto& j : js) j = {std::uniform_real_distribution<double>(0, 63)(rng), std::uniform_real_distribution<double>(0, 127)(rng), true};
    return Pose(Frame{}, js);
}

// Random in-memory manifest; `group[i]` names the pose each sample copies, so
// two samples share a pose exactly when their groups match.
struct RandomManifest {
    std::vector<Sample> samples;
    std::vector<int> group;
};

inline RandomManifest random_manifest(oracle::Rng& rng) {
    RandomManifest m;
    const int identities = oracle::random_int(rng, 1, 8);
    std::vector<Pose> poses;
    for (int id = 0; id < identities; ++id) {
        const int n = oracle::random_int(rng, 1, 5);
        const int first = static_cast<int>(poses.size());
        for (int k = 0; k < n; ++k) {
            int g;
            if (k > 0 && oracle::random_int(rng, 0, 3) == 0) {
                g = oracle::random_int(rng, first, static_cast<int>(poses.size()) - 1);  // repeat a pose
            } else {
                g = static_cast<int>(poses.size());
                poses.push_back(random_pose(rng));
            }
            Sample s;
            s.id = "s" + std::to_string(m.samples.size());
            s.identity = "id" + std::to_string(id);
            s.pose = poses[g];
            s.caption = "a person";
            m.samples.push_back(s);
            m.group.push_back(g);
        }
    }
    return m;
}

}  // namespace manifests
