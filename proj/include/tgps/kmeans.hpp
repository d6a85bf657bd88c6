#pragma once

/// \file kmeans.hpp
/// \brief Seeded k-means (k-means++ initialisation, Lloyd iterations) over dense vectors.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "tgps/errors.hpp"
#include "tgps/types.hpp"

namespace tgps {

struct KMeansOptions {
    int max_iterations = 100;
    double tolerance = 1e-6;  ///< stop when no centre moves farther than this
    int restarts = 10;        ///< independent k-means++ seedings; lowest objective wins
};

struct KMeansResult {
    std::vector<std::vector<double>> centers;
    std::vector<int> assignment;
    /// Objective (sum of squared distances to assigned centre) after every
    /// mean update of the winning run; the last entry belongs to the returned centres.
    std::vector<double> objective_history;
    int iterations = 0;
    double objective() const { return objective_history.empty() ? 0.0 : objective_history.back(); }
};

namespace detail {

inline int nearest_center(const std::vector<double>& x, const std::vector<std::vector<double>>& centers, double* dist) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centers.size(); ++k) {
        const double d = squared_distance(x, centers[k]);
        if (d < bd) {  // strict: ties keep the lowest index
            bd = d;
            best = static_cast<int>(k);
        }
    }
    if (dist) *dist = bd;
    return best;
}

inline std::vector<std::vector<double>> kmeanspp_seed(const std::vector<std::vector<double>>& pts, int K,
                                                      std::mt19937_64& rng) {
    std::vector<std::vector<double>> centers;
    std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
    centers.push_back(pts[pick(rng)]);
    std::vector<double> d2(pts.size());
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    while (static_cast<int>(centers.size()) < K) {
        double total = 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            nearest_center(pts[i], centers, &d2[i]);
            total += d2[i];
        }
        std::size_t chosen = 0;
        if (total > 0) {
            double r = u01(rng) * total;
            chosen = pts.size() - 1;
            for (std::size_t i = 0; i < pts.size(); ++i) {
                if (d2[i] <= 0) continue;
                if (r < d2[i]) {
                    chosen = i;
                    break;
                }
                r -= d2[i];
            }
            while (d2[chosen] <= 0) --chosen;  // numeric spill past the last positive weight
        }
        centers.push_back(pts[chosen]);
    }
    return centers;
}

inline KMeansResult lloyd(const std::vector<std::vector<double>>& pts, std::vector<std::vector<double>> centers,
                          const KMeansOptions& opt) {
    const std::size_t D = pts.front().size();
    const int K = static_cast<int>(centers.size());
    KMeansResult r;
    r.assignment.assign(pts.size(), 0);
    for (int it = 0; it < opt.max_iterations; ++it) {
        std::vector<double> dist(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) r.assignment[i] = nearest_center(pts[i], centers, &dist[i]);
        // An empty cluster takes the point farthest from its centre (lowest index on ties),
        // which strictly lowers the objective.
        for (int k = 0; k < K; ++k) {
            if (std::count(r.assignment.begin(), r.assignment.end(), k) > 0) continue;
            std::size_t far = 0;
            for (std::size_t i = 1; i < pts.size(); ++i)
                if (dist[i] > dist[far]) far = i;
            if (dist[far] <= 0) break;
            r.assignment[far] = k;
            dist[far] = 0.0;
        }
        std::vector<std::vector<double>> next(K, std::vector<double>(D, 0.0));
        std::vector<int> counts(K, 0);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            ++counts[r.assignment[i]];
            for (std::size_t d = 0; d < D; ++d) next[r.assignment[i]][d] += pts[i][d];
        }
        double moved = 0.0;
        for (int k = 0; k < K; ++k) {
            if (counts[k] == 0) {
                next[k] = centers[k];
                continue;
            }
            for (double& v : next[k]) v /= counts[k];
            moved = std::max(moved, std::sqrt(squared_distance(next[k], centers[k])));
        }
        centers = std::move(next);
        double obj = 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) obj += squared_distance(pts[i], centers[r.assignment[i]]);
        r.objective_history.push_back(obj);
        r.iterations = it + 1;
        if (moved <= opt.tolerance) break;
    }
    r.centers = std::move(centers);
    return r;
}

}  // namespace detail

/// Deterministic for a given (points, K, seed, options).
inline KMeansResult kmeans(const std::vector<std::vector<double>>& pts, int K, std::uint64_t seed,
                           const KMeansOptions& opt = {}) {
    if (K < 1) throw ClusteringError("K must be at least 1");
    if (static_cast<int>(pts.size()) < K)
        throw ClusteringError("need at least K=" + std::to_string(K) + " points, got " + std::to_string(pts.size()));
    const std::set<std::vector<double>> distinct(pts.begin(), pts.end());
    if (static_cast<int>(distinct.size()) < K)
        throw ClusteringError("only " + std::to_string(distinct.size()) + " distinct vectors for K=" + std::to_string(K));
    std::mt19937_64 rng(seed);
    KMeansResult best;
    for (int run = 0; run < std::max(1, opt.restarts); ++run) {
        KMeansResult r = detail::lloyd(pts, detail::kmeanspp_seed(pts, K, rng), opt);
        if (run == 0 || r.objective() < best.objective()) best = std::move(r);
    }
    return best;
}

}  // namespace tgps
