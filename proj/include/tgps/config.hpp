#pragma once

/// \file config.hpp
/// \brief TrainConfig: every hyperparameter of both stages with its default.

#include "json.hpp"

#include <cstdint>
#include <string>

#include "tgps/errors.hpp"

namespace tgps {

struct TrainConfig {
    // pose prior
    int K = 8;
    int J = 18;
    int H = 128;
    int W = 64;
    double r = 4.0;
    double dilation = 8.0;
    int kmeans_restarts = 10;
    // text
    int L = 256;
    int L_s = 256;
    int N_max = 32;
    int embed_dim = 128;
    int min_freq = 1;
    bool share_text_encoder = true;
    // stage I
    int ori_hidden = 64;
    int g1_width = 16;
    int d1_width = 16;
    int text_cond_dim = 32;
    double lambda1 = 10.0;
    double lambda2 = 1.0;
    int steps_stage1 = 500;
    // stage II
    int m = 3;
    int g2_width = 32;
    int d2_width = 32;
    double gamma1 = 10.0;
    double gamma2 = 1.0;
    int steps_stage2 = 2000;
    // optimisation
    int batch_size = 8;
    double lr_g = 2e-4;
    double lr_d = 5e-5;
    double beta1 = 0.5;
    std::uint64_t seed = 7;
    int log_every = 50;
    double test_fraction = 0.0;

    void validate() const {
        auto fail = [](const std::string& key, const std::string& msg) { throw ValidationError(key, key + ": " + msg); };
        if (K < 1) fail("K", "must be >= 1");
        if (J < 1) fail("J", "must be >= 1");
        if (m < 1) fail("m", "must be >= 1");
        if (H <= 0 || W <= 0) fail("H", "frame must be positive");
        const int scale = 1 << m;
        if (H % scale != 0 || W % scale != 0) fail("m", "2^m must divide H and W");
        if (H % 8 != 0 || W % 8 != 0) fail("H", "H and W must be multiples of 8");
        if (L < 2 || L % 2 != 0) fail("L", "must be a positive even number");
        if (L_s != L) fail("L_s", "must equal L (one bidirectional encoder produces both)");
        if (N_max < 3) fail("N_max", "must be >= 3");
        if (r < 1) fail("r", "must be >= 1");
        if (dilation < 0) fail("dilation", "must be >= 0");
        if (lambda1 < 0) fail("lambda1", "must be >= 0");
        if (lambda2 < 0) fail("lambda2", "must be >= 0");
        if (gamma1 < 0) fail("gamma1", "must be >= 0");
        if (gamma2 < 0) fail("gamma2", "must be >= 0");
        if (batch_size < 1) fail("batch_size", "must be >= 1");
        if (lr_g < 0 || lr_d < 0) fail("lr_g", "learning rates must be >= 0");
        if (embed_dim < 1 || ori_hidden < 1 || g1_width < 1 || d1_width < 1 || g2_width < 1 || d2_width < 1 ||
            text_cond_dim < 1)
            fail("width", "layer widths must be >= 1");
        if (test_fraction < 0 || test_fraction >= 1) fail("test_fraction", "must be in [0, 1)");
        if (kmeans_restarts < 1) fail("kmeans_restarts", "must be >= 1");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, K, J, H, W, r, dilation, kmeans_restarts, L, L_s, N_max,
                                                embed_dim, min_freq, share_text_encoder, ori_hidden, g1_width, d1_width,
                                                text_cond_dim, lambda1, lambda2, steps_stage1, m, g2_width, d2_width,
                                                gamma1, gamma2, steps_stage2, batch_size, lr_g, lr_d, beta1, seed,
                                                log_every, test_fraction)

}  // namespace tgps
