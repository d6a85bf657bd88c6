#pragma once

/// \file stage1.hpp
/// \brief Text-guided pose generation: orientation selection, the basic-pose
/// refinement generator G1, the text-conditioned discriminator D1, and their losses.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tgps/autograd.hpp"
#include "tgps/config.hpp"
#include "tgps/losses.hpp"
#include "tgps/nn.hpp"
#include "tgps/text.hpp"
#include "tgps/types.hpp"

namespace tgps::stage1 {

using ag::Var;

struct Stage1Config {
    int joints = kDefaultJoints;
    int height = kDefaultHeight;
    int width = kDefaultWidth;
    int K = 8;
    int vocab_size = 0;
    int embed_dim = 128;
    int text_hidden = 256;  ///< L = L_s
    int ori_hidden = 64;
    int g_width = 16;
    int d_width = 16;
    int text_cond = 32;

    static Stage1Config from(const TrainConfig& c, int vocab_size) {
        return {c.J, c.H, c.W, c.K, vocab_size, c.embed_dim, c.L, c.ori_hidden, c.g1_width, c.d1_width, c.text_cond_dim};
    }
};

/// Parameters of the text encoder, F_ori, G1, and D1 in one named set.
/// Parameter-name prefixes: "text.", "ori.", "g1.", "d1.".
class Stage1Model {
public:
    Stage1Model(const Stage1Config& cfg, std::uint64_t seed) : cfg_(cfg) {
        if (cfg.height % 8 != 0 || cfg.width % 8 != 0) throw ConfigError("stage I needs H and W divisible by 8");
        nn::Rng rng(seed);
        text_ = TextEncoder(params_, "text.", {cfg.vocab_size, cfg.embed_dim, cfg.text_hidden}, rng);
        ori1_ = nn::Linear(params_, "ori.fc1", cfg.text_hidden, cfg.ori_hidden, rng, std::sqrt(2.0));
        ori2_ = nn::Linear(params_, "ori.fc2", cfg.ori_hidden, cfg.K, rng);

        const int c1 = cfg.g_width, c2 = 2 * c1, c3 = 4 * c1, J = cfg.joints;
        g_down1_ = nn::Conv2d(params_, "g1.down1", J, c1, 3, 2, 1, rng);
        g_down2_ = nn::Conv2d(params_, "g1.down2", c1, c2, 3, 2, 1, rng);
        g_down3_ = nn::Conv2d(params_, "g1.down3", c2, c3, 3, 2, 1, rng);
        g_text_ = nn::Linear(params_, "g1.text", cfg.text_hidden, cfg.text_cond, rng, std::sqrt(2.0));
        g_mid_ = nn::Conv2d(params_, "g1.mid", c3 + cfg.text_cond, c3, 3, 1, 1, rng);
        g_up3_ = nn::Conv2d(params_, "g1.up3", c3, c2, 3, 1, 1, rng);
        g_up2_ = nn::Conv2d(params_, "g1.up2", 2 * c2, c1, 3, 1, 1, rng);
        g_up1_ = nn::Conv2d(params_, "g1.up1", 2 * c1, c1, 3, 1, 1, rng);
        g_head_ = nn::Conv2d(params_, "g1.head", c1, J, 3, 1, 1, rng, 0.1);
        g_skip_ = nn::Conv2d(params_, "g1.skip", J, J, 1, 1, 0, rng, 0.0);
        // Start from the basic pose: sigmoid(8·b - 4) is ~0.98 on a disk and ~0.02 off it.
        for (int j = 0; j < J; ++j) {
            g_skip_.weight.mutable_value().at(j, j, 0, 0) = 8.0;
            g_skip_.bias.mutable_value()[j] = -4.0;
        }

        const int d1 = cfg.d_width, d2 = 2 * d1, d3 = 4 * d1;
        d_conv1_ = nn::Conv2d(params_, "d1.conv1", J, d1, 3, 2, 1, rng);
        d_conv2_ = nn::Conv2d(params_, "d1.conv2", d1, d2, 3, 2, 1, rng);
        d_conv3_ = nn::Conv2d(params_, "d1.conv3", d2, d3, 3, 2, 1, rng);
        d_text_ = nn::Linear(params_, "d1.text", cfg.text_hidden, cfg.text_cond, rng, std::sqrt(2.0));
        d_joint_ = nn::Conv2d(params_, "d1.joint", d3 + cfg.text_cond, d3, 3, 1, 1, rng);
        d_out_ = nn::Linear(params_, "d1.out", d3, 1, rng);
    }

    const Stage1Config& config() const { return cfg_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const TextEncoder& text_encoder() const { return text_; }

    /// F_ori: [B, L_s] -> logits [B, K].
    Var orientation_logits(const Var& phi) const { return ori2_(ag::relu(ori1_(phi))); }

    /// G1: basic-pose heatmaps [B,J,H,W] and sentence vectors [B,L_s] -> refined heatmaps in [0,1].
    Var generate(const Var& basic, const Var& phi) const {
        using namespace ag;
        check_heatmaps(basic);
        const Var e1 = leaky_relu(g_down1_(basic));
        const Var e2 = leaky_relu(g_down2_(e1));
        const Var e3 = leaky_relu(g_down3_(e2));
        const Var t = broadcast_spatial(leaky_relu(g_text_(phi)), e3.dim(2), e3.dim(3));
        const Var mid = leaky_relu(g_mid_(concat({e3, t}, 1)));
        const Var u3 = leaky_relu(g_up3_(upsample_nearest2x(mid)));
        const Var u2 = leaky_relu(g_up2_(upsample_nearest2x(concat({u3, e2}, 1))));
        const Var u1 = leaky_relu(g_up1_(upsample_nearest2x(concat({u2, e1}, 1))));
        return sigmoid(add(g_head_(u1), g_skip_(basic)));
    }

    /// D1: heatmaps [B,J,H,W] conditioned on sentence vectors -> probability real, [B].
    Var discriminate(const Var& heatmaps, const Var& phi) const {
        using namespace ag;
        check_heatmaps(heatmaps);
        const Var h1 = leaky_relu(d_conv1_(heatmaps));
        const Var h2 = leaky_relu(d_conv2_(h1));
        const Var h3 = leaky_relu(d_conv3_(h2));
        const Var t = broadcast_spatial(leaky_relu(d_text_(phi)), h3.dim(2), h3.dim(3));
        const Var j = leaky_relu(d_joint_(concat({h3, t}, 1)));
        const Var score = d_out_(mean_spatial(j));
        return reshape(sigmoid(score), {heatmaps.dim(0)});
    }

    std::vector<Var> generator_params() const {
        auto out = params_.with_prefix("g1.");
        for (auto& v : params_.with_prefix("ori.")) out.push_back(v);
        for (auto& v : params_.with_prefix("text.")) out.push_back(v);
        return out;
    }
    std::vector<Var> discriminator_params() const { return params_.with_prefix("d1."); }

private:
    void check_heatmaps(const Var& h) const {
        const Shape& s = h.shape();
        if (s.size() != 4 || s[1] != cfg_.joints || s[2] != cfg_.height || s[3] != cfg_.width)
            throw ShapeError("heatmap batch " + shape_str(s) + " does not match [B," + std::to_string(cfg_.joints) + "," +
                             std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) + "]");
    }

    Stage1Config cfg_;
    nn::ParamSet params_;
    TextEncoder text_;
    nn::Linear ori1_, ori2_;
    nn::Conv2d g_down1_, g_down2_, g_down3_, g_mid_, g_up3_, g_up2_, g_up1_, g_head_, g_skip_;
    nn::Linear g_text_;
    nn::Conv2d d_conv1_, d_conv2_, d_conv3_, d_joint_;
    nn::Linear d_text_, d_out_;
};

// ------------------------------------------------------------------ orientation

struct OrientationPrediction {
    std::vector<double> probs;
    int index = 0;  ///< argmax, lowest index on ties
};

inline OrientationPrediction softmax_argmax(std::span<const double> logits) {
    OrientationPrediction out;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0;
    for (double l : logits) s += std::exp(l - mx);
    for (double l : logits) out.probs.push_back(std::exp(l - mx) / s);
    // Argmax on the logits so ties are decided before any rounding in the softmax.
    out.index = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    return out;
}

/// Softmax probabilities and argmax orientation for one sentence vector.
inline OrientationPrediction predict_orientation(const Stage1Model& model, const Tensor& phi) {
    ag::NoGradGuard ng;
    const Var logits = model.orientation_logits(ag::constant(phi.reshaped({1, static_cast<int>(phi.size())})));
    return softmax_argmax(logits.value().data);
}

// ------------------------------------------------------------------ losses

/// -mean log D1(p | t) - mean log(1 - D1(p̃ | t)). `fake` is detached here.
inline Var d_loss(const Stage1Model& model, const Var& real, const Var& fake, const Var& phi) {
    return loss::discriminator_bce(model.discriminate(real, phi), model.discriminate(fake.detach(), phi));
}

struct GeneratorLossTerms {
    Var total, adversarial, mse, cls;
};

/// L_G1 + λ1 · mse(p̃, p) + λ2 · CE(logits, o_real).
inline GeneratorLossTerms g_loss(const Stage1Model& model, const Var& fake, const Var& real, const Var& phi,
                                 const Var& logits, std::span<const int> o_real, double lambda1, double lambda2) {
    GeneratorLossTerms t;
    t.adversarial = loss::generator_bce(model.discriminate(fake, phi));
    t.mse = loss::mse(fake, real);
    t.cls = loss::cross_entropy(logits, o_real);
    t.total = ag::add_n({t.adversarial, ag::scale(t.mse, lambda1), ag::scale(t.cls, lambda2)});
    return t;
}

}  // namespace tgps::stage1
