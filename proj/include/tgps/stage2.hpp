#pragma once

/// \file stage2.hpp
/// \brief Pose- and attribute-transferred image generation: image/pose encoders,
/// text-to-visual attention per scale, recursive attentional upsampling, the
/// three-condition discriminator D2, and the generator/discriminator objectives.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tgps/attention.hpp"
#include "tgps/autograd.hpp"
#include "tgps/config.hpp"
#include "tgps/losses.hpp"
#include "tgps/nn.hpp"
#include "tgps/text.hpp"
#include "tgps/types.hpp"

namespace tgps::stage2 {

using ag::Var;

struct Stage2Config {
    int joints = kDefaultJoints;
    int height = kDefaultHeight;
    int width = kDefaultWidth;
    int scales = 3;  ///< m
    int vocab_size = 0;
    int embed_dim = 128;
    int text_hidden = 256;  ///< L
    int g_width = 32;       ///< channels of the shallowest encoder block; doubles per block
    int d_width = 32;
    int text_cond = 32;

    static Stage2Config from(const TrainConfig& c, int vocab_size) {
        return {c.J, c.H, c.W, c.m, vocab_size, c.embed_dim, c.L, c.g2_width, c.d2_width, c.text_cond_dim};
    }

    /// Channel count l_i of scale i (1-based; scale 1 is the deepest).
    int scale_channels(int i) const { return g_width << (scales - i); }
    /// Spatial extent of scale i.
    int scale_height(int i) const { return height >> (scales - i + 1); }
    int scale_width(int i) const { return width >> (scales - i + 1); }

    void validate() const {
        if (scales < 1) throw ConfigError("m must be >= 1");
        const int f = 1 << scales;
        if (height % f != 0 || width % f != 0)
            throw ConfigError("2^m = " + std::to_string(f) + " must divide H=" + std::to_string(height) +
                              " and W=" + std::to_string(width));
        if (height % 8 != 0 || width % 8 != 0) throw ConfigError("discriminator needs H and W divisible by 8");
    }
};

/// Feature maps per scale, index 0 = scale 1 (smallest).
using FeaturePyramid = std::vector<Var>;

/// Attention-path intermediates for one batch.
struct AttentionPath {
    FeaturePyramid visual;  ///< v_i, [B, l_i, h_i, w_i]
    FeaturePyramid context; ///< z_i, [B, l_i, h_i, w_i]
};

struct GeneratorOutput {
    Var image;  ///< [B, 3, H, W] in (-1, 1)
    AttentionPath path;
    FeaturePyramid pose;
};

/// Parameter-name prefixes: "text.", "img_enc.", "pose_enc.", "attn.", "up.", "head.", "d2.".
class Stage2Model {
public:
    Stage2Model(const Stage2Config& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        nn::Rng rng(seed);
        text_ = TextEncoder(params_, "text.", {cfg.vocab_size, cfg.embed_dim, cfg.text_hidden}, rng);
        const int m = cfg.scales;
        int in_img = 3, in_pose = cfg.joints;
        for (int k = 1; k <= m; ++k) {
            const int ch = cfg.g_width << (k - 1);
            img_enc_.emplace_back(params_, "img_enc.block" + std::to_string(k), in_img, ch, 3, 2, 1, rng);
            pose_enc_.emplace_back(params_, "pose_enc.block" + std::to_string(k), in_pose, ch, 3, 2, 1, rng);
            in_img = in_pose = ch;
        }
        for (int i = 1; i <= m; ++i) {
            const int l = cfg.scale_channels(i);
            const std::string s = std::to_string(i);
            text_proj_.push_back(params_.add("attn.W" + s, nn::normal_tensor({l, cfg.text_hidden}, 1.0 / std::sqrt(static_cast<double>(cfg.text_hidden)), rng)));
            region_proj_.push_back(params_.add("attn.U" + s, nn::normal_tensor({cfg.text_hidden, l}, 1.0 / std::sqrt(static_cast<double>(l)), rng)));
            const int in = 2 * l + (i > 1 ? up_channels(i - 1) : 0);
            up_.emplace_back(params_, "up.block" + s, in, up_channels(i), 3, 1, 1, rng);
        }
        head_ = nn::Conv2d(params_, "head.conv", up_channels(m), 3, 3, 1, 1, rng, 1.0);

        const int d1 = cfg.d_width, d2 = 2 * d1, d3 = 4 * d1, J = cfg.joints, t = cfg.text_cond;
        d_conv_.emplace_back(params_, "d2.conv1", 3, d1, 3, 2, 1, rng);
        d_conv_.emplace_back(params_, "d2.conv2", d1, d2, 3, 2, 1, rng);
        d_conv_.emplace_back(params_, "d2.conv3", d2, d3, 3, 2, 1, rng);
        d_text_ = nn::Linear(params_, "d2.text", cfg.text_hidden, t, rng, std::sqrt(2.0));
        d_head_text_ = nn::Conv2d(params_, "d2.head_text", d3 + t, d3, 3, 1, 1, rng);
        d_head_pose_ = nn::Conv2d(params_, "d2.head_pose", d3 + J, d3, 3, 1, 1, rng);
        d_head_joint_ = nn::Conv2d(params_, "d2.head_joint", d3 + t + J, d3, 3, 1, 1, rng);
        d_out_text_ = nn::Linear(params_, "d2.out_text", d3, 1, rng);
        d_out_pose_ = nn::Linear(params_, "d2.out_pose", d3, 1, rng);
        d_out_joint_ = nn::Linear(params_, "d2.out_joint", d3, 1, rng);
    }

    const Stage2Config& config() const { return cfg_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    const TextEncoder& text_encoder() const { return text_; }

    /// Channels of u_i.
    int up_channels(int i) const { return i < cfg_.scales ? cfg_.scale_channels(i + 1) : cfg_.g_width; }

    /// m stride-2 blocks; result[i-1] = v_i with scale 1 the deepest.
    FeaturePyramid encode_image(const Var& images) const {
        check(images, 3, "image");
        return run_encoder(img_enc_, images);
    }

    FeaturePyramid encode_pose(const Var& heatmaps) const {
        check(heatmaps, cfg_.joints, "pose heatmap");
        return run_encoder(pose_enc_, heatmaps);
    }

    /// Image encoding and per-scale text-to-visual attention. Both image synthesis and
    /// the similarity-loss feature extraction go through this one function.
    AttentionPath attend(const Var& images, const TextBatch& text) const {
        AttentionPath p;
        p.visual = encode_image(images);
        const int B = images.dim(0);
        for (int i = 1; i <= cfg_.scales; ++i) {
            std::vector<Var> zs;
            for (int b = 0; b < B; ++b) {
                const Var e_hat = attention::project_text(text.words[b], text_proj_[i - 1]);
                zs.push_back(attention::text_to_visual_attention(e_hat, ag::select(p.visual[i - 1], b), text.lengths[b]));
            }
            p.context.push_back(ag::stack(zs));
        }
        return p;
    }

    /// u_i = F_up_i(z_i, s_i, u_{i-1}): channel concat, conv, leaky ReLU, nearest 2x.
    Var attentional_upsample(int i, const Var& z, const Var& s, const std::optional<Var>& u_prev) const {
        if (i < 1 || i > cfg_.scales) throw ShapeError("scale index out of range");
        if (i == 1 && u_prev) throw ShapeError("the first attentional upsampling takes no previous state");
        if (i > 1 && !u_prev) throw ShapeError("attentional upsampling at scale > 1 needs the previous state");
        std::vector<Var> parts{z, s};
        if (u_prev) parts.push_back(*u_prev);
        for (const auto& p : parts)
            if (p.value().rank() != 4 || p.dim(2) != z.dim(2) || p.dim(3) != z.dim(3) || p.dim(0) != z.dim(0))
                throw ShapeError("attentional upsampling inputs are misaligned at scale " + std::to_string(i));
        return ag::upsample_nearest2x(ag::leaky_relu(up_[i - 1](ag::concat(parts, 1))));
    }

    GeneratorOutput generate(const Var& images, const Var& heatmaps, const TextBatch& text) const {
        GeneratorOutput out;
        out.path = attend(images, text);
        out.pose = encode_pose(heatmaps);
        std::optional<Var> u;
        for (int i = 1; i <= cfg_.scales; ++i)
            u = attentional_upsample(i, out.path.context[i - 1], out.pose[i - 1], u);
        out.image = ag::tanh(head_(*u));
        return out;
    }

    /// v̂_i = U_i v̄_i for every scale of every image in the batch.
    std::vector<attention::RegionPyramid> project_regions(const FeaturePyramid& visual) const {
        const int B = visual.front().dim(0);
        std::vector<attention::RegionPyramid> out(B);
        for (int b = 0; b < B; ++b)
            for (int i = 1; i <= cfg_.scales; ++i)
                out[b].push_back(attention::project_regions(ag::select(visual[i - 1], b), region_proj_[i - 1]));
        return out;
    }

    struct Judgement {
        Var text, pose, joint;  ///< probabilities, [B] each
    };

    /// D2 with its three conditional heads.
    Judgement discriminate(const Var& images, const TextBatch& text, const Var& heatmaps) const {
        using namespace ag;
        check(images, 3, "image");
        check(heatmaps, cfg_.joints, "pose heatmap");
        Var h = images;
        for (const auto& c : d_conv_) h = leaky_relu(c(h));
        const int hh = h.dim(2), ww = h.dim(3);
        const Var tcond = broadcast_spatial(leaky_relu(d_text_(sentence_summary(text))), hh, ww);
        const Var pcond = avg_pool(heatmaps, cfg_.height / hh);
        auto head = [&](const nn::Conv2d& conv, const nn::Linear& out, std::vector<Var> parts) {
            const Var f = leaky_relu(conv(concat(parts, 1)));
            return reshape(sigmoid(out(mean_spatial(f))), {images.dim(0)});
        };
        return {head(d_head_text_, d_out_text_, {h, tcond}), head(d_head_pose_, d_out_pose_, {h, pcond}),
                head(d_head_joint_, d_out_joint_, {h, tcond, pcond})};
    }

    std::vector<Var> generator_params(bool include_text = true) const {
        std::vector<Var> out;
        for (const auto& e : params_.entries()) {
            if (e.name.rfind("d2.", 0) == 0) continue;
            if (!include_text && e.name.rfind("text.", 0) == 0) continue;
            out.push_back(e.var);
        }
        return out;
    }
    std::vector<Var> discriminator_params() const { return params_.with_prefix("d2."); }

    const std::vector<nn::Conv2d>& image_encoder_blocks() const { return img_enc_; }

private:
    /// Mean of the real word columns of e, [B, L].
    static Var sentence_summary(const TextBatch& text) {
        std::vector<Var> rows;
        for (int b = 0; b < text.batch(); ++b) {
            const int n = text.lengths[b];
            const Var cols = ag::slice(text.words[b], 1, 0, n);
            rows.push_back(ag::reshape(ag::matmul(cols, ag::constant(Tensor({n, 1}, 1.0 / n))), {cols.dim(0)}));
        }
        return ag::stack(rows);
    }

    FeaturePyramid run_encoder(const std::vector<nn::Conv2d>& blocks, const Var& x) const {
        FeaturePyramid deep_first(blocks.size());
        Var h = x;
        for (std::size_t k = 0; k < blocks.size(); ++k) {
            h = ag::leaky_relu(blocks[k](h));
            deep_first[blocks.size() - 1 - k] = h;
        }
        return deep_first;
    }

    void check(const Var& x, int channels, const char* what) const {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != channels || s[2] != cfg_.height || s[3] != cfg_.width)
            throw ShapeError(std::string(what) + " batch " + shape_str(s) + " does not match [B," +
                             std::to_string(channels) + "," + std::to_string(cfg_.height) + "," +
                             std::to_string(cfg_.width) + "]");
    }

    Stage2Config cfg_;
    nn::ParamSet params_;
    TextEncoder text_;
    std::vector<nn::Conv2d> img_enc_, pose_enc_, up_;
    std::vector<Var> text_proj_, region_proj_;
    nn::Conv2d head_;
    std::vector<nn::Conv2d> d_conv_;
    nn::Linear d_text_;
    nn::Conv2d d_head_text_, d_head_pose_, d_head_joint_;
    nn::Linear d_out_text_, d_out_pose_, d_out_joint_;
};

// ------------------------------------------------------------------ objectives

/// Detached copy of a text batch (no gradient into the encoder).
inline TextBatch detach(const TextBatch& t) {
    TextBatch out;
    for (const auto& w : t.words) out.words.push_back(w.detach());
    out.sentence = t.sentence.detach();
    out.lengths = t.lengths;
    return out;
}

/// Sum over the text, pose, and text+pose conditions of the real/fake cross-entropy pair.
inline Var d_loss(const Stage2Model& model, const Var& real, const Var& fake, const TextBatch& text, const Var& heatmaps) {
    const TextBatch t = detach(text);
    const auto r = model.discriminate(real, t, heatmaps);
    const auto f = model.discriminate(fake.detach(), t, heatmaps);
    return ag::add_n({loss::discriminator_bce(r.text, f.text), loss::discriminator_bce(r.pose, f.pose),
                      loss::discriminator_bce(r.joint, f.joint)});
}

struct GeneratorLossTerms {
    Var total, adversarial, l1, similarity;
};

/// L_G2 + γ1 · masked L1 + γ2 · L_MS, with L_MS computed on the generated images' pyramids.
/// γ2 = 0 skips the similarity term (it is then reported as 0).
inline GeneratorLossTerms g_loss(const Stage2Model& model, const Var& fake, const Var& target, const Tensor& masks,
                                 const TextBatch& text, const Var& heatmaps, double gamma1, double gamma2) {
    GeneratorLossTerms t;
    const auto j = model.discriminate(fake, text, heatmaps);
    t.adversarial = ag::add_n({loss::generator_bce(j.text), loss::generator_bce(j.pose), loss::generator_bce(j.joint)});
    t.l1 = loss::masked_l1(fake, target, masks);
    std::vector<Var> terms{t.adversarial, ag::scale(t.l1, gamma1)};
    if (gamma2 != 0.0) {
        const AttentionPath gen = model.attend(fake, text);
        std::vector<attention::WordMatrix> words;
        for (int b = 0; b < text.batch(); ++b) words.push_back({text.words[b], text.lengths[b]});
        t.similarity = attention::multimodal_similarity_loss(model.project_regions(gen.visual), words);
        terms.push_back(ag::scale(t.similarity, gamma2));
    } else {
        t.similarity = ag::constant(Tensor::scalar(0.0));
    }
    t.total = ag::add_n(terms);
    return t;
}

}  // namespace tgps::stage2
