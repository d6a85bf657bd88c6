#pragma once

// Gradient-check cases shared by the unit suite and the acceptance binary.
// Central differences (h = 1e-5) against reverse mode on miniature configurations.

#include "mini.hpp"

namespace grad_cases {

using namespace tgps;

inline std::vector<std::string> names_of(const nn::ParamSet& ps, const std::string& prefix = "") {
    std::vector<std::string> out;
    for (const auto& e : ps.entries())
        if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
    return out;
}

inline std::vector<ag::Var> all_but(const nn::ParamSet& ps, const std::string& prefix, std::vector<std::string>& names) {
    std::vector<ag::Var> out;
    names.clear();
    for (const auto& e : ps.entries())
        if (e.name.rfind(prefix, 0) != 0) {
            out.push_back(e.var);
            names.push_back(e.name);
        }
    return out;
}

// Zero-initialized biases on mostly-zero heatmaps put many pre-activations exactly
// on the leaky-ReLU kink, where central differences average the two slopes.
inline void jitter_biases(nn::ParamSet& ps, std::uint64_t seed) {
    oracle::Rng rng(seed);
    for (const auto& e : ps.entries())
        if (e.name.size() > 5 && e.name.compare(e.name.size() - 5, 5, ".bias") == 0)
            for (auto& x : ag::Var(e.var).mutable_value().data) x = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
}

struct Stage1Fixture {
    Vocab vocab = mini::vocab();
    stage1::Stage1Model model{mini::stage1_config(vocab.size()), 21};
    std::vector<Stage1Example> ex = mini::stage1_examples(2, 21, vocab);
    std::vector<TokenSeq> toks;
    std::vector<int> labels;
    Tensor real, basic;

    Stage1Fixture() {
        jitter_biases(model.params(), 31);
        std::vector<Tensor> r, b;
        for (const auto& e : ex) {
            toks.push_back(e.tokens);
            labels.push_back(e.orientation);
            r.push_back(e.target);
            b.push_back(e.basic);
        }
        real = mini::batch_of(r);
        basic = mini::batch_of(b);
    }
};

struct Stage2Fixture {
    Vocab vocab = mini::vocab();
    stage2::Stage2Model model{mini::stage2_config(vocab.size(), 2), 22};
    std::vector<TokenSeq> toks;
    Tensor src, tgt, pose, masks;

    Stage2Fixture() {
        jitter_biases(model.params(), 32);
        const auto ex = mini::stage2_examples(2, 22, vocab);
        std::vector<Tensor> s, t, p, k;
        for (const auto& e : ex) {
            toks.push_back(tokenize(mini::kCaptions[toks.size()], vocab, 4));  // N = 4
            s.push_back(e.source_image);
            t.push_back(e.target_image);
            p.push_back(e.target_heatmap);
            k.push_back(e.mask);
        }
        src = mini::batch_of(s);
        tgt = mini::batch_of(t);
        pose = mini::batch_of(p);
        masks = mini::batch_of(k);
    }
};

inline oracle::GradReport stage1_generator() {
    Stage1Fixture f;
    auto loss = [&] {
        const TextBatch t = f.model.text_encoder().encode(f.toks);
        const ag::Var fake = f.model.generate(ag::constant(f.basic), t.sentence);
        const ag::Var logits = f.model.orientation_logits(t.sentence);
        return stage1::g_loss(f.model, fake, ag::constant(f.real), t.sentence, logits, f.labels, 10, 1).total;
    };
    std::vector<std::string> names;
    const auto params = all_but(f.model.params(), "d1.", names);
    // The loss is O(10), so central differences carry ~1e-10 of round-off; gradients
    // below 1e-5 are compared against that floor instead of their own size.
    return oracle::gradient_check(loss, params, names, 1e-5, 1e-5);
}

inline oracle::GradReport stage1_discriminator() {
    Stage1Fixture f;
    auto loss = [&] {
        const TextBatch t = f.model.text_encoder().encode(f.toks);
        const ag::Var fake = f.model.generate(ag::constant(f.basic), t.sentence);
        return stage1::d_loss(f.model, ag::constant(f.real), fake, t.sentence.detach());
    };
    return oracle::gradient_check(loss, f.model.discriminator_params(), names_of(f.model.params(), "d1."));
}

inline oracle::GradReport stage2_generator() {
    Stage2Fixture f;
    auto loss = [&] {
        const TextBatch t = f.model.text_encoder().encode(f.toks);
        const ag::Var fake = f.model.generate(ag::constant(f.src), ag::constant(f.pose), t).image;
        return stage2::g_loss(f.model, fake, ag::constant(f.tgt), f.masks, t, ag::constant(f.pose), 10, 1).total;
    };
    std::vector<std::string> names;
    const auto params = all_but(f.model.params(), "d2.", names);
    return oracle::gradient_check(loss, params, names);
}

inline oracle::GradReport stage2_discriminator() {
    Stage2Fixture f;
    auto loss = [&] {
        const TextBatch t = f.model.text_encoder().encode(f.toks);
        const ag::Var fake = f.model.generate(ag::constant(f.src), ag::constant(f.pose), t).image;
        return stage2::d_loss(f.model, ag::constant(f.tgt), fake, t, ag::constant(f.pose));
    };
    return oracle::gradient_check(loss, f.model.discriminator_params(), names_of(f.model.params(), "d2."));
}

inline oracle::GradReport similarity_loss() {
    // L_MS on real-image pyramids, differentiated into the encoders, U_i, and the text encoder.
    Stage2Fixture f;
    auto loss = [&] {
        const TextBatch t = f.model.text_encoder().encode(f.toks);
        const auto regions = f.model.project_regions(f.model.attend(ag::constant(f.src), t).visual);
        std::vector<attention::WordMatrix> words;
        for (int b = 0; b < t.batch(); ++b) words.push_back({t.words[b], t.lengths[b]});
        return attention::multimodal_similarity_loss(regions, words);
    };
    std::vector<ag::Var> params;
    std::vector<std::string> names;
    for (const auto& e : f.model.params().entries())
        if (e.name.rfind("img_enc.", 0) == 0 || e.name.rfind("attn.U", 0) == 0 || e.name.rfind("text.", 0) == 0) {
            params.push_back(e.var);
            names.push_back(e.name);
        }
    return oracle::gradient_check(loss, params, names);
}

inline std::vector<std::pair<std::string, std::function<oracle::GradReport()>>> all() {
    return {{"stage1 generator total", stage1_generator},
            {"stage1 discriminator", stage1_discriminator},
            {"stage2 generator total", stage2_generator},
            {"stage2 discriminator", stage2_discriminator},
            {"similarity loss", similarity_loss}};
}

}  // namespace grad_cases
