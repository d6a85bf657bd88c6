#pragma once

/// \file attention.hpp
/// \brief Word/region attention, the multi-scale visual-to-text distance, and the
/// batch multimodal similarity loss.
///
/// Conventions: text matrices are [L, N] (one column per word position, only the
/// first n_real columns are real words); visual features are [l, h, w] and are
/// flattened to [l, h*w] regions.

#include <vector>

#include "tgps/autograd.hpp"

namespace tgps::attention {

using ag::Var;

/// ê = W e.  W [l, L], e [L, N] -> [l, N].
inline Var project_text(const Var& e, const Var& W) { return ag::matmul(W, e); }

/// Region-side projection v̂ = U v̄.  U [L, l], visual [l, h, w] -> [L, h*w].
inline Var project_regions(const Var& visual, const Var& U) {
    const int l = visual.dim(0);
    return ag::matmul(U, ag::reshape(visual, {l, visual.dim(1) * visual.dim(2)}));
}

/// Word weights A [N, h*w]: for each region, softmax over the real words of ê^T v̄.
inline Var text_to_visual_weights(const Var& e_hat, const Var& visual, int n_real) {
    if (n_real < 1) throw ShapeError("text_to_visual_attention needs at least one real word");
    if (visual.value().rank() != 3 || e_hat.value().rank() != 2 || visual.dim(0) != e_hat.dim(0))
        throw ShapeError("text_to_visual_attention: ê " + shape_str(e_hat.shape()) + " vs v " + shape_str(visual.shape()));
    if (n_real > e_hat.dim(1)) throw ShapeError("n_real exceeds word count");
    const int l = visual.dim(0);
    const Var v_bar = ag::reshape(visual, {l, visual.dim(1) * visual.dim(2)});
    return ag::softmax(ag::matmul(ag::transpose(e_hat), v_bar), 0, n_real);
}

/// z = ê Softmax_words(ê^T v̄), reshaped back to [l, h, w].
inline Var text_to_visual_attention(const Var& e_hat, const Var& visual, int n_real) {
    const Var A = text_to_visual_weights(e_hat, visual, n_real);
    return ag::reshape(ag::matmul(e_hat, A), visual.shape());
}

/// Region weights B [h*w, N]: for each word, softmax over regions of v̂^T e.
inline Var visual_to_text_weights(const Var& v_hat, const Var& e) {
    if (v_hat.value().rank() != 2 || e.value().rank() != 2 || v_hat.dim(0) != e.dim(0))
        throw ShapeError("visual_to_text_attention: v̂ " + shape_str(v_hat.shape()) + " vs e " + shape_str(e.shape()));
    return ag::softmax(ag::matmul(ag::transpose(v_hat), e), 0);
}

/// c = v̂ Softmax_regions(v̂^T e) -> [L, N]; column j is the region context of word j.
inline Var visual_to_text_attention(const Var& v_hat, const Var& e, int n_real) {
    if (n_real < 1 || n_real > e.dim(1)) throw ShapeError("visual_to_text_attention: invalid n_real");
    return ag::matmul(v_hat, visual_to_text_weights(v_hat, e));
}

/// D = sum over scales of log sum_{j < n_real} exp(cos(c_ij, e_j)).
inline Var visual_text_distance(const std::vector<Var>& contexts, const Var& e, int n_real) {
    if (contexts.empty()) throw ShapeError("visual_text_distance needs at least one scale");
    std::vector<Var> terms;
    for (const auto& c : contexts) terms.push_back(ag::logsumexp(ag::cosine_columns(c, e, n_real)));
    return ag::add_n(terms);
}

/// Image-side input of the similarity loss: projected regions v̂ per scale.
using RegionPyramid = std::vector<Var>;

struct WordMatrix {
    Var e;       ///< [L, N]
    int n_real;  ///< valid leading columns
};

/// Λ(i, j) = D(image i, text j) as a [I, I] Var.
inline Var distance_matrix(const std::vector<RegionPyramid>& images, const std::vector<WordMatrix>& texts) {
    const int I = static_cast<int>(images.size());
    if (static_cast<int>(texts.size()) != I) throw ShapeError("image and text batch sizes differ");
    std::vector<Var> entries;
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < I; ++j) {
            std::vector<Var> contexts;
            for (const auto& v_hat : images[i])
                contexts.push_back(visual_to_text_attention(v_hat, texts[j].e, texts[j].n_real));
            entries.push_back(visual_text_distance(contexts, texts[j].e, texts[j].n_real));
        }
    return ag::reshape(ag::concat(entries, 0), {I, I});
}

/// L_MS = -sum_i log Softmax_rows(Λ)(i,i) - sum_i log Softmax_cols(Λ)(i,i).
inline Var similarity_loss_from_matrix(const Var& lambda) {
    if (lambda.value().rank() != 2 || lambda.dim(0) != lambda.dim(1))
        throw ShapeError("similarity matrix must be square");
    const int I = lambda.dim(0);
    if (I < 2) throw ShapeError("multimodal similarity loss needs a batch of at least 2");
    Tensor eye({I, I});
    for (int i = 0; i < I; ++i) eye.at(i, i) = 1.0;
    const Var text_given_image = ag::sum(ag::mul_const(ag::log_softmax(lambda, 1), eye));
    const Var image_given_text = ag::sum(ag::mul_const(ag::log_softmax(lambda, 0), eye));
    return ag::scale(ag::add(text_given_image, image_given_text), -1.0);
}

inline Var multimodal_similarity_loss(const std::vector<RegionPyramid>& images, const std::vector<WordMatrix>& texts) {
    if (images.size() < 2) throw ShapeError("multimodal similarity loss needs a batch of at least 2");
    return similarity_loss_from_matrix(distance_matrix(images, texts));
}

// ------------------------------------------------------------------ value API

inline Tensor project_text(const Tensor& e, const Tensor& W) {
    ag::NoGradGuard ng;
    return project_text(ag::constant(e), ag::constant(W)).value();
}

inline Tensor text_to_visual_attention(const Tensor& e_hat, const Tensor& visual, int n_real) {
    ag::NoGradGuard ng;
    return text_to_visual_attention(ag::constant(e_hat), ag::constant(visual), n_real).value();
}

inline Tensor visual_to_text_attention(const Tensor& v_hat, const Tensor& e, int n_real) {
    ag::NoGradGuard ng;
    return visual_to_text_attention(ag::constant(v_hat), ag::constant(e), n_real).value();
}

inline double visual_text_distance(const std::vector<Tensor>& contexts, const Tensor& e, int n_real) {
    ag::NoGradGuard ng;
    std::vector<Var> cs;
    for (const auto& c : contexts) cs.push_back(ag::constant(c));
    return visual_text_distance(cs, ag::constant(e), n_real).item();
}

inline double similarity_loss_from_matrix(const Tensor& lambda) {
    ag::NoGradGuard ng;
    return similarity_loss_from_matrix(ag::constant(lambda)).item();
}

}  // namespace tgps::attention
