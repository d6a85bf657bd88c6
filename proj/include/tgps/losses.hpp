#pragma once

/// \file losses.hpp
/// \brief Adversarial, reconstruction, and classification loss terms shared by both stages.

#include <span>
#include <vector>

#include "tgps/autograd.hpp"

namespace tgps::loss {

using ag::Var;

inline constexpr double kProbEps = 1e-7;

/// -mean log D(real) - mean log(1 - D(fake)), probabilities clamped to [eps, 1-eps].
inline Var discriminator_bce(const Var& p_real, const Var& p_fake, double eps = kProbEps) {
    const Var real_term = ag::mean(ag::clamped_log(p_real, eps));
    const Var fake_term = ag::mean(ag::clamped_log(ag::add_scalar(ag::scale(p_fake, -1.0), 1.0), eps));
    return ag::scale(ag::add(real_term, fake_term), -1.0);
}

/// -mean log D(fake).
inline Var generator_bce(const Var& p_fake, double eps = kProbEps) {
    return ag::scale(ag::mean(ag::clamped_log(p_fake, eps)), -1.0);
}

/// Mean of squared differences over every entry.
inline Var mse(const Var& a, const Var& b) { return ag::mean(ag::square(ag::sub(a, b))); }

/// Mean over the batch of -log softmax(logits)[label]; logits [B, K].
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != B) throw ShapeError("cross_entropy: label count differs from batch");
    Tensor pick({B, K});
    for (int b = 0; b < B; ++b) {
        if (labels[b] < 0 || labels[b] >= K) throw ShapeError("cross_entropy: label out of range");
        pick.at(b, labels[b]) = -1.0 / B;
    }
    return ag::sum(ag::mul_const(ag::log_softmax(logits, 1), pick));
}

/// Broadcasts masks [B,1,H,W] across `channels`.
inline Tensor broadcast_mask(const Tensor& masks, int channels) {
    const int B = masks.dim(0), H = masks.dim(2), W = masks.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor out({B, channels, H, W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < channels; ++c)
            std::copy_n(masks.ptr() + b * hw, hw, out.ptr() + (static_cast<std::size_t>(b) * channels + c) * hw);
    return out;
}

/// mean |(generated - target) ⊙ M| over all entries; masks [B,1,H,W] broadcast across channels.
inline Var masked_l1(const Var& generated, const Var& target, const Tensor& masks) {
    require_same_shape(generated.value(), target.value(), "masked_l1");
    if (masks.rank() != 4 || masks.dim(0) != generated.dim(0) || masks.dim(1) != 1 || masks.dim(2) != generated.dim(2) ||
        masks.dim(3) != generated.dim(3))
        throw ShapeError("masked_l1: mask shape " + shape_str(masks.shape) + " vs image " + shape_str(generated.shape()));
    return ag::mean(ag::abs(ag::mul_const(ag::sub(generated, target), broadcast_mask(masks, generated.dim(1)))));
}

}  // namespace tgps::loss
