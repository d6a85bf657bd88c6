#pragma once

/// \file pipeline.hpp
/// \brief Frozen models restored from checkpoints and the chained text -> pose -> image inference.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tgps/checkpoint.hpp"
#include "tgps/config.hpp"
#include "tgps/pose_prior.hpp"
#include "tgps/stage1.hpp"
#include "tgps/stage2.hpp"
#include "tgps/text.hpp"

namespace tgps {

inline TrainConfig config_from(const Checkpoint& c) {
    try {
        TrainConfig cfg = c.config.get<TrainConfig>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config is malformed: ") + e.what());
    }
}

struct Stage1Bundle {
    TrainConfig cfg;
    Vocab vocab;
    BasicPoseSet basics;
    std::vector<std::string> phrasebook;
    std::unique_ptr<stage1::Stage1Model> model;
    std::string version;
};

struct Stage2Bundle {
    TrainConfig cfg;
    Vocab vocab;
    std::unique_ptr<stage2::Stage2Model> model;
    std::string version;
};

inline Stage1Bundle load_stage1(const std::filesystem::path& path) {
    const Checkpoint c = load_checkpoint(path);
    if (c.kind != "stage1") throw FormatError(path.string() + " is a '" + c.kind + "' checkpoint, expected stage1");
    Stage1Bundle b;
    b.cfg = config_from(c);
    b.vocab = Vocab::from_json(c.extra.at("vocab"));
    b.basics = basic_poses_from_json(c.extra.at("basics"));
    b.phrasebook = c.extra.value("phrasebook", default_phrasebook(b.basics.K()));
    b.model = std::make_unique<stage1::Stage1Model>(stage1::Stage1Config::from(b.cfg, b.vocab.size()), b.cfg.seed);
    restore(b.model->params(), c.tensors);
    b.version = model_version(path);
    return b;
}

inline Stage2Bundle load_stage2(const std::filesystem::path& path) {
    const Checkpoint c = load_checkpoint(path);
    if (c.kind != "stage2") throw FormatError(path.string() + " is a '" + c.kind + "' checkpoint, expected stage2");
    Stage2Bundle b;
    b.cfg = config_from(c);
    b.vocab = Vocab::from_json(c.extra.at("vocab"));
    b.model = std::make_unique<stage2::Stage2Model>(stage2::Stage2Config::from(b.cfg, b.vocab.size()), b.cfg.seed);
    restore(b.model->params(), c.tensors);
    b.version = model_version(path);
    return b;
}

/// Tokenizes and rejects captions whose words are all out of vocabulary.
inline TokenSeq tokenize_known(const Caption& caption, const Vocab& vocab, int n_max) {
    TokenSeq s = tokenize(caption, vocab, n_max);
    if (s.unknown_count() == s.word_count()) throw VocabularyError("caption has no in-vocabulary word");
    return s;
}

// ---------------------------------------------------------------- stage I value API

/// G1 on one basic-pose heatmap and sentence vector.
inline Heatmap generate_pose(const stage1::Stage1Model& model, const Heatmap& basic, const Tensor& phi) {
    ag::NoGradGuard ng;
    const Tensor& b = basic.data;
    const Var out = model.generate(ag::constant(b.reshaped({1, b.dim(0), b.dim(1), b.dim(2)})),
                                   ag::constant(phi.reshaped({1, static_cast<int>(phi.size())})));
    return Heatmap(out.value().reshaped(b.shape));
}

/// G2 on one reference image, target heatmap, and encoded caption.
inline ImageTensor generate_image(const stage2::Stage2Model& model, const ImageTensor& x, const Heatmap& pose,
                                  const TokenSeq& tokens) {
    ag::NoGradGuard ng;
    const auto& xs = x.data.shape;
    const auto& ps = pose.data.shape;
    const TextBatch text = model.text_encoder().encode({tokens});
    const auto out = model.generate(ag::constant(x.data.reshaped({1, xs[0], xs[1], xs[2]})),
                                    ag::constant(pose.data.reshaped({1, ps[0], ps[1], ps[2]})), text);
    return ImageTensor(out.image.value().reshaped(xs));
}

struct Synthesis {
    int orientation = 0;
    std::vector<double> orientation_probs;
    Heatmap pose_heatmap;  ///< p̃
    Pose pose;             ///< keypoints read from p̃
    ImageTensor image;     ///< x̃
};

/// Text -> orientation -> basic pose -> refined pose -> image. Read-only over both models.
inline Synthesis synthesize(const ImageTensor& x, const Caption& caption, const Stage1Bundle& s1, const Stage2Bundle& s2) {
    const Frame f = s1.basics.frame();
    if (x.height() != f.height || x.width() != f.width)
        throw ShapeError("reference image is " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                         ", expected " + std::to_string(f.height) + "x" + std::to_string(f.width));
    Synthesis out;
    const TokenSeq t1 = tokenize_known(caption, s1.vocab, s1.cfg.N_max);
    const TextFeatures feats = s1.model->text_encoder().encode_one(t1);
    const auto pred = stage1::predict_orientation(*s1.model, feats.phi);
    out.orientation = pred.index;
    out.orientation_probs = pred.probs;
    const Heatmap basic = render_heatmap(s1.basics.poses[pred.index], s1.cfg.r);
    out.pose_heatmap = generate_pose(*s1.model, basic, feats.phi);
    out.pose = heatmap_to_keypoints(out.pose_heatmap);
    const TokenSeq t2 = tokenize_known(caption, s2.vocab, s2.cfg.N_max);
    out.image = generate_image(*s2.model, x, out.pose_heatmap, t2);
    return out;
}

/// Heatmap rendered as an RGB image: the maximum over joints, white on black.
inline ImageTensor heatmap_visual(const Heatmap& h) {
    Tensor t({3, h.height(), h.width()}, -1.0);
    for (int y = 0; y < h.height(); ++y)
        for (int x = 0; x < h.width(); ++x) {
            double m = 0;
            for (int j = 0; j < h.joints(); ++j) m = std::max(m, h.data.at(j, y, x));
            for (int c = 0; c < 3; ++c) t.at(c, y, x) = 2 * m - 1;
        }
    return ImageTensor(std::move(t));
}

}  // namespace tgps
