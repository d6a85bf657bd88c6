#pragma once

/// \file training.hpp
/// \brief Dataset preparation (basic poses, phrases, vocabulary), per-stage example
/// tensors, the alternating D/G training loops, loss curves, and checkpoint assembly.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "tgps/checkpoint.hpp"
#include "tgps/config.hpp"
#include "tgps/dataset.hpp"
#include "tgps/log.hpp"
#include "tgps/pose_prior.hpp"
#include "tgps/stage1.hpp"
#include "tgps/stage2.hpp"
#include "tgps/text.hpp"

namespace tgps {

// ---------------------------------------------------------------- loss curves

struct LossRecord {
    long step = 0;
    std::string name;
    double value = 0.0;
};

using LossCurve = std::vector<LossRecord>;

inline void write_loss_csv(const LossCurve& curve, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "step,loss_name,value\n";
    char buf[64];
    for (const auto& r : curve) {
        std::snprintf(buf, sizeof buf, "%.17g", r.value);
        out << r.step << ',' << r.name << ',' << buf << '\n';
    }
}

/// Last recorded value of `name`, or NaN.
inline double final_value(const LossCurve& curve, const std::string& name) {
    for (auto it = curve.rbegin(); it != curve.rend(); ++it)
        if (it->name == name) return it->value;
    return std::nan("");
}

/// Mean of the last `window` values of `name`.
inline double tail_mean(const LossCurve& curve, const std::string& name, int window) {
    double s = 0;
    int n = 0;
    for (auto it = curve.rbegin(); it != curve.rend() && n < window; ++it)
        if (it->name == name) {
            s += it->value;
            ++n;
        }
    return n ? s / n : std::nan("");
}

// ---------------------------------------------------------------- preparation

struct PreparedData {
    std::vector<Sample> samples;  ///< captions carry their orientation phrase
    BasicPoseSet basics;
    std::vector<std::string> phrasebook;
    Vocab vocab;
};

inline BasicPoseSet cluster_samples(const std::vector<Sample>& samples, const TrainConfig& cfg) {
    std::vector<Pose> poses;
    std::vector<std::string> ids;
    for (const auto& s : samples) {
        poses.push_back(s.pose);
        ids.push_back(s.id);
    }
    KMeansOptions opt;
    opt.restarts = cfg.kmeans_restarts;
    BasicPoseSet b = cluster_basic_poses(poses, cfg.K, cfg.seed, ids, opt).basics;
    sort_by_facing(b);
    return b;
}

/// Clusters (unless `basics` is given), appends orientation phrases, and builds the
/// vocabulary (unless `vocab` is given).
inline PreparedData prepare_data(std::vector<Sample> samples, const TrainConfig& cfg,
                                 std::optional<BasicPoseSet> basics = std::nullopt,
                                 std::optional<Vocab> vocab = std::nullopt) {
    if (samples.empty()) throw ValidationError("manifest", "manifest has no samples");
    PreparedData d;
    d.basics = basics ? std::move(*basics) : cluster_samples(samples, cfg);
    if (d.basics.K() != cfg.K) throw ConfigError("basic-pose set has K=" + std::to_string(d.basics.K()) + ", config K=" + std::to_string(cfg.K));
    d.phrasebook = default_phrasebook(cfg.K);
    for (auto& s : samples) s = append_orientation_phrase(std::move(s), d.basics, d.phrasebook);
    if (vocab) {
        d.vocab = std::move(*vocab);
    } else {
        std::vector<Caption> caps;
        for (const auto& s : samples) caps.push_back(s.caption);
        for (const auto& p : d.phrasebook) caps.push_back(p);
        d.vocab = Vocab::build(caps, cfg.min_freq);
    }
    d.samples = std::move(samples);
    return d;
}

struct Stage1Example {
    std::string id;
    TokenSeq tokens;
    Tensor target;  ///< [J,H,W]
    Tensor basic;   ///< [J,H,W], basic pose of the target's orientation
    int orientation = 0;
};

inline std::vector<Stage1Example> stage1_examples(const PreparedData& d, const TrainConfig& cfg) {
    std::vector<Heatmap> basic_maps;
    for (const auto& p : d.basics.poses) basic_maps.push_back(render_heatmap(p, cfg.r));
    std::vector<Stage1Example> out;
    for (const auto& s : d.samples) {
        Stage1Example e;
        e.id = s.id;
        e.tokens = tokenize(s.caption, d.vocab, cfg.N_max);
        e.target = render_heatmap(s.pose, cfg.r).data;
        e.orientation = orientation_label(s.pose, d.basics);
        e.basic = basic_maps[e.orientation].data;
        out.push_back(std::move(e));
    }
    return out;
}

struct Stage2Example {
    std::string source_id, target_id;
    TokenSeq tokens;        ///< target caption
    Tensor source_image;    ///< [3,H,W]
    Tensor target_image;    ///< [3,H,W]
    Tensor target_heatmap;  ///< [J,H,W], ground-truth target pose
    Tensor mask;            ///< [1,H,W]
};

inline std::vector<Stage2Example> stage2_examples(const PreparedData& d, const TrainConfig& cfg) {
    const PairIndex pairs = make_pairs(d.samples);
    std::map<int, Tensor> images;
    auto image = [&](int i) -> const Tensor& {
        auto it = images.find(i);
        if (it == images.end()) it = images.emplace(i, d.samples[i].load_image().data).first;
        return it->second;
    };
    std::vector<Stage2Example> out;
    for (const auto& p : pairs.pairs) {
        const Sample& src = d.samples[p.source];
        const Sample& tgt = d.samples[p.target];
        Stage2Example e;
        e.source_id = src.id;
        e.target_id = tgt.id;
        e.tokens = tokenize(tgt.caption, d.vocab, cfg.N_max);
        e.source_image = image(p.source);
        e.target_image = image(p.target);
        e.target_heatmap = render_heatmap(tgt.pose, cfg.r).data;
        e.mask = pose_mask(tgt.pose, cfg.dilation).data;
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------- batching

/// Seeded epoch shuffles; batches run across epoch boundaries.
class BatchSampler {
public:
    BatchSampler(std::size_t n, int batch, std::uint64_t seed) : n_(n), batch_(batch), rng_(seed) {
        if (n == 0) throw ValidationError("dataset", "no training examples");
        reshuffle();
    }
    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        while (static_cast<int>(out.size()) < batch_) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }
    std::size_t n_;
    int batch_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

/// Stacks equally shaped tensors along a new leading axis.
template <class T, class Get>
Tensor stack_field(const std::vector<T>& items, const std::vector<std::size_t>& idx, Get get) {
    const Tensor& first = get(items[idx.front()]);
    Shape s{static_cast<int>(idx.size())};
    s.insert(s.end(), first.shape.begin(), first.shape.end());
    Tensor out(s);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Tensor& t = get(items[idx[b]]);
        require_same_shape(t, first, "batch");
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(b * first.size()));
    }
    return out;
}

struct TrainOptions {
    std::filesystem::path dump_dir;  ///< where a non-finite batch is described; empty: no file
    bool log = true;
};

namespace detail {

inline void check_finite(const std::vector<std::pair<std::string, double>>& losses, long step,
                         const std::vector<std::string>& ids, const TrainOptions& opt, const char* stage) {
    bool ok = true;
    for (const auto& [_, v] : losses) ok = ok && std::isfinite(v);
    if (ok) return;
    nlohmann::json dump{{"stage", stage}, {"step", step}, {"samples", ids}};
    for (const auto& [k, v] : losses) dump["losses"][k] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(std::to_string(v));
    std::string where;
    if (!opt.dump_dir.empty()) {
        std::filesystem::create_directories(opt.dump_dir);
        const auto path = opt.dump_dir / ("nonfinite_" + std::string(stage) + "_step" + std::to_string(step) + ".json");
        std::ofstream(path) << dump.dump(2) << "\n";
        where = " (dump: " + path.string() + ")";
    }
    log_event("error", "nonfinite_loss", dump);
    throw NumericError(std::string(stage) + ": non-finite loss at step " + std::to_string(step) + " on batch " +
                       dump["samples"].dump() + where);
}

inline void record(LossCurve& curve, long step, const std::vector<std::pair<std::string, double>>& losses) {
    for (const auto& [k, v] : losses) curve.push_back({step, k, v});
}

inline void freeze(const std::vector<Var>& params) {
    for (const auto& p : params) p.node()->requires_grad = false;
}

}  // namespace detail

// ---------------------------------------------------------------- stage I loop

/// Alternating 1:1 D1/G1 updates. The classification term trains F_ori and, through
/// the sentence vector, the text encoder; with a detached vector the orientation
/// phrases stayed hard to separate.
inline LossCurve train_stage1(stage1::Stage1Model& model, const std::vector<Stage1Example>& data, const TrainConfig& cfg,
                              const TrainOptions& opt = {}) {
    cfg.validate();
    nn::Adam opt_g(model.generator_params(), {cfg.lr_g, cfg.beta1});
    nn::Adam opt_d(model.discriminator_params(), {cfg.lr_d, cfg.beta1});
    BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed + 101);
    LossCurve curve;
    for (long step = 1; step <= cfg.steps_stage1; ++step) {
        const auto idx = sampler.next();
        std::vector<TokenSeq> toks;
        std::vector<int> labels;
        std::vector<std::string> ids;
        for (auto i : idx) {
            toks.push_back(data[i].tokens);
            labels.push_back(data[i].orientation);
            ids.push_back(data[i].id);
        }
        const Var real = ag::constant(stack_field(data, idx, [](const Stage1Example& e) -> const Tensor& { return e.target; }));
        const Var basic = ag::constant(stack_field(data, idx, [](const Stage1Example& e) -> const Tensor& { return e.basic; }));

        const TextBatch text = model.text_encoder().encode(toks);
        const Var fake = model.generate(basic, text.sentence);

        const Var dl = stage1::d_loss(model, real, fake, text.sentence.detach());
        const Var logits = model.orientation_logits(text.sentence);
        const auto gl = stage1::g_loss(model, fake, real, text.sentence, logits, labels, cfg.lambda1, cfg.lambda2);
        const std::vector<std::pair<std::string, double>> losses{
            {"d_loss", dl.item()},          {"g_adv", gl.adversarial.item()}, {"mse", gl.mse.item()},
            {"mse_weighted", cfg.lambda1 * gl.mse.item()}, {"cls", gl.cls.item()}, {"g_total", gl.total.item()}};
        detail::check_finite(losses, step, ids, opt, "stage1");

        ag::backward(dl);
        opt_d.step();
        ag::backward(gl.total);
        opt_g.step();
        opt_d.zero_grad();  // the generator pass also reached D1

        detail::record(curve, step, losses);
        if (opt.log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps_stage1)) {
            nlohmann::json f{{"step", step}};
            for (const auto& [k, v] : losses) f[k] = v;
            log_event("info", "train_stage1", f);
        }
    }
    return curve;
}

// ---------------------------------------------------------------- stage II loop

/// Alternating 1:1 D2/G2 updates on ground-truth target poses. With `freeze_text`
/// the text encoder parameters receive no updates.
inline LossCurve train_stage2(stage2::Stage2Model& model, const std::vector<Stage2Example>& data, const TrainConfig& cfg,
                              bool freeze_text, const TrainOptions& opt = {}) {
    cfg.validate();
    if (cfg.gamma2 > 0 && cfg.batch_size < 2)
        throw ValidationError("batch_size", "batch_size: the similarity loss needs a batch of at least 2");
    if (freeze_text) detail::freeze(model.params().with_prefix("text."));
    nn::Adam opt_g(model.generator_params(!freeze_text), {cfg.lr_g, cfg.beta1});
    nn::Adam opt_d(model.discriminator_params(), {cfg.lr_d, cfg.beta1});
    BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed + 202);
    LossCurve curve;
    for (long step = 1; step <= cfg.steps_stage2; ++step) {
        const auto idx = sampler.next();
        std::vector<TokenSeq> toks;
        std::vector<std::string> ids;
        for (auto i : idx) {
            toks.push_back(data[i].tokens);
            ids.push_back(data[i].source_id + "->" + data[i].target_id);
        }
        const Var src = ag::constant(stack_field(data, idx, [](const Stage2Example& e) -> const Tensor& { return e.source_image; }));
        const Var tgt = ag::constant(stack_field(data, idx, [](const Stage2Example& e) -> const Tensor& { return e.target_image; }));
        const Var pose = ag::constant(stack_field(data, idx, [](const Stage2Example& e) -> const Tensor& { return e.target_heatmap; }));
        const Tensor masks = stack_field(data, idx, [](const Stage2Example& e) -> const Tensor& { return e.mask; });

        const TextBatch text = model.text_encoder().encode(toks);
        const auto out = model.generate(src, pose, text);
        const Var dl = stage2::d_loss(model, tgt, out.image, text, pose);
        const auto gl = stage2::g_loss(model, out.image, tgt, masks, text, pose, cfg.gamma1, cfg.gamma2);
        const std::vector<std::pair<std::string, double>> losses{
            {"d_loss", dl.item()}, {"g_adv", gl.adversarial.item()}, {"l1", gl.l1.item()},
            {"l1_weighted", cfg.gamma1 * gl.l1.item()}, {"ms", gl.similarity.item()}, {"g_total", gl.total.item()}};
        detail::check_finite(losses, step, ids, opt, "stage2");

        ag::backward(dl);
        opt_d.step();
        ag::backward(gl.total);
        opt_g.step();
        opt_d.zero_grad();

        detail::record(curve, step, losses);
        if (opt.log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps_stage2)) {
            nlohmann::json f{{"step", step}};
            for (const auto& [k, v] : losses) f[k] = v;
            log_event("info", "train_stage2", f);
        }
    }
    return curve;
}

// ---------------------------------------------------------------- checkpoints

inline Checkpoint stage1_checkpoint(const stage1::Stage1Model& model, const TrainConfig& cfg, const PreparedData& d) {
    Checkpoint c;
    c.kind = "stage1";
    c.config = cfg;
    c.rng_state = rng_state(nn::Rng(cfg.seed));
    c.extra = {{"vocab", d.vocab.to_json()}, {"basics", basic_poses_to_json(d.basics)}, {"phrasebook", d.phrasebook}};
    c.tensors = snapshot(model.params());
    return c;
}

inline Checkpoint stage2_checkpoint(const stage2::Stage2Model& model, const TrainConfig& cfg, const PreparedData& d,
                                    bool text_from_stage1) {
    Checkpoint c;
    c.kind = "stage2";
    c.config = cfg;
    c.rng_state = rng_state(nn::Rng(cfg.seed));
    c.extra = {{"vocab", d.vocab.to_json()}, {"text_encoder", text_from_stage1 ? "stage1" : "own"}};
    c.tensors = snapshot(model.params());
    return c;
}

/// Copies the Stage-I text encoder into a Stage-II model; configurations must agree.
inline void share_text_encoder(stage2::Stage2Model& dst, const Checkpoint& stage1_ckpt) {
    try {
        restore(dst.params(), stage1_ckpt.tensors, "text.");
    } catch (const FormatError& e) {
        throw ConfigError(std::string("stage I text encoder is incompatible with stage II config: ") + e.what());
    }
}

}  // namespace tgps
