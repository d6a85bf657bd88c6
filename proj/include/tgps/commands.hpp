#pragma once

/// \file commands.hpp
/// \brief The operations behind each CLI subcommand, callable without a process boundary.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tgps/checkpoint.hpp"
#include "tgps/config.hpp"
#include "tgps/dataset.hpp"
#include "tgps/fixture.hpp"
#include "tgps/metrics.hpp"
#include "tgps/pipeline.hpp"
#include "tgps/training.hpp"

namespace tgps::cmd {

namespace fs = std::filesystem;

inline nlohmann::json read_json(const fs::path& p) {
    const auto bytes = read_file_bytes(p);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(p.string() + " is not valid JSON: " + e.what());
    }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

inline std::vector<Sample> load_samples(const fs::path& manifest, const TrainConfig& cfg) {
    return load_manifest(manifest, {{cfg.H, cfg.W}, cfg.J});
}

inline fs::path fixture(int identities, int per_identity, std::uint64_t seed, const fs::path& out_dir) {
    return generate_synthetic_fixture(identities, per_identity, seed, out_dir).manifest;
}

/// Clusters the manifest poses into K basic poses and writes the basic-pose document.
inline BasicPoseSet cluster_poses(const fs::path& manifest, const TrainConfig& cfg, const fs::path& out) {
    cfg.validate();
    const BasicPoseSet b = cluster_samples(load_samples(manifest, cfg), cfg);
    write_json(out, basic_poses_to_json(b));
    return b;
}

struct Stage1Outputs {
    fs::path checkpoint, curves, vocab, basics;
    LossCurve curve;
};

/// Writes stage1.ckpt (+ sidecar), stage1_loss.csv, vocab.json, and basics.json into `out_dir`.
inline Stage1Outputs train_stage1(const fs::path& manifest, const TrainConfig& cfg, const fs::path& out_dir,
                                  const std::optional<fs::path>& basics_file = std::nullopt) {
    cfg.validate();
    std::optional<BasicPoseSet> basics;
    if (basics_file) basics = basic_poses_from_json(read_json(*basics_file));
    Split split = split_identities(load_samples(manifest, cfg), cfg.test_fraction, cfg.seed);
    const PreparedData d = prepare_data(std::move(split.train), cfg, basics);
    stage1::Stage1Model model(stage1::Stage1Config::from(cfg, d.vocab.size()), cfg.seed);
    Stage1Outputs o;
    o.curve = tgps::train_stage1(model, stage1_examples(d, cfg), cfg, {out_dir});
    o.checkpoint = out_dir / "stage1.ckpt";
    o.curves = out_dir / "stage1_loss.csv";
    o.vocab = out_dir / "vocab.json";
    o.basics = out_dir / "basics.json";
    save_checkpoint(stage1_checkpoint(model, cfg, d), o.checkpoint);
    write_loss_csv(o.curve, o.curves);
    write_json(o.vocab, d.vocab.to_json());
    write_json(o.basics, basic_poses_to_json(d.basics));
    return o;
}

struct Stage2Outputs {
    fs::path checkpoint, curves;
    LossCurve curve;
};

/// With a Stage-I checkpoint, its basic poses and vocabulary are reused and, when
/// share_text_encoder is set, its text encoder is copied in and frozen.
inline Stage2Outputs train_stage2(const fs::path& manifest, const TrainConfig& cfg, const fs::path& out_dir,
                                  const std::optional<fs::path>& stage1_path = std::nullopt) {
    cfg.validate();
    std::optional<Checkpoint> s1;
    std::optional<BasicPoseSet> basics;
    std::optional<Vocab> vocab;
    if (stage1_path) {
        s1 = load_checkpoint(*stage1_path);
        if (s1->kind != "stage1") throw ConfigError("--stage1 must name a stage1 checkpoint");
        basics = basic_poses_from_json(s1->extra.at("basics"));
        vocab = Vocab::from_json(s1->extra.at("vocab"));
    }
    Split split = split_identities(load_samples(manifest, cfg), cfg.test_fraction, cfg.seed);
    const PreparedData d = prepare_data(std::move(split.train), cfg, basics, vocab);
    stage2::Stage2Model model(stage2::Stage2Config::from(cfg, d.vocab.size()), cfg.seed);
    const bool shared = s1 && cfg.share_text_encoder;
    if (shared) share_text_encoder(model, *s1);
    const auto examples = stage2_examples(d, cfg);
    if (examples.empty()) throw ValidationError("manifest", "manifest yields no same-identity pose pairs");
    Stage2Outputs o;
    o.curve = tgps::train_stage2(model, examples, cfg, shared, {out_dir});
    o.checkpoint = out_dir / "stage2.ckpt";
    o.curves = out_dir / "stage2_loss.csv";
    save_checkpoint(stage2_checkpoint(model, cfg, d, shared), o.checkpoint);
    write_loss_csv(o.curve, o.curves);
    return o;
}

struct InferOutputs {
    fs::path pose_png, image_png, summary;
};

inline InferOutputs infer(const fs::path& image, const Caption& caption, const fs::path& stage1_path,
                          const fs::path& stage2_path, const fs::path& out_dir) {
    const Stage1Bundle s1 = load_stage1(stage1_path);
    const Stage2Bundle s2 = load_stage2(stage2_path);
    const Frame f = s1.basics.frame();
    const ImageTensor x = resize_image(read_file_bytes(image), f.height, f.width);
    const Synthesis s = synthesize(x, caption, s1, s2);
    fs::create_directories(out_dir);
    InferOutputs o{out_dir / "pose.png", out_dir / "image.png", out_dir / "summary.json"};
    write_file_bytes(o.pose_png, encode_png(heatmap_visual(s.pose_heatmap)));
    write_file_bytes(o.image_png, encode_png(s.image));
    write_json(o.summary, {{"version", 1},
                           {"caption", caption},
                           {"orientation", s.orientation},
                           {"orientation_phrase", s1.phrasebook.at(static_cast<std::size_t>(s.orientation))},
                           {"orientation_probs", s.orientation_probs},
                           {"pose", pose_to_json(s.pose)},
                           {"image_shape", s.image.data.shape},
                           {"stage1_version", s1.version},
                           {"stage2_version", s2.version}});
    return o;
}

/// Evaluation over all same-identity pairs of the manifest: the source image is the
/// reference, the target caption (with colour adjectives re-drawn per probe) drives
/// synthesis, SSIM compares against the target image.
inline nlohmann::json eval(const fs::path& manifest, const fs::path& stage1_path, const fs::path& stage2_path,
                           const std::vector<std::string>& metrics, std::uint64_t seed) {
    const Stage1Bundle s1 = load_stage1(stage1_path);
    const Stage2Bundle s2 = load_stage2(stage2_path);
    const bool want_vqa = std::count(metrics.begin(), metrics.end(), "vqa") > 0;
    const bool want_ssim = std::count(metrics.begin(), metrics.end(), "ssim") > 0;
    const bool want_is = std::count(metrics.begin(), metrics.end(), "is") > 0;
    for (const auto& m : metrics)
        if (m != "vqa" && m != "ssim" && m != "is") throw ValidationError("metrics", "unknown metric '" + m + "'");
    const PreparedData d = prepare_data(load_samples(manifest, s1.cfg), s1.cfg, s1.basics, s1.vocab);
    const PairIndex pairs = make_pairs(d.samples);
    if (pairs.size() == 0) throw ValidationError("manifest", "manifest yields no same-identity pose pairs");

    std::vector<ProbedImage> probed;
    std::vector<std::size_t> probed_row;
    std::vector<ImageTensor> generated;
    std::vector<double> ssims;
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const Sample& src = d.samples[pairs.pairs[k].source];
        const Sample& tgt = d.samples[pairs.pairs[k].target];
        const auto probes = make_color_probes(tgt.caption, seed + k);
        const Caption caption = probes.empty() ? tgt.caption : apply_probes(tgt.caption, probes);
        const ImageTensor x = src.load_image();
        const Synthesis s = synthesize(x, caption, s1, s2);
        nlohmann::json row{{"source", src.id}, {"target", tgt.id}, {"caption", caption}, {"orientation", s.orientation}};
        if (want_ssim) {
            ssims.push_back(ssim(s.image, tgt.load_image()));
            row["ssim"] = ssims.back();
        }
        if (want_vqa && !probes.empty()) {
            probed.push_back({s.image, s.pose, probes});
            probed_row.push_back(k);
        }
        generated.push_back(s.image);
        per.push_back(row);
    }
    nlohmann::json report{{"n", nullptr}, {"t", nullptr}, {"vqa_score", nullptr}, {"ssim_mean", nullptr},
                          {"is_mean", nullptr}, {"is_std", nullptr}};
    if (want_vqa && !probed.empty()) {
        const VqaReport r = vqa_report(probed, ColorOracle());
        report["n"] = r.n;
        report["t"] = r.t;
        report["vqa_score"] = r.score;
        for (std::size_t j = 0; j < probed.size(); ++j) {
            per[probed_row[j]]["vqa_all_correct"] = static_cast<bool>(r.all_correct[j]);
            per[probed_row[j]]["vqa_answers"] = r.answers[j];
        }
    }
    if (want_ssim) {
        double s = 0;
        for (double v : ssims) s += v;
        report["ssim_mean"] = s / static_cast<double>(ssims.size());
    }
    if (want_is) {
        const auto is = inception_score(generated, palette_histogram_classifier(), 1);
        report["is_mean"] = is.mean;
        report["is_std"] = is.std;
    }
    report["version"] = 1;
    report["per_image"] = per;
    return report;
}

}  // namespace tgps::cmd
