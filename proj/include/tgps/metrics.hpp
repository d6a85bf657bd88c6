#pragma once

/// \file metrics.hpp
/// \brief VQA perceptual score with a pluggable answer oracle, a pose-localised colour
/// oracle, windowed SSIM, and the Inception Score over a pluggable classifier.

#include <array>
#include <cctype>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tgps/errors.hpp"
#include "tgps/pose_prior.hpp"
#include "tgps/text.hpp"
#include "tgps/types.hpp"

namespace tgps {

struct PaletteColor {
    std::string name;
    std::array<double, 3> rgb;  ///< 0..255
};

inline const std::vector<PaletteColor>& default_palette() {
    static const std::vector<PaletteColor> p{
        {"black", {0, 0, 0}},       {"white", {255, 255, 255}}, {"red", {255, 0, 0}},     {"green", {0, 128, 0}},
        {"blue", {0, 0, 255}},      {"yellow", {255, 255, 0}},  {"orange", {255, 165, 0}}, {"purple", {128, 0, 128}},
        {"pink", {255, 192, 203}},  {"brown", {139, 69, 19}},
    };
    return p;
}

inline const std::vector<std::string>& part_lexicon() {
    static const std::vector<std::string> parts{"shirt", "pants", "shorts", "skirt", "jacket", "shoes", "bag"};
    return parts;
}

/// COCO-18 joints that localise a body-part noun; empty for unknown parts.
inline std::vector<int> part_joints(const std::string& part) {
    using namespace coco;
    if (part == "shirt" || part == "jacket") return {kNeck, kRShoulder, kLShoulder, kRElbow, kLElbow};
    if (part == "pants" || part == "shorts" || part == "skirt") return {kRHip, kRKnee, kLHip, kLKnee};
    if (part == "shoes") return {kRAnkle, kLAnkle};
    if (part == "bag") return {kRWrist, kLWrist};
    return {};
}

inline std::string color_question(const std::string& part) { return "what color is the " + part + "?"; }

// ---------------------------------------------------------------- probes

struct ColorProbe {
    Caption caption;
    std::string part;
    std::string answer;
    std::string question;
    std::size_t word_index = 0;  ///< position of the colour word among the caption's words
};

namespace detail {

struct WordSpan {
    std::size_t begin, end;
    std::string lower;
};

inline std::vector<WordSpan> word_spans(const std::string& s) {
    std::vector<WordSpan> out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (!std::isalnum(static_cast<unsigned char>(s[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        std::string w;
        while (j < s.size() && std::isalnum(static_cast<unsigned char>(s[j])))
            w += static_cast<char>(std::tolower(static_cast<unsigned char>(s[j++])));
        out.push_back({i, j, w});
        i = j;
    }
    return out;
}

inline bool in_palette(const std::string& w, const std::vector<PaletteColor>& palette) {
    for (const auto& c : palette)
        if (c.name == w) return true;
    return false;
}

}  // namespace detail

/// One probe per adjacent "<colour> <part>" bigram, each with its own seeded
/// uniform palette draw substituted for that colour word only.
inline std::vector<ColorProbe> make_color_probes(const Caption& caption, const std::vector<PaletteColor>& palette,
                                                 std::uint64_t seed) {
    if (palette.empty()) throw ConfigError("palette is empty");
    const auto words = detail::word_spans(caption);
    const auto& parts = part_lexicon();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, palette.size() - 1);
    std::vector<ColorProbe> out;
    for (std::size_t i = 0; i + 1 < words.size(); ++i) {
        if (!detail::in_palette(words[i].lower, palette)) continue;
        if (std::find(parts.begin(), parts.end(), words[i + 1].lower) == parts.end()) continue;
        const std::string& color = palette[pick(rng)].name;
        ColorProbe p;
        p.caption = caption.substr(0, words[i].begin) + color + caption.substr(words[i].end);
        p.part = words[i + 1].lower;
        p.answer = color;
        p.question = color_question(p.part);
        p.word_index = i;
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<ColorProbe> make_color_probes(const Caption& caption, std::uint64_t seed) {
    return make_color_probes(caption, default_palette(), seed);
}

/// The caption with every probe's substitution applied at once.
inline Caption apply_probes(const Caption& caption, const std::vector<ColorProbe>& probes) {
    const auto words = detail::word_spans(caption);
    Caption out;
    std::size_t at = 0;
    for (std::size_t i = 0; i < words.size(); ++i)
        for (const auto& p : probes)
            if (p.word_index == i) {
                out += caption.substr(at, words[i].begin - at) + p.answer;
                at = words[i].end;
            }
    return out + caption.substr(at);
}

// ---------------------------------------------------------------- oracle

/// Answers a question about an image. `pose` is optional localisation context that
/// oracles may ignore. Implementations must be deterministic.
class VqaOracle {
public:
    virtual ~VqaOracle() = default;
    virtual std::string answer(const ImageTensor& image, const std::string& question, const Pose* pose) const = 0;
};

inline constexpr double kOracleDilation = 3.0;

/// Nearest palette entry (Euclidean RGB, 0..255); ties go to the lowest palette index.
inline std::string nearest_palette_color(const std::array<double, 3>& rgb, const std::vector<PaletteColor>& palette) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < palette.size(); ++k) {
        double d = 0;
        for (int c = 0; c < 3; ++c) d += (rgb[c] - palette[k].rgb[c]) * (rgb[c] - palette[k].rgb[c]);
        if (d < bd) {
            bd = d;
            best = k;
        }
    }
    return palette[best].name;
}

/// The part noun of "what color is the <part>?", or "" when the question has another form.
inline std::string question_part(const std::string& question) {
    const auto w = split_words(question);
    if (w.size() == 5 && w[0] == "what" && w[1] == "color" && w[2] == "is" && w[3] == "the") return w[4];
    return "";
}

/// Mean colour of the part's pose-mask region, mapped to the nearest palette colour.
inline std::string default_color_oracle(const ImageTensor& image, const std::string& question, const Pose& pose,
                                        const std::vector<PaletteColor>& palette = default_palette()) {
    const std::vector<int> joints = part_joints(question_part(question));
    if (joints.empty() || pose.size() != kDefaultJoints) return "unknown";
    const Mask m = pose_mask(pose, kOracleDilation, joints);
    const int H = image.height(), W = image.width();
    if (m.data.dim(1) != H || m.data.dim(2) != W) throw ShapeError("pose frame differs from image size");
    std::array<double, 3> sum{0, 0, 0};
    double n = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (m.data.at(0, y, x) > 0.5) {
                for (int c = 0; c < 3; ++c) sum[c] += image.data.at(c, y, x);
                n += 1;
            }
    std::array<double, 3> rgb{};
    for (int c = 0; c < 3; ++c) rgb[c] = (sum[c] / n + 1.0) * 0.5 * 255.0;
    return nearest_palette_color(rgb, palette);
}

class ColorOracle : public VqaOracle {
public:
    std::string answer(const ImageTensor& image, const std::string& question, const Pose* pose) const override {
        if (!pose) return "unknown";
        return default_color_oracle(image, question, *pose);
    }
};

// ---------------------------------------------------------------- VQA score

struct ProbedImage {
    ImageTensor image;
    std::optional<Pose> pose;
    std::vector<ColorProbe> probes;
};

struct VqaReport {
    int n = 0;
    int t = 0;
    double score = 0.0;
    std::vector<bool> all_correct;
    std::vector<std::vector<std::string>> answers;
};

/// T / N where T counts images whose every probe is answered correctly.
inline VqaReport vqa_report(const std::vector<ProbedImage>& items, const VqaOracle& oracle) {
    if (items.empty()) throw ValidationError("images", "VQA score needs at least one image");
    VqaReport r;
    r.n = static_cast<int>(items.size());
    for (const auto& it : items) {
        bool ok = true;
        std::vector<std::string> answers;
        for (const auto& p : it.probes) {
            answers.push_back(oracle.answer(it.image, p.question, it.pose ? &*it.pose : nullptr));
            ok = ok && answers.back() == p.answer;
        }
        r.t += ok ? 1 : 0;
        r.all_correct.push_back(ok);
        r.answers.push_back(std::move(answers));
    }
    r.score = static_cast<double>(r.t) / r.n;
    return r;
}

inline double vqa_perceptual_score(const std::vector<ProbedImage>& items, const VqaOracle& oracle) {
    return vqa_report(items, oracle).score;
}

// ---------------------------------------------------------------- SSIM

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double range = 2.0;  ///< images live in [-1, 1]
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(size);
    double s = 0;
    for (int i = 0; i < size; ++i) {
        const double d = i - (size - 1) / 2.0;
        k[i] = std::exp(-d * d / (2 * sigma * sigma));
        s += k[i];
    }
    for (auto& v : k) v /= s;
    return k;
}

/// Separable valid-mode filtering of an H x W plane.
inline std::vector<double> filter_valid(const double* src, int H, int W, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size()), oh = H - n + 1, ow = W - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(H) * ow), out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < n; ++i) s += k[i] * src[y * W + x + i];
            tmp[y * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < n; ++i) s += k[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = s;
        }
    return out;
}

}  // namespace detail

/// Gaussian-windowed SSIM over every fully contained window, averaged over windows
/// and channels. The window shrinks to the largest odd size that fits small images.
inline double ssim(const ImageTensor& a, const ImageTensor& b, const SsimOptions& opt = {}) {
    require_same_shape(a.data, b.data, "ssim");
    const int C = a.data.dim(0), H = a.data.dim(1), W = a.data.dim(2);
    int win = std::min({opt.window, H, W});
    if (win % 2 == 0) --win;
    if (win < 1) throw ShapeError("ssim needs non-empty images");
    const auto k = detail::gaussian_kernel(win, opt.sigma);
    const double c1 = (0.01 * opt.range) * (0.01 * opt.range), c2 = (0.03 * opt.range) * (0.03 * opt.range);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    double total = 0;
    std::size_t count = 0;
    std::vector<double> aa(hw), bb(hw), ab(hw);
    for (int c = 0; c < C; ++c) {
        const double* pa = a.data.ptr() + c * hw;
        const double* pb = b.data.ptr() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            aa[i] = pa[i] * pa[i];
            bb[i] = pb[i] * pb[i];
            ab[i] = pa[i] * pb[i];
        }
        const auto mu_a = detail::filter_valid(pa, H, W, k), mu_b = detail::filter_valid(pb, H, W, k);
        const auto e_aa = detail::filter_valid(aa.data(), H, W, k), e_bb = detail::filter_valid(bb.data(), H, W, k);
        const auto e_ab = detail::filter_valid(ab.data(), H, W, k);
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double va = e_aa[i] - mu_a[i] * mu_a[i], vb = e_bb[i] - mu_b[i] * mu_b[i];
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
                     ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------- Inception Score

using Classifier = std::function<std::vector<double>(const ImageTensor&)>;

struct InceptionScore {
    double mean = 0.0;
    double std = 0.0;
};

/// Stand-in classifier: the fraction of pixels whose nearest palette colour is each entry.
inline Classifier palette_histogram_classifier(const std::vector<PaletteColor>& palette = default_palette()) {
    return [palette](const ImageTensor& im) {
        std::vector<double> p(palette.size(), 0.0);
        const int H = im.height(), W = im.width();
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                std::array<double, 3> rgb{};
                for (int c = 0; c < 3; ++c) rgb[c] = (std::clamp(im.data.at(c, y, x), -1.0, 1.0) + 1.0) * 0.5 * 255.0;
                const std::string name = nearest_palette_color(rgb, palette);
                for (std::size_t k = 0; k < palette.size(); ++k)
                    if (palette[k].name == name) p[k] += 1.0;
            }
        for (auto& v : p) v /= static_cast<double>(H) * W;
        return p;
    };
}

/// exp(mean KL(p(y|x) || p(y))) per split; mean and population std across splits.
inline InceptionScore inception_score_from_probs(const std::vector<std::vector<double>>& probs, int splits = 1) {
    if (probs.empty()) throw ValidationError("images", "inception score needs at least one image");
    if (splits < 1 || splits > static_cast<int>(probs.size())) throw ConfigError("splits must be in [1, image count]");
    const std::size_t C = probs.front().size();
    for (const auto& p : probs) {
        if (p.size() != C || C == 0) throw NumericError("classifier outputs differ in length");
        double s = 0;
        for (double v : p) {
            if (!(v >= 0) || !std::isfinite(v)) throw NumericError("classifier output has a negative or non-finite entry");
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-6) throw NumericError("classifier output is not normalized (sum " + std::to_string(s) + ")");
    }
    const int n = static_cast<int>(probs.size());
    std::vector<double> scores;
    for (int s = 0; s < splits; ++s) {
        const int lo = s * n / splits, hi = (s + 1) * n / splits;
        std::vector<double> py(C, 0.0);
        for (int i = lo; i < hi; ++i)
            for (std::size_t c = 0; c < C; ++c) py[c] += probs[i][c];
        for (auto& v : py) v /= (hi - lo);
        double kl = 0;
        for (int i = lo; i < hi; ++i)
            for (std::size_t c = 0; c < C; ++c)
                if (probs[i][c] > 0) kl += probs[i][c] * std::log(probs[i][c] / py[c]);
        scores.push_back(std::exp(kl / (hi - lo)));
    }
    InceptionScore r;
    for (double v : scores) r.mean += v;
    r.mean /= splits;
    for (double v : scores) r.std += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(r.std / splits);
    return r;
}

inline InceptionScore inception_score(const std::vector<ImageTensor>& images, const Classifier& classifier, int splits = 1) {
    std::vector<std::vector<double>> probs;
    for (const auto& im : images) probs.push_back(classifier(im));
    return inception_score_from_probs(probs, splits);
}

}  // namespace tgps
