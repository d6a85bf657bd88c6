#include <gtest/gtest.h>

#include <cctype>
#include <cmath>
#include <map>
#include <set>

#include "oracles.hpp"
#include "tgps/text.hpp"

using namespace tgps;

namespace {

const std::vector<Caption> kCorpus{
    "A man in a red shirt and blue pants, facing the camera.",
    "The woman wears a white jacket with black shoes.",
    "a person in a green shirt, brown pants and white shoes",
    "A girl wearing a pink skirt and carrying a yellow bag.",
    "Man with an orange jacket; grey trousers!",
    "He is wearing a purple shirt and black pants.",
    "The lady has a red bag and blue shorts",
    "a boy in a white shirt facing left",
    "woman in black pants and a red jacket, facing right",
    "A person wearing brown shoes and green shorts.",
    "young man, blue jacket, black bag",
    "The man is walking, he wears a red shirt",
    "a woman with long hair in a yellow skirt",
    "an old man in a grey coat and black shoes",
    "A kid in a pink shirt facing away from the camera",
    "person with a white bag and red shoes",
    "a man in a purple jacket facing front right",
    "woman wearing orange shorts and white shoes",
    "The man wears black pants, black shoes and a black shirt.",
    "someone in a blue shirt facing back left"};

// Independent word counter: lowercase, alnum runs only.
std::map<std::string, int> count_words(const std::vector<Caption>& corpus) {
    std::map<std::string, int> f;
    for (const auto& c : corpus) {
        std::string w;
        for (char ch : c + " ") {
            if (std::isalnum(static_cast<unsigned char>(ch))) {
                w += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            } else if (!w.empty()) {
                ++f[w];
                w.clear();
            }
        }
    }
    return f;
}

TextEncoder small_encoder(nn::ParamSet& ps, int vocab, std::uint64_t seed = 1, int hidden = 4) {
    nn::Rng rng(seed);
    return TextEncoder(ps, "text.", {vocab, 3, hidden}, rng);
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Vocab, MinFrequencyRule) {
    const Vocab v = Vocab::build({"a a b"}, 2);
    EXPECT_TRUE(v.contains("a"));
    EXPECT_FALSE(v.contains("b"));
    EXPECT_EQ(v.id("b"), Vocab::kUnk);
}

TEST(Vocab, DeterministicSerialization) {
    EXPECT_EQ(Vocab::build(kCorpus, 1).to_json().dump(), Vocab::build(kCorpus, 1).to_json().dump());
    const Vocab v = Vocab::build(kCorpus, 2);
    EXPECT_EQ(Vocab::from_json(v.to_json()), v);
}

TEST(Vocab, SizeMatchesIndependentCount) {
    const auto f = count_words(kCorpus);
    for (int mf : {1, 2, 3}) {
        int n = 0;
        for (const auto& [w, c] : f) n += c >= mf;
        EXPECT_EQ(Vocab::build(kCorpus, mf).size(), n + Vocab::kReserved) << "min_freq " << mf;
    }
}

TEST(Vocab, OrderIsFrequencyThenLexicographic) {
    const Vocab v = Vocab::build({"b a c c b c d"}, 1);
    EXPECT_EQ(v.token(4), "c");
    EXPECT_EQ(v.token(5), "b");
    EXPECT_EQ(v.token(6), "a");
    EXPECT_EQ(v.token(7), "d");
    for (int id = Vocab::kReserved; id < v.size(); ++id) EXPECT_EQ(v.id(v.token(id)), id);
}

TEST(Vocab, EmptyCorpusIsError) { EXPECT_THROW(Vocab::build({}, 1), ValidationError); }

TEST(Tokenize, ForcedLayout) {
    const Vocab v = Vocab::build({"red shirt"}, 1);
    const TokenSeq s = tokenize("red shirt", v, 8);
    const std::vector<int> want{Vocab::kBos, v.id("red"), v.id("shirt"), Vocab::kEos, 0, 0, 0, 0};
    EXPECT_EQ(s.ids, want);
    EXPECT_EQ(s.length, 4);
}

TEST(Tokenize, TruncationKeepsBosEos) {
    const Vocab v = Vocab::build(kCorpus, 1);
    const TokenSeq s = tokenize(kCorpus[0], v, 5);
    ASSERT_EQ(s.capacity(), 5);
    EXPECT_EQ(s.length, 5);
    EXPECT_EQ(s.ids.front(), Vocab::kBos);
    EXPECT_EQ(s.ids.back(), Vocab::kEos);
    EXPECT_EQ(s.ids[1], v.id("a"));
}

TEST(Tokenize, UnknownWordSlot) {
    const Vocab v = Vocab::build({"red shirt"}, 1);
    const TokenSeq s = tokenize("red tuxedo", v, 6);
    EXPECT_EQ(s.ids[2], Vocab::kUnk);
    EXPECT_EQ(s.unknown_count(), 1);
}

TEST(Tokenize, EmptyCaptionIsError) {
    const Vocab v = Vocab::build({"x"}, 1);
    EXPECT_THROW(tokenize(" ,. ", v, 6), ValidationError);
}

TEST(TextEncoder, ShapesAndDeterminism) {
    const Vocab v = Vocab::build(kCorpus, 1);
    nn::ParamSet ps;
    const TextEncoder enc = small_encoder(ps, v.size(), 3, 6);
    for (const auto& c : kCorpus) {
        const TextFeatures f = enc.encode_one(tokenize(c, v, 12));
        EXPECT_EQ(f.e.shape, (Shape{6, 12}));
        EXPECT_EQ(f.phi.shape, (Shape{6}));
        const TextFeatures g = enc.encode_one(tokenize(c, v, 12));
        EXPECT_EQ(f.e, g.e);
        EXPECT_EQ(f.phi, g.phi);
    }
}

TEST(TextEncoder, PadColumnsAreDeterministic) {
    const Vocab v = Vocab::build({"x"}, 1);
    nn::ParamSet ps;
    const TextEncoder enc = small_encoder(ps, v.size());
    TokenSeq s;
    s.ids = {Vocab::kBos, Vocab::kEos, 0, 0, 0, 0};
    s.length = 2;
    const auto a = enc.encode_one(s), b = enc.encode_one(s);
    EXPECT_EQ(a.e, b.e);
}

TEST(TextEncoder, ForwardStatesAreCausal) {
    const Vocab v = Vocab::build(kCorpus, 1);
    nn::ParamSet ps;
    const TextEncoder enc = small_encoder(ps, v.size(), 5, 8);
    const auto a = enc.encode_one(tokenize("a man in a red shirt", v, 10));
    const auto b = enc.encode_one(tokenize("a man in a blue jacket", v, 10));
    // Position 5 (1-based word 5) is the first that differs; bos is position 0.
    for (int n = 0; n < 5; ++n)
        for (int k = 0; k < 4; ++k) EXPECT_EQ(a.e.at(k, n), b.e.at(k, n)) << n;
    bool differs = false;
    for (int k = 0; k < 4; ++k) differs = differs || a.e.at(k, 5) != b.e.at(k, 5);
    EXPECT_TRUE(differs);
}

TEST(LstmCell, HandSetScalarRecurrence) {
    nn::ParamSet ps;
    nn::Rng rng(0);
    nn::LstmCell cell(ps, "c", 1, 1, rng);
    // Gates i, f, g, o.
    const double wi[4] = {0.5, -0.3, 0.8, 0.1}, wh[4] = {0.2, 0.4, -0.6, 0.7}, bb[4] = {0.1, 1.0, -0.2, 0.0};
    for (int k = 0; k < 4; ++k) {
        cell.w_input.mutable_value()[k] = wi[k];
        cell.w_hidden.mutable_value()[k] = wh[k];
        cell.bias.mutable_value()[k] = bb[k];
    }
    const double xs[3] = {1.0, -2.0, 0.5};
    double h = 0, c = 0;
    nn::LstmCell::State s{ag::constant(Tensor({1, 1})), ag::constant(Tensor({1, 1}))};
    for (double x : xs) {
        const double i = sigm(wi[0] * x + wh[0] * h + bb[0]);
        const double f = sigm(wi[1] * x + wh[1] * h + bb[1]);
        const double g = std::tanh(wi[2] * x + wh[2] * h + bb[2]);
        const double o = sigm(wi[3] * x + wh[3] * h + bb[3]);
        c = f * c + i * g;
        h = o * std::tanh(c);
        s = cell.step(ag::constant(Tensor({1, 1}, {x})), s);
        EXPECT_NEAR(s.h.item(), h, 1e-14);
        EXPECT_NEAR(s.c.item(), c, 1e-14);
    }
}

TEST(TextEncoder, GradientMatchesFiniteDifferences) {
    const Vocab v = Vocab::build(kCorpus, 1);
    nn::ParamSet ps;
    const TextEncoder enc = small_encoder(ps, v.size(), 9, 4);
    const std::vector<TokenSeq> batch{tokenize("a man in a red shirt", v, 8), tokenize("blue pants", v, 8)};
    oracle::Rng rng(2);
    const Tensor we = oracle::random_tensor({4, 8}, rng), ws = oracle::random_tensor({2, 4}, rng);
    auto loss = [&] {
        const TextBatch t = enc.encode(batch);
        std::vector<ag::Var> terms;
        for (int b = 0; b < 2; ++b) terms.push_back(ag::sum(ag::mul_const(ag::tanh(t.words[b]), we)));
        terms.push_back(ag::sum(ag::mul_const(t.sentence, ws)));
        return ag::add_n(terms);
    };
    std::vector<std::string> names;
    for (const auto& e : ps.entries()) names.push_back(e.name);
    const auto r = oracle::gradient_check(loss, ps.all(), names);
    EXPECT_LT(r.worst_rel, 1e-4) << r.worst_where;
}
