#pragma once

/// \file text.hpp
/// \brief Vocabulary, tokenization, and the bidirectional LSTM text encoder.

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "tgps/autograd.hpp"
#include "tgps/nn.hpp"

namespace tgps {

using Caption = std::string;

/// Lowercased alphanumeric runs; every other character separates tokens.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

class Vocab {
public:
    static constexpr int kPad = 0, kUnk = 1, kBos = 2, kEos = 3, kReserved = 4;

    Vocab() { reset({}); }

    /// Tokens with frequency >= min_freq, ordered by frequency (descending) then lexicographically.
    static Vocab build(const std::vector<Caption>& captions, int min_freq) {
        if (captions.empty()) throw ValidationError("captions", "cannot build a vocabulary from an empty corpus");
        std::map<std::string, long> freq;
        for (const auto& c : captions)
            for (auto& w : split_words(c)) ++freq[w];
        std::vector<std::pair<std::string, long>> kept;
        for (auto& [w, n] : freq)
            if (n >= min_freq) kept.emplace_back(w, n);
        std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        std::vector<std::string> tokens;
        for (auto& [w, n] : kept) tokens.push_back(w);
        Vocab v;
        v.min_freq_ = min_freq;
        v.reset(std::move(tokens));
        return v;
    }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }
    const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(id_to_token_.size()); }
    int min_freq() const { return min_freq_; }
    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    nlohmann::json to_json() const {
        return {{"version", 1},
                {"min_freq", min_freq_},
                {"tokens", std::vector<std::string>(id_to_token_.begin() + kReserved, id_to_token_.end())}};
    }

    static Vocab from_json(const nlohmann::json& doc) {
        try {
            if (doc.at("version").get<int>() != 1) throw FormatError("unsupported vocab version");
            Vocab v;
            v.min_freq_ = doc.at("min_freq").get<int>();
            v.reset(doc.at("tokens").get<std::vector<std::string>>());
            return v;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed vocab document: ") + e.what());
        }
    }

    friend bool operator==(const Vocab& a, const Vocab& b) {
        return a.min_freq_ == b.min_freq_ && a.id_to_token_ == b.id_to_token_;
    }

private:
    void reset(std::vector<std::string> tokens) {
        id_to_token_ = {"<pad>", "<unk>", "<bos>", "<eos>"};
        index_.clear();
        for (auto& t : tokens) {
            if (index_.count(t)) throw FormatError("duplicate vocab token: " + t);
            index_[t] = static_cast<int>(id_to_token_.size());
            id_to_token_.push_back(std::move(t));
        }
    }

    int min_freq_ = 1;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> index_;
};

/// bos + word ids + eos, padded with kPad to a fixed capacity.
struct TokenSeq {
    std::vector<int> ids;
    int length = 0;  ///< real tokens including bos and eos

    int capacity() const { return static_cast<int>(ids.size()); }
    /// Number of word tokens that are not in the vocabulary.
    int unknown_count() const { return static_cast<int>(std::count(ids.begin(), ids.begin() + length, Vocab::kUnk)); }
    int word_count() const { return length - 2; }
};

inline TokenSeq tokenize(const Caption& text, const Vocab& vocab, int n_max) {
    if (n_max < 3) throw ConfigError("N_max must be at least 3");
    auto words = split_words(text);
    if (words.empty()) throw ValidationError("caption", "caption has no tokens");
    if (static_cast<int>(words.size()) > n_max - 2) words.resize(static_cast<std::size_t>(n_max - 2));
    TokenSeq s;
    s.ids.assign(static_cast<std::size_t>(n_max), Vocab::kPad);
    s.ids[0] = Vocab::kBos;
    for (std::size_t i = 0; i < words.size(); ++i) s.ids[i + 1] = vocab.id(words[i]);
    s.ids[words.size() + 1] = Vocab::kEos;
    s.length = static_cast<int>(words.size()) + 2;
    return s;
}

/// Encoder output for a single caption: word matrix e [L,N] and sentence vector phi [L_s].
struct TextFeatures {
    Tensor e;
    Tensor phi;
    int length = 0;
};

/// Encoder output for a batch, still attached to the graph.
struct TextBatch {
    std::vector<ag::Var> words;  ///< per sample [L, N]
    ag::Var sentence;            ///< [B, L]
    std::vector<int> lengths;

    int batch() const { return static_cast<int>(words.size()); }
};

struct TextEncoderConfig {
    int vocab_size = 0;
    int embed_dim = 128;
    int hidden = 256;  ///< L: forward and backward halves of hidden/2 each
};

/// Bidirectional LSTM. Column n of e concatenates the forward and backward states at
/// position n. The forward pass runs over all N positions; the backward pass starts
/// at the last real token, so its half of each pad column is zero. The sentence
/// vector concatenates the forward state at the last real token with the backward
/// state at position 0.
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(nn::ParamSet& ps, const std::string& prefix, const TextEncoderConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
        if (cfg.hidden % 2 != 0) throw ConfigError("text hidden size L must be even");
        embed_ = ps.add(prefix + "embedding", nn::normal_tensor({cfg.vocab_size, cfg.embed_dim}, 1.0, rng));
        fwd_ = nn::LstmCell(ps, prefix + "forward", cfg.embed_dim, cfg.hidden / 2, rng);
        bwd_ = nn::LstmCell(ps, prefix + "backward", cfg.embed_dim, cfg.hidden / 2, rng);
    }

    const TextEncoderConfig& config() const { return cfg_; }

    TextBatch encode(const std::vector<TokenSeq>& batch) const {
        using namespace ag;
        if (batch.empty()) throw ShapeError("empty text batch");
        const int B = static_cast<int>(batch.size());
        const int N = batch.front().capacity();
        const int h = cfg_.hidden / 2;
        for (const auto& s : batch)
            if (s.capacity() != N) throw ShapeError("token sequences must share one capacity");

        std::vector<Var> inputs(N);
        for (int t = 0; t < N; ++t) {
            std::vector<int> ids(B);
            for (int b = 0; b < B; ++b) ids[b] = batch[b].ids[t];
            inputs[t] = embedding(embed_, ids);
        }
        const Var zero = constant(Tensor({B, h}));
        std::vector<Var> fw(N), bw(N);
        nn::LstmCell::State s{zero, zero};
        for (int t = 0; t < N; ++t) {
            s = fwd_.step(inputs[t], s);
            fw[t] = s.h;
        }
        s = {zero, zero};
        for (int t = N - 1; t >= 0; --t) {
            Tensor keep({B, h}), drop({B, h});
            bool all = true;
            for (int b = 0; b < B; ++b) {
                const bool live = t < batch[b].length;
                all = all && live;
                std::fill_n(keep.ptr() + static_cast<std::size_t>(b) * h, h, live ? 1.0 : 0.0);
                std::fill_n(drop.ptr() + static_cast<std::size_t>(b) * h, h, live ? 0.0 : 1.0);
            }
            nn::LstmCell::State next = bwd_.step(inputs[t], s);
            if (!all) {
                next.h = add(mul_const(next.h, keep), mul_const(s.h, drop));
                next.c = add(mul_const(next.c, keep), mul_const(s.c, drop));
            }
            s = next;
            bw[t] = s.h;
        }
        // [N, B, L]
        Var states = concat({stack(fw), stack(bw)}, 2);
        TextBatch out;
        std::vector<Var> sentence;
        for (int b = 0; b < B; ++b) {
            const Var per = reshape(slice(states, 1, b, 1), {N, cfg_.hidden});
            out.words.push_back(transpose(per));
            const int last = batch[b].length - 1;
            sentence.push_back(concat({select(fw[last], b), select(bw[0], b)}, 0));
            out.lengths.push_back(batch[b].length);
        }
        out.sentence = stack(sentence);
        return out;
    }

    /// Detached single-caption encoding.
    TextFeatures encode_one(const TokenSeq& s) const {
        ag::NoGradGuard ng;
        TextBatch b = encode({s});
        return {b.words[0].value(), b.sentence.value().reshaped({cfg_.hidden}), s.length};
    }

private:
    TextEncoderConfig cfg_;
    ag::Var embed_;
    nn::LstmCell fwd_, bwd_;
};

}  // namespace tgps
