#pragma once

/// \file nn.hpp
/// \brief Named parameter storage, the small set of layers the networks use, and Adam.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tgps/autograd.hpp"

namespace tgps::nn {

using ag::Var;
using Rng = std::mt19937_64;

/// Ordered, name-addressable collection of trainable tensors.
///
/// Insertion order is the serialization order, so two ParamSets built by the
/// same code path are layout-identical.
class ParamSet {
public:
    Var add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw Error("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, Var(std::move(init), true)});
        return entries_.back().var;
    }

    const Var& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return entries_[it->second].var;
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    struct Entry {
        std::string name;
        Var var;
    };
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.var.value().size();
        return n;
    }

    /// Vars whose names start with `prefix`.
    std::vector<Var> with_prefix(const std::string& prefix) const {
        std::vector<Var> out;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) out.push_back(e.var);
        return out;
    }

    std::vector<Var> all() const {
        std::vector<Var> out;
        for (const auto& e : entries_) out.push_back(e.var);
        return out;
    }

    void zero_grad() {
        for (auto& e : entries_) e.var.zero_grad();
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data) v = dist(rng);
    return t;
}

struct Linear {
    Var weight, bias;

    Linear() = default;
    Linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng, double gain = 1.0) {
        weight = ps.add(name + ".weight", normal_tensor({out, in}, gain / std::sqrt(static_cast<double>(in)), rng));
        bias = ps.add(name + ".bias", Tensor({out}));
    }
    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
    int in_features() const { return weight.dim(1); }
    int out_features() const { return weight.dim(0); }
};

struct Conv2d {
    Var weight, bias;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride_, int pad_, Rng& rng,
           double gain = std::sqrt(2.0))
        : stride(stride_), pad(pad_) {
        const double fan_in = static_cast<double>(in) * kernel * kernel;
        weight = ps.add(name + ".weight", normal_tensor({out, in, kernel, kernel}, gain / std::sqrt(fan_in), rng));
        bias = ps.add(name + ".bias", Tensor({out}));
    }
    Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
    int in_channels() const { return weight.dim(1); }
    int out_channels() const { return weight.dim(0); }
};

/// One direction of an LSTM. Gate layout along the 4H axis: input, forget, cell, output.
struct LstmCell {
    Var w_input, w_hidden, bias;
    int hidden = 0;

    LstmCell() = default;
    LstmCell(ParamSet& ps, const std::string& name, int in, int hidden_, Rng& rng) : hidden(hidden_) {
        w_input = ps.add(name + ".w_input", normal_tensor({4 * hidden, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        w_hidden = ps.add(name + ".w_hidden",
                          normal_tensor({4 * hidden, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
        Tensor b({4 * hidden});
        for (int i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;  // forget-gate bias
        bias = ps.add(name + ".bias", std::move(b));
    }

    struct State {
        Var h, c;
    };

    /// x [B,in], state h/c [B,H] -> next state.
    State step(const Var& x, const State& s) const {
        Var pre = ag::add(ag::linear(x, w_input, bias), ag::matmul(s.h, ag::transpose(w_hidden)));
        Var i = ag::sigmoid(ag::slice(pre, 1, 0, hidden));
        Var f = ag::sigmoid(ag::slice(pre, 1, hidden, hidden));
        Var g = ag::tanh(ag::slice(pre, 1, 2 * hidden, hidden));
        Var o = ag::sigmoid(ag::slice(pre, 1, 3 * hidden, hidden));
        Var c = ag::add(ag::mul(f, s.c), ag::mul(i, g));
        Var h = ag::mul(o, ag::tanh(c));
        return {h, c};
    }
};

/// Adam over an explicit parameter list. Moments are keyed by list position.
class Adam {
public:
    struct Options {
        double lr = 2e-4;
        double beta1 = 0.5;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Var> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Var& p = params_[k];
            Tensor& g = p.grad();
            if (opt_.lr != 0.0) {
                Tensor& w = p.mutable_value();
                for (std::size_t i = 0; i < w.size(); ++i) {
                    m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * g[i];
                    v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * g[i] * g[i];
                    w[i] -= opt_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opt_.eps);
                }
            }
            g.fill(0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const { return t_; }

private:
    std::vector<Var> params_;
    Options opt_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

}  // namespace tgps::nn
