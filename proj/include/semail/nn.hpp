#pragma once

#include <cassert>
#include <cmath>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "semail/rng.hpp"
#include "semail/tape.hpp"

namespace semail::nn {

template <class T>
struct Param {
    std::string name;
    int rows = 0;
    int cols = 0; // 1 for vectors
    std::vector<T> value;
    std::vector<T> m; // Adam first moment
    std::vector<T> v; // Adam second moment

    std::size_t size() const { return value.size(); }
};

// params live in a deque: layers keep pointers into it across add() calls
template <class T>
struct Bundle {
    std::string name;
    std::deque<Param<T>> params;

    Param<T>& add(const std::string& pname, int rows, int cols) {
        params.push_back(Param<T>{pname, rows, cols, std::vector<T>(static_cast<std::size_t>(rows) * cols, T(0)),
                                  std::vector<T>(static_cast<std::size_t>(rows) * cols, T(0)),
                                  std::vector<T>(static_cast<std::size_t>(rows) * cols, T(0))});
        return params.back();
    }
};

template <class T>
inline void init_xavier(Param<T>& p, RandomSource& rng, double gain = 1.0) {
    const double limit = gain * std::sqrt(6.0 / (p.rows + p.cols));
    for (auto& v : p.value) v = static_cast<T>(rng.uniform(-limit, limit));
}

// Binds parameters to tape leaves for one graph build, one leaf per
// parameter no matter how many times a layer is applied. When trainable is
// false the parameters enter as constants and receive no gradient.
template <class T>
class Binding {
public:
    using Var = typename ad::Tape<T>::Var;

    Binding(ad::Tape<T>& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

    Var operator()(Param<T>& p) {
        auto it = cache_.find(&p);
        if (it != cache_.end()) return it->second;
        Var v = trainable_ ? tape_->leaf(p.value) : tape_->constant(p.value);
        cache_.emplace(&p, v);
        if (trainable_) bound_.push_back({&p, v});
        return v;
    }

    // gradients of every bound parameter, zeros where nothing flowed
    std::vector<std::vector<T>> collect_grads() const {
        std::vector<std::vector<T>> out;
        out.reserve(bound_.size());
        for (const auto& [p, v] : bound_) {
            if (tape_->has_grad(v)) out.push_back(tape_->grad(v));
            else out.emplace_back(p->size(), T(0));
        }
        return out;
    }

    const std::vector<std::pair<Param<T>*, Var>>& bound() const { return bound_; }

private:
    ad::Tape<T>* tape_;
    bool trainable_;
    std::vector<std::pair<Param<T>*, Var>> bound_;
    std::unordered_map<Param<T>*, Var> cache_;
};

// One optimizer instance per parameter group; gradient clipping is applied
// to the group's global norm before the moment updates.
template <class T>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0; // 0 disables
    long step_count = 0;
    double last_grad_norm = 0.0;

    void step(Binding<T>& binding) {
        auto grads = binding.collect_grads();
        double sq = 0.0;
        for (const auto& g : grads)
            for (const T x : g) sq += static_cast<double>(x) * x;
        const double norm = std::sqrt(sq);
        last_grad_norm = norm;
        double scale = 1.0;
        if (clip_norm > 0.0 && norm > clip_norm) scale = clip_norm / norm;

        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, step_count);
        const double bc2 = 1.0 - std::pow(beta2, step_count);
        const auto& bound = binding.bound();
        for (std::size_t i = 0; i < bound.size(); ++i) {
            Param<T>& p = *bound[i].first;
            const auto& g = grads[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = scale * static_cast<double>(g[j]);
                const double mj = beta1 * p.m[j] + (1.0 - beta1) * gj;
                const double vj = beta2 * p.v[j] + (1.0 - beta2) * gj * gj;
                p.m[j] = static_cast<T>(mj);
                p.v[j] = static_cast<T>(vj);
                p.value[j] -=
                    static_cast<T>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps));
            }
        }
    }
};

// ---- layers ----

template <class T>
struct DenseLayer {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
    int in = 0, out = 0;

    void build(Bundle<T>& bundle, const std::string& name, int in_, int out_, RandomSource& rng,
               bool zero_init = false) {
        in = in_;
        out = out_;
        w = &bundle.add(name + "/w", in, out);
        b = &bundle.add(name + "/b", out, 1);
        if (!zero_init) init_xavier(*w, rng);
    }

    typename ad::Tape<T>::Var apply(ad::Tape<T>& tape, Binding<T>& bind,
                                    typename ad::Tape<T>::Var x, int m) const {
        return tape.dense(x, bind(*w), bind(*b), m, in, out);
    }
};

template <class T>
struct GruCell {
    Param<T>* wx = nullptr;
    Param<T>* wh = nullptr;
    Param<T>* b = nullptr;
    int in = 0, units = 0;

    void build(Bundle<T>& bundle, const std::string& name, int in_, int units_,
               RandomSource& rng) {
        in = in_;
        units = units_;
        wx = &bundle.add(name + "/wx", in, 3 * units);
        wh = &bundle.add(name + "/wh", units, 3 * units);
        b = &bundle.add(name + "/b", 3 * units, 1);
        init_xavier(*wx, rng);
        init_xavier(*wh, rng);
    }

    typename ad::Tape<T>::Var apply(ad::Tape<T>& tape, Binding<T>& bind,
                                    typename ad::Tape<T>::Var x, typename ad::Tape<T>::Var h,
                                    int m) const {
        const int u = units;
        auto gx = tape.dense(x, bind(*wx), bind(*b), m, in, 3 * u);
        auto gh = tape.matmul(h, bind(*wh), m, u, 3 * u);
        auto r = tape.sigmoid(tape.add(tape.slice_cols(gx, 3 * u, 0, u), tape.slice_cols(gh, 3 * u, 0, u)));
        auto z = tape.sigmoid(tape.add(tape.slice_cols(gx, 3 * u, u, u), tape.slice_cols(gh, 3 * u, u, u)));
        auto c = tape.tanh_(tape.add(tape.slice_cols(gx, 3 * u, 2 * u, u),
                                     tape.mul(r, tape.slice_cols(gh, 3 * u, 2 * u, u))));
        // h' = (1-z)*h + z*c
        auto one_minus_z = tape.add_scalar(tape.mul_scalar(z, T(-1)), T(1));
        return tape.add(tape.mul(one_minus_z, h), tape.mul(z, c));
    }
};

// Flat coordinate addressing across a set of bundles, used by the
// finite-difference audits.
template <class T>
struct ParamIndex {
    std::vector<Param<T>*> params;
    std::vector<std::size_t> offsets; // cumulative
    std::size_t total = 0;

    explicit ParamIndex(const std::vector<Bundle<T>*>& bundles) {
        for (auto* b : bundles)
            for (auto& p : b->params) {
                params.push_back(&p);
                offsets.push_back(total);
                total += p.size();
            }
    }

    T get(std::size_t flat) const {
        const auto [pi, off] = locate(flat);
        return params[pi]->value[off];
    }
    void set(std::size_t flat, T v) {
        const auto [pi, off] = locate(flat);
        params[pi]->value[off] = v;
    }

private:
    std::pair<std::size_t, std::size_t> locate(std::size_t flat) const {
        std::size_t lo = 0, hi = params.size();
        while (hi - lo > 1) {
            const std::size_t mid = (lo + hi) / 2;
            if (offsets[mid] <= flat) lo = mid;
            else hi = mid;
        }
        return {lo, flat - offsets[lo]};
    }
};

} // namespace semail::nn
