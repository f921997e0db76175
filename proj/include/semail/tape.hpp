#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "semail/blas.hpp"

namespace semail::ad {

// Recycles large buffers between graph builds. Training allocates a few GB
// of activations per iteration; reusing warm pages instead of faulting in
// fresh ones is worth seconds per step on this workload. Buffers returned
// by take() have unspecified contents.
template <class T>
class BufferPool {
public:
    static BufferPool& instance() {
        static thread_local BufferPool pool;
        return pool;
    }

    std::vector<T> take(std::size_t n) {
        if (n >= kMinPooled) {
            auto it = buckets_.find(n);
            if (it != buckets_.end() && !it->second.empty()) {
                std::vector<T> v = std::move(it->second.back());
                it->second.pop_back();
                return v;
            }
        }
        return std::vector<T>(n);
    }

    std::vector<T> take_zero(std::size_t n) {
        std::vector<T> v = take(n);
        std::fill(v.begin(), v.end(), T(0));
        return v;
    }

    void give(std::vector<T>&& v) {
        if (v.size() < kMinPooled) return;
        auto& bucket = buckets_[v.size()];
        if (bucket.size() < 8) bucket.push_back(std::move(v));
    }

    void release_all() { buckets_.clear(); }

private:
    static constexpr std::size_t kMinPooled = 1 << 14;
    std::unordered_map<std::size_t, std::vector<std::vector<T>>> buckets_;
};

// Reverse-mode autodiff over flat buffers. Shape is carried by the ops that
// need it (matmul, conv, reductions); elementwise ops only require matching
// sizes. Leaves created with leaf() accumulate gradients, constants do not,
// so "gradient is identically zero" statements about frozen components hold
// structurally rather than numerically.
//
// Ops are first-order only. The discriminator gradient penalty does not need
// double backprop here because the input-gradient of the MLP is expressed as
// a primal computation (see discriminator.hpp).
template <class T>
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() { clear(); }

    void clear() {
        auto& pool = BufferPool<T>::instance();
        for (auto& v : vals_) pool.give(std::move(v));
        for (auto& g : grads_) pool.give(std::move(g));
        vals_.clear();
        grads_.clear();
        requires_.clear();
        nodes_.clear();
    }

    std::size_t size(Var v) const { return vals_[v.id].size(); }
    const std::vector<T>& val(Var v) const { return vals_[v.id]; }
    std::vector<T>& val_mut(Var v) { return vals_[v.id]; }

    // Gradient of a leaf after backward(); empty if nothing flowed into it.
    const std::vector<T>& grad(Var v) const { return grads_[v.id]; }
    bool has_grad(Var v) const { return !grads_[v.id].empty(); }

    Var leaf(std::vector<T> value) { return push(std::move(value), true); }
    Var constant(std::vector<T> value) { return push(std::move(value), false); }
    Var scalar_const(T value) { return constant(std::vector<T>{value}); }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        assert(size(a) == size(b));
        auto out = take(size(a));
        const auto &va = vals_[a.id], &vb = vals_[b.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            axpy(a, g, T(1));
            axpy(b, g, T(1));
        });
        return y;
    }

    Var sub(Var a, Var b) {
        assert(size(a) == size(b));
        auto out = take(size(a));
        const auto &va = vals_[a.id], &vb = vals_[b.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            axpy(a, g, T(1));
            axpy(b, g, T(-1));
        });
        return y;
    }

    Var mul(Var a, Var b) {
        assert(size(a) == size(b));
        auto out = take(size(a));
        const auto &va = vals_[a.id], &vb = vals_[b.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            const std::size_t n = g.size();
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
                const auto& vb2 = vals_[b.id];
#pragma omp parallel for schedule(static) if (n > (1u << 18))
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * vb2[i];
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                const auto& va2 = vals_[a.id];
#pragma omp parallel for schedule(static) if (n > (1u << 18))
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * va2[i];
            }
        });
        return y;
    }

    Var div(Var a, Var b) {
        assert(size(a) == size(b));
        auto out = take(size(a));
        const auto &va = vals_[a.id], &vb = vals_[b.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] / vb[i];
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            const auto &vb2 = vals_[b.id], &vy = vals_[y.id];
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / vb2[i];
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * vy[i] / vb2[i];
            }
        });
        return y;
    }

    Var add_scalar(Var a, T c) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + c;
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (!g.empty()) axpy(a, g, T(1));
        });
        return y;
    }

    Var mul_scalar(Var a, T c) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * c;
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, c] {
            const auto& g = grads_[y.id];
            if (!g.empty()) axpy(a, g, c);
        });
        return y;
    }

    Var elu(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        const std::size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > (1u << 16))
        for (std::size_t i = 0; i < n; ++i)
            out[i] = va[i] > T(0) ? va[i] : std::expm1(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto &va2 = vals_[a.id], &vy = vals_[y.id];
            const std::size_t n = g.size();
#pragma omp parallel for schedule(static) if (n > (1u << 18))
            for (std::size_t i = 0; i < n; ++i)
                ga[i] += g[i] * (va2[i] > T(0) ? T(1) : vy[i] + T(1));
        });
        return y;
    }

    // d/dx elu(x) as a primal value; its own derivative is exp(x) for x<=0
    Var elu_deriv(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = va[i] > T(0) ? T(1) : std::exp(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto &va2 = vals_[a.id], &vy = vals_[y.id];
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * (va2[i] > T(0) ? T(0) : vy[i]);
        });
        return y;
    }

    Var sigmoid(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        const std::size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > (1u << 16))
        for (std::size_t i = 0; i < n; ++i) out[i] = sigm(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& vy = vals_[y.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vy[i] * (T(1) - vy[i]);
        });
        return y;
    }

    // d/dx sigmoid(x) as a primal value; derivative s(1-s)(1-2s)
    Var sigmoid_deriv(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) {
            const T s = sigm(va[i]);
            out[i] = s * (T(1) - s);
        }
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& va2 = vals_[a.id];
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T s = sigm(va2[i]);
                ga[i] += g[i] * s * (T(1) - s) * (T(1) - T(2) * s);
            }
        });
        return y;
    }

    Var tanh_(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& vy = vals_[y.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - vy[i] * vy[i]);
        });
        return y;
    }

    Var softplus(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = va[i] > T(0) ? va[i] + std::log1p(std::exp(-va[i]))
                                  : std::log1p(std::exp(va[i]));
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& va2 = vals_[a.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigm(va2[i]);
        });
        return y;
    }

    Var exp_(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& vy = vals_[y.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vy[i];
        });
        return y;
    }

    Var log_(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& va2 = vals_[a.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / va2[i];
        });
        return y;
    }

    Var square(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * va[i];
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& va2 = vals_[a.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * T(2) * va2[i];
        });
        return y;
    }

    Var sqrt_(Var a) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& vy = vals_[y.id];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (T(2) * vy[i]);
        });
        return y;
    }

    // max(x, c); subgradient passes where x > c
    Var cmax(Var a, T c) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] > c ? va[i] : c;
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, c] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& va2 = vals_[a.id];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (va2[i] > c) ga[i] += g[i];
        });
        return y;
    }

    Var clamp(Var a, T lo, T hi) {
        auto out = take(size(a));
        const auto& va = vals_[a.id];
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = va[i] < lo ? lo : (va[i] > hi ? hi : va[i]);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, lo, hi] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const auto& va2 = vals_[a.id];
            for (std::size_t i = 0; i < g.size(); ++i)
                if (va2[i] > lo && va2[i] < hi) ga[i] += g[i];
        });
        return y;
    }

    // ---- shape ops ----

    Var concat_cols(Var a, int ca, Var b, int cb) {
        assert(size(a) % ca == 0 && size(b) % cb == 0);
        const int m = static_cast<int>(size(a)) / ca;
        assert(static_cast<int>(size(b)) / cb == m);
        auto out = take(static_cast<std::size_t>(m) * (ca + cb));
        const auto &va = vals_[a.id], &vb = vals_[b.id];
        for (int r = 0; r < m; ++r) {
            T* dst = out.data() + static_cast<std::size_t>(r) * (ca + cb);
            std::copy_n(va.data() + static_cast<std::size_t>(r) * ca, ca, dst);
            std::copy_n(vb.data() + static_cast<std::size_t>(r) * cb, cb, dst + ca);
        }
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y, ca, cb, m] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
                for (int r = 0; r < m; ++r)
                    for (int j = 0; j < ca; ++j)
                        ga[static_cast<std::size_t>(r) * ca + j] +=
                            g[static_cast<std::size_t>(r) * (ca + cb) + j];
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                for (int r = 0; r < m; ++r)
                    for (int j = 0; j < cb; ++j)
                        gb[static_cast<std::size_t>(r) * cb + j] +=
                            g[static_cast<std::size_t>(r) * (ca + cb) + ca + j];
            }
        });
        return y;
    }

    Var slice_cols(Var a, int c_total, int start, int len) {
        assert(size(a) % c_total == 0 && start + len <= c_total);
        const int m = static_cast<int>(size(a)) / c_total;
        auto out = take(static_cast<std::size_t>(m) * len);
        const auto& va = vals_[a.id];
        for (int r = 0; r < m; ++r)
            std::copy_n(va.data() + static_cast<std::size_t>(r) * c_total + start, len,
                        out.data() + static_cast<std::size_t>(r) * len);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, c_total, start, len, m] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            for (int r = 0; r < m; ++r)
                for (int j = 0; j < len; ++j)
                    ga[static_cast<std::size_t>(r) * c_total + start + j] +=
                        g[static_cast<std::size_t>(r) * len + j];
        });
        return y;
    }

    // channelwise interleave of two single-channel planes: out[2p]=a[p], out[2p+1]=b[p]
    Var interleave2(Var a, Var b) {
        assert(size(a) == size(b));
        auto out = take(size(a) * 2);
        const auto &va = vals_[a.id], &vb = vals_[b.id];
        for (std::size_t p = 0; p < va.size(); ++p) {
            out[2 * p] = va[p];
            out[2 * p + 1] = vb[p];
        }
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
                for (std::size_t p = 0; p < ga.size(); ++p) ga[p] += g[2 * p];
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                for (std::size_t p = 0; p < gb.size(); ++p) gb[p] += g[2 * p + 1];
            }
        });
        return y;
    }

    // vertical concatenation of equal-width blocks
    Var concat_rows(const std::vector<Var>& parts, int cols) {
        std::size_t total = 0;
        bool req = false;
        for (Var p : parts) {
            assert(size(p) % cols == 0);
            total += size(p);
            req = req || requires_[p.id];
        }
        auto out = take(total);
        std::size_t off = 0;
        for (Var p : parts) {
            const auto& vp = vals_[p.id];
            std::copy(vp.begin(), vp.end(), out.begin() + off);
            off += vp.size();
        }
        Var y = push(std::move(out), req);
        if (requires_[y.id]) record([this, parts, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t n = vals_[p.id].size();
                if (requires_[p.id]) {
                    auto& gp = grad_buf(p);
                    for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                }
                off += n;
            }
        });
        return y;
    }

    Var slice_rows(Var a, int cols, int start_row, int n_rows) {
        assert(size(a) % cols == 0);
        assert(static_cast<std::size_t>(start_row + n_rows) * cols <= size(a));
        const std::size_t off = static_cast<std::size_t>(start_row) * cols;
        const std::size_t n = static_cast<std::size_t>(n_rows) * cols;
        auto out = take(n);
        std::copy_n(vals_[a.id].data() + off, n, out.data());
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, off, n] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            for (std::size_t i = 0; i < n; ++i) ga[off + i] += g[i];
        });
        return y;
    }

    Var take_rows(Var a, int cols, std::vector<int> rows) {
        assert(size(a) % cols == 0);
        auto out = take(rows.size() * static_cast<std::size_t>(cols));
        const auto& va = vals_[a.id];
        for (std::size_t r = 0; r < rows.size(); ++r)
            std::copy_n(va.data() + static_cast<std::size_t>(rows[r]) * cols, cols,
                        out.data() + r * cols);
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, cols, rows = std::move(rows)] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            for (std::size_t r = 0; r < rows.size(); ++r)
                for (int j = 0; j < cols; ++j)
                    ga[static_cast<std::size_t>(rows[r]) * cols + j] += g[r * cols + j];
        });
        return y;
    }

    // ---- reductions ----

    Var rowsum(Var a, int rows, int cols) {
        assert(size(a) == static_cast<std::size_t>(rows) * cols);
        auto out = take(rows);
        const auto& va = vals_[a.id];
        for (int r = 0; r < rows; ++r) {
            double acc = 0;
            const T* p = va.data() + static_cast<std::size_t>(r) * cols;
            for (int j = 0; j < cols; ++j) acc += p[j];
            out[r] = static_cast<T>(acc);
        }
        Var y = push(std::move(out), requires_[a.id]);
        if (requires_[y.id]) record([this, a, y, rows, cols] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            for (int r = 0; r < rows; ++r) {
                T* p = ga.data() + static_cast<std::size_t>(r) * cols;
                const T gr = g[r];
                for (int j = 0; j < cols; ++j) p[j] += gr;
            }
        });
        return y;
    }

    // rowsum((a-b)^2) fused: avoids materializing the difference and square
    Var sse_rows(Var a, Var b, int rows, int cols) {
        assert(size(a) == size(b) && size(a) == static_cast<std::size_t>(rows) * cols);
        auto out = take(rows);
        const auto &va = vals_[a.id], &vb = vals_[b.id];
#pragma omp parallel for schedule(static)
        for (int r = 0; r < rows; ++r) {
            const T* pa = va.data() + static_cast<std::size_t>(r) * cols;
            const T* pb = vb.data() + static_cast<std::size_t>(r) * cols;
            double acc = 0;
            for (int j = 0; j < cols; ++j) {
                const double d = static_cast<double>(pa[j]) - pb[j];
                acc += d * d;
            }
            out[r] = static_cast<T>(acc);
        }
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y, rows, cols] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            const auto &va2 = vals_[a.id], &vb2 = vals_[b.id];
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
#pragma omp parallel for schedule(static)
                for (int r = 0; r < rows; ++r) {
                    const T gr = T(2) * g[r];
                    T* pg = ga.data() + static_cast<std::size_t>(r) * cols;
                    const T* pa = va2.data() + static_cast<std::size_t>(r) * cols;
                    const T* pb = vb2.data() + static_cast<std::size_t>(r) * cols;
                    for (int j = 0; j < cols; ++j) pg[j] += gr * (pa[j] - pb[j]);
                }
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
#pragma omp parallel for schedule(static)
                for (int r = 0; r < rows; ++r) {
                    const T gr = T(2) * g[r];
                    T* pg = gb.data() + static_cast<std::size_t>(r) * cols;
                    const T* pa = va2.data() + static_cast<std::size_t>(r) * cols;
                    const T* pb = vb2.data() + static_cast<std::size_t>(r) * cols;
                    for (int j = 0; j < cols; ++j) pg[j] -= gr * (pa[j] - pb[j]);
                }
            }
        });
        return y;
    }

    Var sum(Var a) {
        const auto& va = vals_[a.id];
        double acc = 0;
        for (const T v : va) acc += v;
        Var y = push(std::vector<T>{static_cast<T>(acc)}, requires_[a.id]);
        if (requires_[y.id]) record([this, a, y] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            auto& ga = grad_buf(a);
            const T gs = g[0];
            for (auto& v : ga) v += gs;
        });
        return y;
    }

    Var mean(Var a) { return mul_scalar(sum(a), T(1) / static_cast<T>(size(a))); }

    // ---- dense algebra ----

    // y[m,n] = op(a)[m,k] * op(b)[k,n]
    Var matmul(Var a, Var b, int m, int k, int n, bool transA = false, bool transB = false) {
        assert(size(a) == static_cast<std::size_t>(m) * k);
        assert(size(b) == static_cast<std::size_t>(k) * n);
        auto out = take(static_cast<std::size_t>(m) * n);
        gemm(transA, transB, m, n, k, T(1), vals_[a.id].data(), vals_[b.id].data(), T(0),
             out.data());
        Var y = push(std::move(out), requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, a, b, y, m, k, n, transA, transB] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
                if (!transA)
                    gemm(false, !transB, m, k, n, T(1), g.data(), vals_[b.id].data(), T(1),
                         ga.data());
                else
                    gemm(transB, true, k, m, n, T(1), vals_[b.id].data(), g.data(), T(1),
                         ga.data());
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                if (!transB)
                    gemm(!transA, false, k, n, m, T(1), vals_[a.id].data(), g.data(), T(1),
                         gb.data());
                else
                    gemm(true, transA, n, k, m, T(1), g.data(), vals_[a.id].data(), T(1),
                         gb.data());
            }
        });
        return y;
    }

    // y = x[m,n] + bias[n] per row
    Var bias_add(Var x, Var bias, int m, int n) {
        assert(size(x) == static_cast<std::size_t>(m) * n && size(bias) == static_cast<std::size_t>(n));
        auto out = take(size(x));
        const auto &vx = vals_[x.id], &vb = vals_[bias.id];
        for (int r = 0; r < m; ++r) {
            const T* px = vx.data() + static_cast<std::size_t>(r) * n;
            T* po = out.data() + static_cast<std::size_t>(r) * n;
            for (int j = 0; j < n; ++j) po[j] = px[j] + vb[j];
        }
        Var y = push(std::move(out), requires_[x.id] || requires_[bias.id]);
        if (requires_[y.id]) record([this, x, bias, y, m, n] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            if (requires_[x.id]) axpy(x, g, T(1));
            if (requires_[bias.id]) {
                auto& gb = grad_buf(bias);
                for (int r = 0; r < m; ++r) {
                    const T* pg = g.data() + static_cast<std::size_t>(r) * n;
                    for (int j = 0; j < n; ++j) gb[j] += pg[j];
                }
            }
        });
        return y;
    }

    Var dense(Var x, Var w, Var b, int m, int k, int n) {
        return bias_add(matmul(x, w, m, k, n), b, m, n);
    }

    // out = mask*a + (1-mask)*b, mask one channel per pixel, a/b `channels` wide
    Var blend(Var mask, Var a, Var b, int pixels, int channels) {
        assert(size(mask) * channels == size(a) && size(a) == size(b));
        assert(size(mask) % pixels == 0);
        auto out = take(size(a));
        const auto &vm = vals_[mask.id], &va = vals_[a.id], &vb = vals_[b.id];
        for (std::size_t p = 0; p < vm.size(); ++p) {
            const T mv = vm[p];
            for (int c = 0; c < channels; ++c)
                out[p * channels + c] = mv * va[p * channels + c] + (T(1) - mv) * vb[p * channels + c];
        }
        Var y = push(std::move(out), requires_[mask.id] || requires_[a.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, mask, a, b, y, channels] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            const auto &vm = vals_[mask.id], &va = vals_[a.id], &vb = vals_[b.id];
            if (requires_[a.id]) {
                auto& ga = grad_buf(a);
                for (std::size_t p = 0; p < vm.size(); ++p)
                    for (int c = 0; c < channels; ++c) ga[p * channels + c] += g[p * channels + c] * vm[p];
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                for (std::size_t p = 0; p < vm.size(); ++p)
                    for (int c = 0; c < channels; ++c)
                        gb[p * channels + c] += g[p * channels + c] * (T(1) - vm[p]);
            }
            if (requires_[mask.id]) {
                auto& gm = grad_buf(mask);
                for (std::size_t p = 0; p < vm.size(); ++p) {
                    double acc = 0;
                    for (int c = 0; c < channels; ++c)
                        acc += static_cast<double>(g[p * channels + c]) *
                               (va[p * channels + c] - vb[p * channels + c]);
                    gm[p] += static_cast<T>(acc);
                }
            }
        });
        return y;
    }

    // ---- convolution (NHWC, square images) ----
    // weight layout: [k*k*Cin, Cout]; input/output rows are whole frames.

    Var conv2d(Var x, int frames, int hw, int cin, Var w, Var b, int cout, int k, int stride,
               int pad) {
        const int ho = (hw + 2 * pad - k) / stride + 1;
        assert(size(x) == static_cast<std::size_t>(frames) * hw * hw * cin);
        const std::size_t orows = static_cast<std::size_t>(frames) * ho * ho;
        auto col = take(orows * static_cast<std::size_t>(k) * k * cin);
        im2col(vals_[x.id].data(), frames, hw, cin, k, stride, pad, col.data());
        auto out = take(orows * cout);
        gemm(false, false, static_cast<int>(orows), cout, k * k * cin, T(1), col.data(),
             vals_[w.id].data(), T(0), out.data());
        {
            const auto& vb = vals_[b.id];
            for (std::size_t r = 0; r < orows; ++r) {
                T* po = out.data() + r * cout;
                for (int j = 0; j < cout; ++j) po[j] += vb[j];
            }
        }
        const bool need = requires_[x.id] || requires_[w.id] || requires_[b.id];
        if (!need) {
            BufferPool<T>::instance().give(std::move(col));
            return push(std::move(out), false);
        }
        Var y = push(std::move(out), true);
        record([this, x, w, b, y, frames, hw, cin, cout, k, stride, pad, orows,
                col = std::move(col)]() mutable {
            const auto& g = grads_[y.id];
            if (g.empty()) {
                BufferPool<T>::instance().give(std::move(col));
                return;
            }
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                for (std::size_t r = 0; r < orows; ++r) {
                    const T* pg = g.data() + r * cout;
                    for (int j = 0; j < cout; ++j) gb[j] += pg[j];
                }
            }
            if (requires_[w.id]) {
                auto& gw = grad_buf(w);
                gemm(true, false, k * k * cin, cout, static_cast<int>(orows), T(1), col.data(),
                     g.data(), T(1), gw.data());
            }
            if (requires_[x.id]) {
                auto dcol = take(orows * static_cast<std::size_t>(k) * k * cin);
                gemm(false, true, static_cast<int>(orows), k * k * cin, cout, T(1), g.data(),
                     vals_[w.id].data(), T(0), dcol.data());
                auto& gx = grad_buf(x);
                col2im_add(dcol.data(), frames, hw, cin, k, stride, pad, gx.data());
                BufferPool<T>::instance().give(std::move(dcol));
            }
            BufferPool<T>::instance().give(std::move(col));
        });
        return y;
    }

    // transposed conv with the geometry adjoint to conv2d(k, stride, pad):
    // output side length = stride*(hw-1) + k - 2*pad. weight: [Cin, k*k*Cout].
    Var conv2d_transpose(Var x, int frames, int hw, int cin, Var w, Var b, int cout, int k,
                         int stride, int pad) {
        const int out_hw = stride * (hw - 1) + k - 2 * pad;
        assert(size(x) == static_cast<std::size_t>(frames) * hw * hw * cin);
        const std::size_t irows = static_cast<std::size_t>(frames) * hw * hw;
        auto colT = take(irows * static_cast<std::size_t>(k) * k * cout);
        gemm(false, false, static_cast<int>(irows), k * k * cout, cin, T(1), vals_[x.id].data(),
             vals_[w.id].data(), T(0), colT.data());
        auto out = BufferPool<T>::instance().take_zero(
            static_cast<std::size_t>(frames) * out_hw * out_hw * cout);
        col2im_add(colT.data(), frames, out_hw, cout, k, stride, pad, out.data());
        BufferPool<T>::instance().give(std::move(colT));
        {
            const auto& vb = vals_[b.id];
            const std::size_t orows = static_cast<std::size_t>(frames) * out_hw * out_hw;
            for (std::size_t r = 0; r < orows; ++r) {
                T* po = out.data() + r * cout;
                for (int j = 0; j < cout; ++j) po[j] += vb[j];
            }
        }
        Var y = push(std::move(out), requires_[x.id] || requires_[w.id] || requires_[b.id]);
        if (requires_[y.id]) record([this, x, w, b, y, frames, hw, cin, cout, k, stride, pad,
                                     out_hw, irows] {
            const auto& g = grads_[y.id];
            if (g.empty()) return;
            if (requires_[b.id]) {
                auto& gb = grad_buf(b);
                const std::size_t orows = static_cast<std::size_t>(frames) * out_hw * out_hw;
                for (std::size_t r = 0; r < orows; ++r) {
                    const T* pg = g.data() + r * cout;
                    for (int j = 0; j < cout; ++j) gb[j] += pg[j];
                }
            }
            auto dcolT = take(irows * static_cast<std::size_t>(k) * k * cout);
            im2col(g.data(), frames, out_hw, cout, k, stride, pad, dcolT.data());
            if (requires_[w.id]) {
                auto& gw = grad_buf(w);
                gemm(true, false, cin, k * k * cout, static_cast<int>(irows), T(1),
                     vals_[x.id].data(), dcolT.data(), T(1), gw.data());
            }
            if (requires_[x.id]) {
                auto& gx = grad_buf(x);
                gemm(false, true, static_cast<int>(irows), cin, k * k * cout, T(1), dcolT.data(),
                     vals_[w.id].data(), T(1), gx.data());
            }
            BufferPool<T>::instance().give(std::move(dcolT));
        });
        return y;
    }

    // ---- backward driver ----

    void backward(Var loss) {
        assert(size(loss) == 1);
        grad_buf(loss)[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
    }

private:
    static T sigm(T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
    }

    std::vector<T> take(std::size_t n) { return BufferPool<T>::instance().take(n); }

    Var push(std::vector<T> v, bool req) {
        vals_.push_back(std::move(v));
        grads_.emplace_back();
        requires_.push_back(req);
        return Var{static_cast<int>(vals_.size()) - 1};
    }

    void record(std::function<void()> f) { nodes_.push_back(std::move(f)); }

    std::vector<T>& grad_buf(Var v) {
        auto& g = grads_[v.id];
        if (g.empty()) g = BufferPool<T>::instance().take_zero(vals_[v.id].size());
        return g;
    }

    void axpy(Var v, const std::vector<T>& g, T alpha) {
        if (!requires_[v.id]) return;
        auto& gv = grad_buf(v);
        const std::size_t n = g.size();
#pragma omp parallel for schedule(static) if (n > (1u << 18))
        for (std::size_t i = 0; i < n; ++i) gv[i] += alpha * g[i];
    }

    // col[(f*ho+oy)*ho+ox, (ky*k+kx)*C+c] = img[f, oy*s-p+ky, ox*s-p+kx, c].
    // For fixed (oy, ky) the k*C destination floats are contiguous, and when
    // the whole kx window is in range the source is contiguous too, so the
    // interior runs as one copy per output pixel. Out-of-range taps are
    // zeroed here; every entry of col is written.
    static void im2col(const T* img, int frames, int hw, int c, int k, int stride, int pad,
                       T* col) {
        const int ho = (hw + 2 * pad - k) / stride + 1;
        const std::size_t row_w = static_cast<std::size_t>(k) * k * c;
        const std::size_t kc = static_cast<std::size_t>(k) * c;
#pragma omp parallel for schedule(static)
        for (int f = 0; f < frames; ++f) {
            const T* src = img + static_cast<std::size_t>(f) * hw * hw * c;
            T* dst_f = col + static_cast<std::size_t>(f) * ho * ho * row_w;
            for (int oy = 0; oy < ho; ++oy) {
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    T* dst_base = dst_f + static_cast<std::size_t>(oy) * ho * row_w +
                                  static_cast<std::size_t>(ky) * kc;
                    if (iy < 0 || iy >= hw) {
                        for (int ox = 0; ox < ho; ++ox)
                            std::fill_n(dst_base + static_cast<std::size_t>(ox) * row_w, kc, T(0));
                        continue;
                    }
                    const T* src_row = src + static_cast<std::size_t>(iy) * hw * c;
                    for (int ox = 0; ox < ho; ++ox) {
                        T* dst = dst_base + static_cast<std::size_t>(ox) * row_w;
                        const int ix0 = ox * stride - pad;
                        if (ix0 >= 0 && ix0 + k <= hw) {
                            std::copy_n(src_row + static_cast<std::size_t>(ix0) * c, kc, dst);
                        } else {
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= hw)
                                    std::fill_n(dst + static_cast<std::size_t>(kx) * c, c, T(0));
                                else
                                    std::copy_n(src_row + static_cast<std::size_t>(ix) * c, c,
                                                dst + static_cast<std::size_t>(kx) * c);
                            }
                        }
                    }
                }
            }
        }
    }

    // adjoint of im2col: img[f, oy*s-p+ky, ox*s-p+kx, c] += col[...]
    static void col2im_add(const T* col, int frames, int hw, int c, int k, int stride, int pad,
                           T* img) {
        const int ho = (hw + 2 * pad - k) / stride + 1;
        const std::size_t row_w = static_cast<std::size_t>(k) * k * c;
        const std::size_t kc = static_cast<std::size_t>(k) * c;
#pragma omp parallel for schedule(static)
        for (int f = 0; f < frames; ++f) {
            T* dst = img + static_cast<std::size_t>(f) * hw * hw * c;
            const T* src_f = col + static_cast<std::size_t>(f) * ho * ho * row_w;
            for (int oy = 0; oy < ho; ++oy) {
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= hw) continue;
                    T* dst_row = dst + static_cast<std::size_t>(iy) * hw * c;
                    const T* src_base = src_f + static_cast<std::size_t>(oy) * ho * row_w +
                                        static_cast<std::size_t>(ky) * kc;
                    for (int ox = 0; ox < ho; ++ox) {
                        const T* src = src_base + static_cast<std::size_t>(ox) * row_w;
                        const int ix0 = ox * stride - pad;
                        if (ix0 >= 0 && ix0 + k <= hw) {
                            T* d = dst_row + static_cast<std::size_t>(ix0) * c;
                            for (std::size_t i = 0; i < kc; ++i) d[i] += src[i];
                        } else {
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= hw) continue;
                                T* d = dst_row + static_cast<std::size_t>(ix) * c;
                                const T* s = src + static_cast<std::size_t>(kx) * c;
                                for (int ch = 0; ch < c; ++ch) d[ch] += s[ch];
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<std::vector<T>> vals_;
    std::vector<std::vector<T>> grads_;
    std::vector<bool> requires_;
    std::vector<std::function<void()>> nodes_;
};

} // namespace semail::ad
