#pragma once

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "semail/buffer.hpp"
#include "semail/config.hpp"
#include "semail/nn.hpp"
#include "semail/rng.hpp"
#include "semail/tape.hpp"

namespace semail {

template <class T>
struct Gaussian {
    std::vector<T> mean;
    std::vector<T> stddev;
};

template <class T>
struct BranchState {
    std::vector<T> deter;
    std::vector<T> stoch;
};

template <class T>
struct SplitLatentState {
    BranchState<T> task;
    BranchState<T> background;
};

template <class T>
struct MaskedReconstruction {
    int hw = 0;
    std::vector<T> o_hat_plus;  // [H*W*3]
    std::vector<T> o_hat_minus; // [H*W*3]
    std::vector<T> mask_plus;   // [H*W]
    std::vector<T> mask_minus;  // [H*W]
    std::vector<T> mask_final;  // [H*W]
    std::vector<T> o_hat;       // [H*W*3]
};

// Two recurrent state-space branches over a shared observation stream. The
// task branch is conditioned on actions; the background branch never sees
// them (unless the no_act ablation is on). Each branch owns its encoder,
// dynamics, posterior and decoder; reconstruction fuses the two decoded
// images through a learned mask, and an auxiliary decoder reconstructs the
// full frame from the background state alone.
template <class T>
class WorldModel {
public:
    using Tape = ad::Tape<T>;
    using Var = typename Tape::Var;

    struct Sizes {
        int image = 32;
        int conv_depth = 8;
        int deter = 200;
        int stoch = 30;
        int hidden = 300;
        int action_dim = 2;
        bool no_act = false;
        bool no_bor = false;
        bool joint = false; // single-branch baseline: no background model at all

        static Sizes from_config(const ExperimentConfig& cfg, int action_dim) {
            Sizes s;
            s.image = cfg.image_size;
            s.conv_depth = cfg.conv_depth;
            s.deter = cfg.deter_size;
            s.stoch = cfg.stoch_size;
            s.hidden = cfg.dense_units;
            s.action_dim = action_dim;
            s.no_act = cfg.no_act;
            s.no_bor = cfg.no_bor;
            s.joint = cfg.joint_model;
            return s;
        }

        int levels() const {
            int l = 0, s = image;
            while (s > 2) {
                s /= 2;
                ++l;
            }
            return l;
        }
        int top_channels() const { return conv_depth << (levels() - 1); }
        int embed() const { return 4 * top_channels(); }
        int state_dim() const { return stoch + deter; }
    };

    static constexpr T kMinStd = T(0.1);
    static constexpr int kKernel = 4;
    // non-overlapping 2x2 blocks on the upsampling path: same output size,
    // a quarter of the im2col traffic of mirrored k4 deconvolutions
    static constexpr int kDeconvKernel = 2;

    explicit WorldModel(const Sizes& sizes, RandomSource& rng) : sz_(sizes) {
        build_encoder(enc_task_, "enc_task", rng);
        build_decoder(dec_task_, "dec_task", sz_.joint ? 3 : 4, rng);
        build_rssm(dyn_task_, post_task_, "task", sz_.stoch + sz_.action_dim, rng);
        if (!sz_.joint) {
            build_encoder(enc_bg_, "enc_bg", rng);
            build_decoder(dec_bg_, "dec_bg", 4, rng);
            const int bg_in = sz_.stoch + (sz_.no_act ? sz_.action_dim : 0);
            build_rssm(dyn_bg_, post_bg_, "bg", bg_in, rng);
            fusion_w_ = &fusion_.add("fusion/w", 3 * 3 * 2, 1);
            fusion_b_ = &fusion_.add("fusion/b", 1, 1);
            nn::init_xavier(*fusion_w_, rng);
            build_decoder(bor_, "bor", 3, rng);
        }
    }

    const Sizes& sizes() const { return sz_; }

    std::vector<nn::Bundle<T>*> bundles() {
        std::vector<nn::Bundle<T>*> out = {&enc_task_, &dyn_task_, &post_task_, &dec_task_};
        if (!sz_.joint) {
            out.push_back(&enc_bg_);
            out.push_back(&dyn_bg_);
            out.push_back(&post_bg_);
            out.push_back(&dec_bg_);
            out.push_back(&fusion_);
            out.push_back(&bor_);
        }
        return out;
    }
    nn::Bundle<T>& bundle(const std::string& name) {
        for (auto* b : bundles())
            if (b->name == name) return *b;
        throw std::runtime_error("no bundle named " + name);
    }

    // ---- graph builders ----

    struct StateVars {
        Var stoch, deter;
    };
    struct StatsVars {
        Var mean, stddev;
    };

    StateVars initial_state_vars(Tape& tape, int m) const {
        return {tape.constant(std::vector<T>(static_cast<std::size_t>(m) * sz_.stoch, T(0))),
                tape.constant(std::vector<T>(static_cast<std::size_t>(m) * sz_.deter, T(0)))};
    }

    // conv stack over frames (rows = frames, already shifted to [-0.5, 0.5])
    Var embed_graph(Tape& tape, nn::Binding<T>& bind, bool background, Var obs, int frames) const {
        const Encoder& enc = background ? enc_bg_arch_ : enc_task_arch_;
        Var x = obs;
        int hw = sz_.image, cin = 3;
        for (std::size_t l = 0; l < enc.convs.size(); ++l) {
            const int cout = enc.channels[l];
            x = tape.conv2d(x, frames, hw, cin, bind(*enc.convs[l].first), bind(*enc.convs[l].second),
                            cout, kKernel, 2, 1);
            x = tape.elu(x);
            hw /= 2;
            cin = cout;
        }
        return x; // [frames, embed]
    }

    // One filtering step of a branch: advance the deterministic state with
    // the previous posterior sample, produce prior and posterior statistics,
    // sample the posterior. `action` is ignored by the background branch
    // unless no_act is set; pass an invalid Var for the first step.
    struct StepVars {
        StateVars state;   // posterior sample + new deter
        StatsVars prior;
        StatsVars posterior;
    };

    StepVars filter_step_graph(Tape& tape, nn::Binding<T>& bind, bool background, StateVars prev,
                               Var action, Var embed_t, Var noise, int m) const {
        auto [deter, prior] = prior_core(tape, bind, background, prev, action, m);
        const Posterior& post = background ? posterior_bg_ : posterior_task_;
        Var pin = tape.concat_cols(deter, sz_.deter, embed_t, sz_.embed());
        Var h = tape.elu(post.h.apply(tape, bind, pin, m));
        Var stats = post.stats.apply(tape, bind, h, m);
        StatsVars ps = split_stats(tape, stats, m);
        Var stoch = tape.add(ps.mean, tape.mul(ps.stddev, noise));
        return {{stoch, deter}, prior, ps};
    }

    // prior-only step used by imagination
    std::pair<StateVars, StatsVars> prior_step_graph(Tape& tape, nn::Binding<T>& bind,
                                                     bool background, StateVars prev, Var action,
                                                     Var noise, int m) const {
        auto [deter, prior] = prior_core(tape, bind, background, prev, action, m);
        Var stoch = tape.add(prior.mean, tape.mul(prior.stddev, noise));
        return {StateVars{stoch, deter}, prior};
    }

    struct FilterGraph {
        int B = 0, L = 0;
        Var obs;        // [L*B, H*W*3] shifted, t-major
        Var embed_task; // [L*B, E]
        Var embed_bg;   // invalid in joint mode
        std::vector<StateVars> task_states;
        std::vector<StatsVars> task_prior, task_post;
        std::vector<StateVars> bg_states;
        std::vector<StatsVars> bg_prior, bg_post;
    };

    // Left-to-right filtering of a sequence batch over both branches.
    FilterGraph build_filter(Tape& tape, nn::Binding<T>& bind, const SequenceBatch& batch,
                             RandomSource& rng) const {
        const int B = batch.batch, L = batch.length;
        FilterGraph g;
        g.B = B;
        g.L = L;
        g.obs = tape.constant(obs_tmajor(batch));
        const int frames = B * L;
        g.embed_task = embed_graph(tape, bind, false, g.obs, frames);
        if (!sz_.joint) g.embed_bg = embed_graph(tape, bind, true, g.obs, frames);

        StateVars task = initial_state_vars(tape, B);
        StateVars bg = initial_state_vars(tape, B);
        for (int t = 0; t < L; ++t) {
            Var action{};
            if (t > 0) action = tape.constant(actions_at(batch, t - 1));
            Var et = tape.slice_rows(g.embed_task, sz_.embed(), t * B, B);
            auto st = filter_step_graph(tape, bind, false, task, action, et, noise_var(tape, rng, B),
                                        B);
            task = st.state;
            g.task_states.push_back(st.state);
            g.task_prior.push_back(st.prior);
            g.task_post.push_back(st.posterior);
            if (!sz_.joint) {
                Var eb = tape.slice_rows(g.embed_bg, sz_.embed(), t * B, B);
                auto sb = filter_step_graph(tape, bind, true, bg, action, eb, noise_var(tape, rng, B),
                                            B);
                bg = sb.state;
                g.bg_states.push_back(sb.state);
                g.bg_prior.push_back(sb.prior);
                g.bg_post.push_back(sb.posterior);
            }
        }
        return g;
    }

    // mean over batch and time of the per-step branch KLs, each clipped
    // below by free_nats, scaled by kl_beta
    Var kl_loss_graph(Tape& tape, const FilterGraph& g, double free_nats, double kl_beta) const {
        Var total = tape.scalar_const(T(0));
        for (int t = 0; t < g.L; ++t) {
            total = tape.add(total,
                             tape.sum(tape.cmax(kl_rows(tape, g.task_post[t], g.task_prior[t], g.B),
                                                static_cast<T>(free_nats))));
            if (!sz_.joint)
                total = tape.add(total,
                                 tape.sum(tape.cmax(kl_rows(tape, g.bg_post[t], g.bg_prior[t], g.B),
                                                    static_cast<T>(free_nats))));
        }
        return tape.mul_scalar(total, static_cast<T>(kl_beta / (static_cast<double>(g.B) * g.L)));
    }

    struct DecodeVars {
        Var o_hat_plus;  // [m, H*W*3]
        Var o_hat_minus; // invalid in joint mode
        Var mask_plus;   // [m, H*W]
        Var mask_minus;
        Var mask_final;
        Var o_hat;
    };

    // Branch decoders emit an image and a mask channel; a 3x3 convolution
    // over the two masks yields the fused mask M and
    // o_hat = M * o_plus + (1-M) * o_minus.
    DecodeVars decode_joint_graph(Tape& tape, nn::Binding<T>& bind, Var task_state, Var bg_state,
                                  int m) const {
        DecodeVars d;
        if (sz_.joint) {
            d.o_hat_plus = decode_stack(tape, bind, dec_task_, task_state, m);
            d.o_hat = d.o_hat_plus;
            return d;
        }
        Var out_p = decode_stack(tape, bind, dec_task_, task_state, m);
        Var out_m = decode_stack(tape, bind, dec_bg_, bg_state, m);
        const int px = sz_.image * sz_.image;
        d.o_hat_plus = tape.slice_cols(out_p, 4, 0, 3);  // rows are pixels
        d.mask_plus = tape.sigmoid(tape.slice_cols(out_p, 4, 3, 1));
        d.o_hat_minus = tape.slice_cols(out_m, 4, 0, 3);
        d.mask_minus = tape.sigmoid(tape.slice_cols(out_m, 4, 3, 1));
        Var stacked = tape.interleave2(d.mask_plus, d.mask_minus); // [m, H*W*2]
        Var fused = tape.conv2d(stacked, m, sz_.image, 2, bind(*fusion_w_), bind(*fusion_b_), 1, 3,
                                1, 1);
        d.mask_final = tape.sigmoid(fused);
        d.o_hat = tape.blend(d.mask_final, d.o_hat_plus, d.o_hat_minus, m * px, 3);
        return d;
    }

    Var decode_background_only_graph(Tape& tape, nn::Binding<T>& bind, Var bg_state, int m) const {
        return decode_stack(tape, bind, bor_, bg_state, m);
    }

    // negative mean log-likelihood of the frames under unit-variance
    // Gaussians centered at the fused reconstruction, plus bor_weight times
    // the same for the background-only decoder
    struct ReconLoss {
        Var total;
        Var joint_nll;
        Var bor_nll; // invalid when skipped
        DecodeVars decode;
    };

    ReconLoss recon_loss_graph(Tape& tape, nn::Binding<T>& bind, const FilterGraph& g,
                               double bor_weight) const {
        const int frames = g.B * g.L;
        Var task_all = concat_states(tape, g.task_states, g.L);
        Var bg_all{};
        if (!sz_.joint) bg_all = concat_states(tape, g.bg_states, g.L);
        ReconLoss r;
        r.decode = decode_joint_graph(tape, bind, task_all, bg_all, frames);
        r.joint_nll = nll_gaussian(tape, r.decode.o_hat, g.obs, frames);
        r.total = r.joint_nll;
        if (!sz_.joint && bor_weight != 0.0) {
            Var bor = decode_background_only_graph(tape, bind, bg_all, frames);
            r.bor_nll = nll_gaussian(tape, bor, g.obs, frames);
            r.total = tape.add(r.total, tape.mul_scalar(r.bor_nll, static_cast<T>(bor_weight)));
        }
        return r;
    }

    // ---- numeric (spec-operation) wrappers; forward only ----

    BranchState<T> zero_state() const {
        return {std::vector<T>(sz_.deter, T(0)), std::vector<T>(sz_.stoch, T(0))};
    }

    std::pair<std::vector<T>, std::vector<T>> encode(const ImageObservation& obs) {
        if (obs.hw != sz_.image) throw std::invalid_argument("encode: wrong image size");
        Tape tape;
        nn::Binding<T> bind(tape, false);
        Var o = tape.constant(shift_frame(obs));
        Var et = embed_graph(tape, bind, false, o, 1);
        std::vector<T> eb;
        if (!sz_.joint) eb = tape.val(embed_graph(tape, bind, true, o, 1));
        return {tape.val(et), eb};
    }

    std::vector<T> encode_task(const ImageObservation& obs) {
        if (obs.hw != sz_.image) throw std::invalid_argument("encode: wrong image size");
        Tape tape;
        nn::Binding<T> bind(tape, false);
        Var o = tape.constant(shift_frame(obs));
        return tape.val(embed_graph(tape, bind, false, o, 1));
    }

    // rng == nullptr filters with the posterior mean (deterministic eval)
    std::pair<BranchState<T>, Gaussian<T>> posterior_task_opt(const std::vector<T>& embed,
                                                              const BranchState<T>& prev,
                                                              const std::vector<T>& action,
                                                              RandomSource* rng) {
        return posterior_numeric_opt(false, embed, prev, action, rng);
    }
    std::pair<BranchState<T>, Gaussian<T>> posterior_background_opt(const std::vector<T>& embed,
                                                                    const BranchState<T>& prev,
                                                                    const std::vector<T>& action,
                                                                    RandomSource* rng) {
        return posterior_numeric_opt(true, embed, prev, action, rng);
    }

    std::pair<BranchState<T>, Gaussian<T>> prior_task(const BranchState<T>& prev,
                                                      const std::vector<T>& action,
                                                      RandomSource& rng) {
        return prior_numeric(false, prev, action, rng);
    }

    std::pair<BranchState<T>, Gaussian<T>> prior_background(const BranchState<T>& prev,
                                                            RandomSource& rng) {
        if (sz_.no_act)
            throw std::logic_error("prior_background without action requires no_act=false");
        return prior_numeric(true, prev, {}, rng);
    }

    // ablated background prior (no_act=true): the signature gains the action
    std::pair<BranchState<T>, Gaussian<T>> prior_background_ablated(const BranchState<T>& prev,
                                                                    const std::vector<T>& action,
                                                                    RandomSource& rng) {
        if (!sz_.no_act) throw std::logic_error("prior_background_ablated requires no_act=true");
        return prior_numeric(true, prev, action, rng);
    }

    std::pair<BranchState<T>, Gaussian<T>> posterior_task(const std::vector<T>& embed,
                                                          const BranchState<T>& prev,
                                                          const std::vector<T>& action,
                                                          RandomSource& rng) {
        return posterior_numeric(false, embed, prev, action, rng);
    }

    std::pair<BranchState<T>, Gaussian<T>> posterior_background(const std::vector<T>& embed,
                                                                const BranchState<T>& prev,
                                                                RandomSource& rng) {
        if (sz_.no_act)
            throw std::logic_error("posterior_background without action requires no_act=false");
        return posterior_numeric(true, embed, prev, {}, rng);
    }

    std::pair<BranchState<T>, Gaussian<T>> posterior_background_ablated(
        const std::vector<T>& embed, const BranchState<T>& prev, const std::vector<T>& action,
        RandomSource& rng) {
        if (!sz_.no_act) throw std::logic_error("posterior_background_ablated requires no_act=true");
        return posterior_numeric(true, embed, prev, action, rng);
    }

    MaskedReconstruction<T> decode_joint(const SplitLatentState<T>& z) {
        Tape tape;
        nn::Binding<T> bind(tape, false);
        Var ts = tape.constant(concat_state(z.task));
        Var bs{};
        if (!sz_.joint) bs = tape.constant(concat_state(z.background));
        DecodeVars d = decode_joint_graph(tape, bind, ts, bs, 1);
        MaskedReconstruction<T> out;
        out.hw = sz_.image;
        out.o_hat_plus = shift_back(tape.val(d.o_hat_plus));
        out.o_hat = shift_back(tape.val(d.o_hat));
        if (!sz_.joint) {
            out.o_hat_minus = shift_back(tape.val(d.o_hat_minus));
            out.mask_plus = tape.val(d.mask_plus);
            out.mask_minus = tape.val(d.mask_minus);
            out.mask_final = tape.val(d.mask_final);
        }
        return out;
    }

    std::vector<T> decode_background_only(const BranchState<T>& z_minus) {
        if (sz_.joint) throw std::logic_error("no background decoder in joint mode");
        Tape tape;
        nn::Binding<T> bind(tape, false);
        Var bs = tape.constant(concat_state(z_minus));
        return shift_back(tape.val(decode_background_only_graph(tape, bind, bs, 1)));
    }

    struct FilterResult {
        std::vector<BranchState<T>> task_states, bg_states; // per (t, row-major batch)
        std::vector<Gaussian<T>> task_prior, task_post, bg_prior, bg_post; // flattened rows per t
        // per-step flattened copies of the batched tensors:
        std::vector<std::vector<T>> task_stoch, task_deter, bg_stoch, bg_deter; // [t][B*dim]
    };

    FilterResult observe_sequence(const SequenceBatch& batch, RandomSource& rng) {
        Tape tape;
        nn::Binding<T> bind(tape, false);
        FilterGraph g = build_filter(tape, bind, batch, rng);
        FilterResult r;
        for (int t = 0; t < g.L; ++t) {
            r.task_stoch.push_back(tape.val(g.task_states[t].stoch));
            r.task_deter.push_back(tape.val(g.task_states[t].deter));
            r.task_prior.push_back({tape.val(g.task_prior[t].mean), tape.val(g.task_prior[t].stddev)});
            r.task_post.push_back({tape.val(g.task_post[t].mean), tape.val(g.task_post[t].stddev)});
            if (!sz_.joint) {
                r.bg_stoch.push_back(tape.val(g.bg_states[t].stoch));
                r.bg_deter.push_back(tape.val(g.bg_states[t].deter));
                r.bg_prior.push_back({tape.val(g.bg_prior[t].mean), tape.val(g.bg_prior[t].stddev)});
                r.bg_post.push_back({tape.val(g.bg_post[t].mean), tape.val(g.bg_post[t].stddev)});
            }
        }
        return r;
    }

    // ---- shared helpers ----

    static std::vector<T> concat_state(const BranchState<T>& s) {
        std::vector<T> out;
        out.reserve(s.stoch.size() + s.deter.size());
        out.insert(out.end(), s.stoch.begin(), s.stoch.end());
        out.insert(out.end(), s.deter.begin(), s.deter.end());
        return out;
    }

    Var concat_states(Tape& tape, const std::vector<StateVars>& states, int L) const {
        std::vector<Var> parts;
        parts.reserve(L);
        for (int t = 0; t < L; ++t)
            parts.push_back(tape.concat_cols(states[t].stoch, sz_.stoch, states[t].deter, sz_.deter));
        return tape.concat_rows(parts, sz_.state_dim());
    }

    std::vector<T> obs_tmajor(const SequenceBatch& batch) const {
        const std::size_t fsz = static_cast<std::size_t>(batch.hw) * batch.hw * 3;
        std::vector<T> out(static_cast<std::size_t>(batch.batch) * batch.length * fsz);
        for (int t = 0; t < batch.length; ++t)
            for (int b = 0; b < batch.batch; ++b) {
                const float* src = batch.obs_at(b, t);
                T* dst = out.data() + (static_cast<std::size_t>(t) * batch.batch + b) * fsz;
                for (std::size_t i = 0; i < fsz; ++i) dst[i] = static_cast<T>(src[i]) - T(0.5);
            }
        return out;
    }

    std::vector<T> actions_at(const SequenceBatch& batch, int t) const {
        std::vector<T> out(static_cast<std::size_t>(batch.batch) * batch.action_dim);
        for (int b = 0; b < batch.batch; ++b) {
            const float* src = batch.act_at(b, t);
            for (int j = 0; j < batch.action_dim; ++j)
                out[static_cast<std::size_t>(b) * batch.action_dim + j] = static_cast<T>(src[j]);
        }
        return out;
    }

    Var noise_var(Tape& tape, RandomSource& rng, int m) const {
        std::vector<T> n(static_cast<std::size_t>(m) * sz_.stoch);
        rng.fill_normal(n);
        return tape.constant(std::move(n));
    }

    std::vector<T> shift_frame(const ImageObservation& obs) const {
        std::vector<T> out(obs.pixels.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(obs.pixels[i]) - T(0.5);
        return out;
    }

    static std::vector<T> shift_back(std::vector<T> v) {
        for (auto& x : v) x += T(0.5);
        return v;
    }

    Var nll_gaussian(Tape& tape, Var pred, Var target, int frames) const {
        const int dim = sz_.image * sz_.image * 3;
        Var se = tape.sse_rows(pred, target, frames, dim);
        Var nll = tape.add_scalar(tape.mul_scalar(se, T(0.5)),
                                  static_cast<T>(0.5 * dim * std::log(2.0 * M_PI)));
        return tape.mean(nll);
    }

    // elementwise KL(q || p) summed per row
    Var kl_rows(Tape& tape, const StatsVars& q, const StatsVars& p, int m) const {
        Var lp = tape.log_(p.stddev);
        Var lq = tape.log_(q.stddev);
        Var num = tape.add(tape.square(q.stddev), tape.square(tape.sub(q.mean, p.mean)));
        Var den = tape.mul_scalar(tape.square(p.stddev), T(2));
        Var kl = tape.add_scalar(tape.add(tape.sub(lp, lq), tape.div(num, den)), T(-0.5));
        return tape.rowsum(kl, m, sz_.stoch);
    }

private:
    struct Encoder {
        std::vector<std::pair<nn::Param<T>*, nn::Param<T>*>> convs; // (w, b)
        std::vector<int> channels;
    };
    struct Decoder {
        nn::DenseLayer<T> input;
        std::vector<std::pair<nn::Param<T>*, nn::Param<T>*>> deconvs; // (w, b), w: [Cin, k*k*Cout]
        std::vector<int> in_channels, out_channels;
        nn::Bundle<T>* owner = nullptr;
    };
    struct Rssm {
        nn::DenseLayer<T> in_dense;  // (stoch [+ action]) -> deter
        nn::GruCell<T> gru;          // deter
        nn::DenseLayer<T> prior_h;   // deter -> hidden
        nn::DenseLayer<T> prior_stats; // hidden -> 2*stoch
    };
    struct Posterior {
        nn::DenseLayer<T> h;     // deter + embed -> hidden
        nn::DenseLayer<T> stats; // hidden -> 2*stoch
    };

    void build_encoder(nn::Bundle<T>& bundle, const std::string& name, RandomSource& rng) {
        bundle.name = name;
        Encoder enc;
        int cin = 3;
        for (int l = 0; l < sz_.levels(); ++l) {
            const int cout = sz_.conv_depth << l;
            auto& w = bundle.add("conv" + std::to_string(l) + "/w", kKernel * kKernel * cin, cout);
            auto& b = bundle.add("conv" + std::to_string(l) + "/b", cout, 1);
            nn::init_xavier(w, rng);
            enc.convs.push_back({&w, &b});
            enc.channels.push_back(cout);
            cin = cout;
        }
        if (&bundle == &enc_task_) enc_task_arch_ = enc;
        else enc_bg_arch_ = enc;
    }

    void build_decoder_arch(nn::Bundle<T>& bundle, Decoder& dec, int out_ch, RandomSource& rng) {
        dec.owner = &bundle;
        dec.input.build(bundle, "input", sz_.state_dim(), sz_.embed(), rng);
        const int L = sz_.levels();
        for (int l = 0; l < L; ++l) {
            const int cin = sz_.conv_depth << (L - 1 - l);
            const int cout = (l == L - 1) ? out_ch : (sz_.conv_depth << (L - 2 - l));
            auto& w = bundle.add("deconv" + std::to_string(l) + "/w", cin,
                                 kDeconvKernel * kDeconvKernel * cout);
            auto& b = bundle.add("deconv" + std::to_string(l) + "/b", cout, 1);
            nn::init_xavier(w, rng);
            dec.deconvs.push_back({&w, &b});
            dec.in_channels.push_back(cin);
            dec.out_channels.push_back(cout);
        }
    }

    void build_decoder(nn::Bundle<T>& bundle, const std::string& name, int out_ch,
                       RandomSource& rng) {
        bundle.name = name;
        if (&bundle == &dec_task_) build_decoder_arch(bundle, dec_task_arch_, out_ch, rng);
        else if (&bundle == &dec_bg_) build_decoder_arch(bundle, dec_bg_arch_, out_ch, rng);
        else build_decoder_arch(bundle, bor_arch_, out_ch, rng);
    }

    void build_rssm(nn::Bundle<T>& dyn, nn::Bundle<T>& post, const std::string& which, int in_dim,
                    RandomSource& rng) {
        dyn.name = "dyn_" + which;
        post.name = "post_" + which;
        Rssm& r = (&dyn == &dyn_task_) ? rssm_task_ : rssm_bg_;
        Posterior& p = (&dyn == &dyn_task_) ? posterior_task_ : posterior_bg_;
        r.in_dense.build(dyn, "in", in_dim, sz_.deter, rng);
        r.gru.build(dyn, "gru", sz_.deter, sz_.deter, rng);
        r.prior_h.build(dyn, "prior_h", sz_.deter, sz_.hidden, rng);
        r.prior_stats.build(dyn, "prior_stats", sz_.hidden, 2 * sz_.stoch, rng);
        p.h.build(post, "post_h", sz_.deter + sz_.embed(), sz_.hidden, rng);
        p.stats.build(post, "post_stats", sz_.hidden, 2 * sz_.stoch, rng);
    }

    StatsVars split_stats(Tape& tape, Var stats, int m) const {
        Var mean = tape.slice_cols(stats, 2 * sz_.stoch, 0, sz_.stoch);
        Var raw = tape.slice_cols(stats, 2 * sz_.stoch, sz_.stoch, sz_.stoch);
        Var std = tape.add_scalar(tape.softplus(raw), kMinStd);
        return {mean, std};
    }

    std::pair<Var, StatsVars> prior_core(Tape& tape, nn::Binding<T>& bind, bool background,
                                         StateVars prev, Var action, int m) const {
        const Rssm& r = background ? rssm_bg_ : rssm_task_;
        const bool wants_action = background ? sz_.no_act : true;
        Var x;
        if (wants_action) {
            Var a = action.valid()
                        ? action
                        : tape.constant(std::vector<T>(static_cast<std::size_t>(m) * sz_.action_dim,
                                                       T(0)));
            x = tape.concat_cols(prev.stoch, sz_.stoch, a, sz_.action_dim);
        } else {
            x = prev.stoch;
        }
        Var xe = tape.elu(r.in_dense.apply(tape, bind, x, m));
        Var deter = r.gru.apply(tape, bind, xe, prev.deter, m);
        Var h = tape.elu(r.prior_h.apply(tape, bind, deter, m));
        Var stats = r.prior_stats.apply(tape, bind, h, m);
        return {deter, split_stats(tape, stats, m)};
    }

    Var decode_stack(Tape& tape, nn::Binding<T>& bind, const nn::Bundle<T>& bundle, Var state,
                     int m) const {
        const Decoder& dec = (&bundle == &dec_task_) ? dec_task_arch_
                             : (&bundle == &dec_bg_) ? dec_bg_arch_
                                                     : bor_arch_;
        Var x = dec.input.apply(tape, bind, state, m);
        int hw = 2;
        for (std::size_t l = 0; l < dec.deconvs.size(); ++l) {
            x = tape.conv2d_transpose(x, m, hw, dec.in_channels[l], bind(*dec.deconvs[l].first),
                                      bind(*dec.deconvs[l].second), dec.out_channels[l],
                                      kDeconvKernel, 2, 0);
            if (l + 1 < dec.deconvs.size()) x = tape.elu(x);
            hw *= 2;
        }
        return x; // [m, H*W*out_ch]
    }

    std::pair<BranchState<T>, Gaussian<T>> prior_numeric(bool background,
                                                         const BranchState<T>& prev,
                                                         const std::vector<T>& action,
                                                         RandomSource& rng) {
        check_state(prev);
        Tape tape;
        nn::Binding<T> bind(tape, false);
        StateVars pv{tape.constant(prev.stoch), tape.constant(prev.deter)};
        Var av{};
        const bool wants_action = background ? sz_.no_act : true;
        if (wants_action) {
            if (static_cast<int>(action.size()) != sz_.action_dim)
                throw std::invalid_argument("action dimension mismatch");
            av = tape.constant(action);
        }
        auto [state, stats] = prior_step_graph(tape, bind, background, pv, av,
                                               noise_var(tape, rng, 1), 1);
        return {{tape.val(state.deter), tape.val(state.stoch)},
                {tape.val(stats.mean), tape.val(stats.stddev)}};
    }

    std::pair<BranchState<T>, Gaussian<T>> posterior_numeric(bool background,
                                                             const std::vector<T>& embed,
                                                             const BranchState<T>& prev,
                                                             const std::vector<T>& action,
                                                             RandomSource& rng) {
        return posterior_numeric_opt(background, embed, prev, action, &rng);
    }

    std::pair<BranchState<T>, Gaussian<T>> posterior_numeric_opt(bool background,
                                                                 const std::vector<T>& embed,
                                                                 const BranchState<T>& prev,
                                                                 const std::vector<T>& action,
                                                                 RandomSource* rng) {
        check_state(prev);
        if (static_cast<int>(embed.size()) != sz_.embed())
            throw std::invalid_argument("embed dimension mismatch");
        Tape tape;
        nn::Binding<T> bind(tape, false);
        StateVars pv{tape.constant(prev.stoch), tape.constant(prev.deter)};
        Var av{};
        const bool wants_action = background ? sz_.no_act : true;
        if (wants_action && !action.empty()) av = tape.constant(action);
        Var noise = rng ? noise_var(tape, *rng, 1)
                        : tape.constant(std::vector<T>(sz_.stoch, T(0)));
        auto step = filter_step_graph(tape, bind, background, pv, av, tape.constant(embed), noise,
                                      1);
        return {{tape.val(step.state.deter), tape.val(step.state.stoch)},
                {tape.val(step.posterior.mean), tape.val(step.posterior.stddev)}};
    }

    void check_state(const BranchState<T>& s) const {
        if (static_cast<int>(s.deter.size()) != sz_.deter ||
            static_cast<int>(s.stoch.size()) != sz_.stoch)
            throw std::invalid_argument("branch state dimension mismatch");
    }

    Sizes sz_;
    nn::Bundle<T> enc_task_, enc_bg_;
    nn::Bundle<T> dyn_task_, dyn_bg_;
    nn::Bundle<T> post_task_, post_bg_;
    nn::Bundle<T> dec_task_, dec_bg_;
    nn::Bundle<T> fusion_{"fusion"};
    nn::Bundle<T> bor_;
    Encoder enc_task_arch_, enc_bg_arch_;
    Decoder dec_task_arch_, dec_bg_arch_, bor_arch_;
    Rssm rssm_task_, rssm_bg_;
    Posterior posterior_task_, posterior_bg_;
    nn::Param<T>* fusion_w_ = nullptr;
    nn::Param<T>* fusion_b_ = nullptr;
};

} // namespace semail
