#pragma once

#include <deque>
#include <stdexcept>
#include <vector>

#include "semail/episode.hpp"
#include "semail/rng.hpp"

namespace semail {

// FIFO episode store with bounded capacity.
class ReplayBuffer {
public:
    explicit ReplayBuffer(int capacity = 1000) : capacity_(capacity) {}

    void add_episode(EpisodeRecord ep) {
        if (ep.observations.size() != ep.actions.size() + 1)
            throw std::invalid_argument("episode needs len(observations) == len(actions)+1");
        if (ep.length() < 1) throw std::invalid_argument("episode must contain at least one step");
        episodes_.push_back(std::move(ep));
        while (static_cast<int>(episodes_.size()) > capacity_) episodes_.pop_front();
    }

    int size() const { return static_cast<int>(episodes_.size()); }
    int capacity() const { return capacity_; }
    const EpisodeRecord& episode(int i) const { return episodes_[i]; }

    // number of (episode, start) pairs for a given window length
    long eligible_starts(int length) const {
        long n = 0;
        for (const auto& ep : episodes_)
            if (ep.length() >= length) n += ep.length() - length + 1;
        return n;
    }

private:
    int capacity_;
    std::deque<EpisodeRecord> episodes_;
};

// Fixed-length training windows. observations[b][t] pairs with actions[b][t],
// the action taken from that observation (it produced observations[b][t+1]).
struct SequenceBatch {
    int batch = 0;
    int length = 0;
    int hw = 0;
    int action_dim = 0;
    std::vector<float> observations; // [B, L, H, W, 3]
    std::vector<float> actions;      // [B, L, A]
    std::vector<std::uint8_t> source_flags; // 1 = expert

    const float* obs_at(int b, int t) const {
        return observations.data() +
               (static_cast<std::size_t>(b) * length + t) * hw * hw * 3;
    }
    const float* act_at(int b, int t) const {
        return actions.data() + (static_cast<std::size_t>(b) * length + t) * action_dim;
    }
};

// Uniform draw over the eligible (episode, start) pairs of the union of the
// two buffers; a row's source flag records which buffer it came from.
inline SequenceBatch sample_union_sequences(const ReplayBuffer& agent_buf,
                                            const ReplayBuffer& expert_buf, int batch, int length,
                                            RandomSource& rng) {
    struct Entry {
        const EpisodeRecord* ep;
        bool expert;
        long starts;
    };
    std::vector<Entry> entries;
    long total = 0;
    for (const ReplayBuffer* buf : {&agent_buf, &expert_buf}) {
        for (int i = 0; i < buf->size(); ++i) {
            const auto& ep = buf->episode(i);
            if (ep.length() >= length) {
                const long s = ep.length() - length + 1;
                entries.push_back({&ep, buf == &expert_buf, s});
                total += s;
            }
        }
    }
    if (total == 0)
        throw std::runtime_error("sample_union_sequences: no episode of the requested length");

    SequenceBatch out;
    out.batch = batch;
    out.length = length;
    out.hw = entries.front().ep->observations.front().hw;
    out.action_dim = static_cast<int>(entries.front().ep->actions.front().values.size());
    out.observations.resize(static_cast<std::size_t>(batch) * length * out.hw * out.hw * 3);
    out.actions.resize(static_cast<std::size_t>(batch) * length * out.action_dim);
    out.source_flags.resize(batch);

    for (int b = 0; b < batch; ++b) {
        long pick = static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(total)));
        std::size_t ei = 0;
        while (pick >= entries[ei].starts) {
            pick -= entries[ei].starts;
            ++ei;
        }
        const EpisodeRecord& ep = *entries[ei].ep;
        const int start = static_cast<int>(pick);
        out.source_flags[b] = entries[ei].expert ? 1 : 0;
        for (int t = 0; t < length; ++t) {
            const auto& frame = ep.observations[start + t].pixels;
            std::copy(frame.begin(), frame.end(),
                      out.observations.begin() +
                          (static_cast<std::size_t>(b) * length + t) * out.hw * out.hw * 3);
            const auto& act = ep.actions[start + t].values;
            std::copy(act.begin(), act.end(),
                      out.actions.begin() +
                          (static_cast<std::size_t>(b) * length + t) * out.action_dim);
        }
    }
    return out;
}

} // namespace semail
