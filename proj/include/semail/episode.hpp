#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace semail {

// HxWx3 float frame, values in [0,1], row-major with interleaved channels.
struct ImageObservation {
    int hw = 0;
    std::vector<float> pixels;

    bool valid() const {
        if (pixels.size() != static_cast<std::size_t>(hw) * hw * 3) return false;
        for (const float v : pixels)
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) return false;
        return true;
    }
};

struct Action {
    std::vector<float> values;

    bool valid() const {
        for (const float v : values)
            if (!std::isfinite(v) || v < -1.0f || v > 1.0f) return false;
        return true;
    }
};

// One trajectory: T+1 observations, T actions. True environment rewards are
// kept for evaluation only and never reach a loss.
class EpisodeRecord {
public:
    EpisodeRecord() = default;
    EpisodeRecord(std::vector<ImageObservation> obs, std::vector<Action> actions,
                  std::vector<float> env_rewards, bool is_expert)
        : observations(std::move(obs)),
          actions(std::move(actions)),
          is_expert(is_expert),
          env_rewards_(std::move(env_rewards)) {
        if (observations.size() != this->actions.size() + 1)
            throw std::invalid_argument("episode needs len(observations) == len(actions)+1");
        if (env_rewards_.size() != this->actions.size())
            throw std::invalid_argument("episode needs len(rewards) == len(actions)");
    }

    std::vector<ImageObservation> observations;
    std::vector<Action> actions;
    bool is_expert = false;

    int length() const { return static_cast<int>(actions.size()); }

    // evaluation-only accessor; learners must not call this
    const std::vector<float>& eval_only_rewards() const { return env_rewards_; }
    double eval_only_return() const {
        double r = 0;
        for (const float v : env_rewards_) r += v;
        return r;
    }

private:
    std::vector<float> env_rewards_;
};

namespace detail {

inline void write_array(std::ostream& out, const std::vector<std::uint32_t>& dims,
                        const float* data, std::size_t n) {
    const std::uint32_t nd = static_cast<std::uint32_t>(dims.size());
    out.write(reinterpret_cast<const char*>(&nd), 4);
    for (const std::uint32_t d : dims) out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

inline std::vector<float> read_array(std::istream& in, std::vector<std::uint32_t>& dims) {
    std::uint32_t nd = 0;
    in.read(reinterpret_cast<char*>(&nd), 4);
    dims.assign(nd, 0);
    std::size_t n = 1;
    for (auto& d : dims) {
        in.read(reinterpret_cast<char*>(&d), 4);
        n *= d;
    }
    std::vector<float> data(n);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 4));
    if (!in) throw std::runtime_error("truncated episode array");
    return data;
}

} // namespace detail

// One file per episode: a one-line text header followed by shape-prefixed
// little-endian float32 arrays for observations, actions, rewards.
inline void save_episode(const EpisodeRecord& ep, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write episode file: " + path);
    const int T = ep.length();
    const int hw = ep.observations.front().hw;
    const int A = static_cast<int>(ep.actions.empty() ? 0 : ep.actions.front().values.size());
    out << "SEMAIL-EP v1 T=" << T << " H=" << hw << " W=" << hw << " A=" << A
        << " expert=" << (ep.is_expert ? 1 : 0) << "\n";

    std::vector<float> obs(static_cast<std::size_t>(T + 1) * hw * hw * 3);
    for (int t = 0; t <= T; ++t)
        std::copy(ep.observations[t].pixels.begin(), ep.observations[t].pixels.end(),
                  obs.begin() + static_cast<std::size_t>(t) * hw * hw * 3);
    detail::write_array(out,
                        {static_cast<std::uint32_t>(T + 1), static_cast<std::uint32_t>(hw),
                         static_cast<std::uint32_t>(hw), 3u},
                        obs.data(), obs.size());

    std::vector<float> act(static_cast<std::size_t>(T) * A);
    for (int t = 0; t < T; ++t)
        std::copy(ep.actions[t].values.begin(), ep.actions[t].values.end(),
                  act.begin() + static_cast<std::size_t>(t) * A);
    detail::write_array(out, {static_cast<std::uint32_t>(T), static_cast<std::uint32_t>(A)},
                        act.data(), act.size());

    detail::write_array(out, {static_cast<std::uint32_t>(T)}, ep.eval_only_rewards().data(),
                        ep.eval_only_rewards().size());
}

inline EpisodeRecord load_episode(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open episode file: " + path);
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic, ver;
    hs >> magic >> ver;
    if (magic != "SEMAIL-EP" || ver != "v1")
        throw std::runtime_error("bad episode header in " + path);
    int T = -1, H = -1, W = -1, A = -1, expert = 0;
    std::string tok;
    while (hs >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = tok.substr(0, eq);
        const int v = std::stoi(tok.substr(eq + 1));
        if (k == "T") T = v;
        else if (k == "H") H = v;
        else if (k == "W") W = v;
        else if (k == "A") A = v;
        else if (k == "expert") expert = v;
    }
    if (T < 0 || H < 0 || H != W || A < 0) throw std::runtime_error("bad episode header in " + path);

    std::vector<std::uint32_t> dims;
    const auto obs = detail::read_array(in, dims);
    const auto act = detail::read_array(in, dims);
    auto rew = detail::read_array(in, dims);

    std::vector<ImageObservation> observations(T + 1);
    for (int t = 0; t <= T; ++t) {
        observations[t].hw = H;
        observations[t].pixels.assign(obs.begin() + static_cast<std::size_t>(t) * H * W * 3,
                                      obs.begin() + static_cast<std::size_t>(t + 1) * H * W * 3);
    }
    std::vector<Action> actions(T);
    for (int t = 0; t < T; ++t)
        actions[t].values.assign(act.begin() + static_cast<std::size_t>(t) * A,
                                 act.begin() + static_cast<std::size_t>(t + 1) * A);
    return EpisodeRecord(std::move(observations), std::move(actions), std::move(rew), expert != 0);
}

} // namespace semail
