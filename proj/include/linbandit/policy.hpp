#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "linbandit/arm_model.hpp"
#include "linbandit/common.hpp"
#include "linbandit/slate.hpp"

namespace linbandit {

enum class PolicyKind { Lin, LinGreedy, LinUCB, LinTS };

inline std::string to_string(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::Lin: return "Lin";
        case PolicyKind::LinGreedy: return "LinGreedy";
        case PolicyKind::LinUCB: return "LinUCB";
        case PolicyKind::LinTS: return "LinTS";
    }
    throw std::invalid_argument("unknown policy kind");
}

inline PolicyKind policy_kind_from_string(const std::string& name) {
    if (name == "Lin") return PolicyKind::Lin;
    if (name == "LinGreedy") return PolicyKind::LinGreedy;
    if (name == "LinUCB") return PolicyKind::LinUCB;
    if (name == "LinTS") return PolicyKind::LinTS;
    throw ConfigError("unknown policy kind: " + name);
}

// Only the field matching `kind` is consulted.
struct PolicyConfig {
    PolicyKind kind = PolicyKind::Lin;
    double alpha = 0.0;    // LinUCB exploration width
    double epsilon = 0.0;  // LinGreedy randomization probability
    double nu2 = 1.0;      // LinTS posterior scale
    std::uint64_t seed = 0;
};

/// One policy's full mutable state: per-arm ridge models (ordered map so every
/// arm iteration is in ascending index) plus the deterministic generator.
struct BanditState {
    PolicyConfig config;
    int dim = 0;
    double lambda = 1.0;
    std::map<int, ArmModel> arms;
    Rng rng;

    BanditState(PolicyConfig cfg, int d, double lam)
        : config(cfg), dim(d), lambda(lam), rng(cfg.seed) {}
};

inline BanditState make_bandit_state(const PolicyConfig& config, std::span<const int> arm_ids, int dim,
                                     double lambda = 1.0) {
    if (config.kind == PolicyKind::LinUCB && config.alpha < 0.0)
        throw std::invalid_argument("LinUCB alpha must be >= 0");
    if (config.kind == PolicyKind::LinGreedy && !(config.epsilon >= 0.0 && config.epsilon <= 1.0))
        throw std::invalid_argument("LinGreedy epsilon must be in [0,1]");
    if (config.kind == PolicyKind::LinTS && config.nu2 <= 0.0)
        throw std::invalid_argument("LinTS nu2 must be > 0");
    BanditState state(config, dim, lambda);
    for (const int arm : arm_ids) state.arms.try_emplace(arm, dim, lambda);
    return state;
}

/// Posterior draw theta_hat + sqrt(nu2) * L z with L the lower Cholesky factor
/// of A^-1 and z standard normal.
inline Eigen::VectorXd sample_theta(const ArmModel& model, double nu2, Rng& rng) {
    if (nu2 <= 0.0) throw std::invalid_argument("sample_theta: nu2 must be > 0");
    Eigen::VectorXd z(model.dim());
    for (int i = 0; i < model.dim(); ++i) z(i) = rng.normal();
    return model.theta_hat() + std::sqrt(nu2) * (model.inverse_cholesky() * z);
}

namespace detail {

// Per-arm score under the state's policy; draws from rng only for LinTS.
inline double policy_score(const BanditState& state, const ArmModel& model, const Eigen::VectorXd& x,
                           Rng& rng) {
    switch (state.config.kind) {
        case PolicyKind::Lin:
        case PolicyKind::LinGreedy:
            return x.dot(model.theta_hat());
        case PolicyKind::LinUCB:
            return x.dot(model.theta_hat()) +
                   state.config.alpha * std::sqrt(model.predictive_variance(x));
        case PolicyKind::LinTS:
            return x.dot(sample_theta(model, state.config.nu2, rng));
    }
    throw std::invalid_argument("unknown policy kind");
}

}  // namespace detail

/// Score every arm (ascending index). LinTS draws one fresh theta per arm per
/// call and is the only kind that advances the state's generator.
inline std::vector<std::pair<int, double>> score_all(BanditState& state, const Eigen::VectorXd& x) {
    if (!x.allFinite()) throw DataError("score_all: non-finite context");
    std::vector<std::pair<int, double>> scores;
    scores.reserve(state.arms.size());
    for (const auto& [arm, model] : state.arms)
        scores.emplace_back(arm, detail::policy_score(state, model, x, state.rng));
    return scores;
}

// Top-k by score descending, ascending arm index on ties. Shared by every
// score-ranked policy so the degeneracy identities are exact.
inline std::vector<std::pair<int, double>> select_top_k(std::vector<std::pair<int, double>> scores,
                                                        int k) {
    const auto depth = std::min<std::size_t>(static_cast<std::size_t>(k), scores.size());
    std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(depth), scores.end(),
                      [](const auto& lhs, const auto& rhs) {
                          if (lhs.second != rhs.second) return lhs.second > rhs.second;
                          return lhs.first < rhs.first;
                      });
    scores.resize(depth);
    return scores;
}

/// Build a slate of up to k distinct arms from arms \ excluded. Score-ranked
/// policies take the top-k; LinGreedy fills slot by slot, each slot uniformly
/// random with probability epsilon and best-remaining otherwise.
inline Slate recommend(BanditState& state, const Eigen::VectorXd& x, int k,
                       const std::unordered_set<int>& excluded) {
    if (k < 1) throw std::invalid_argument("recommend: k must be >= 1");
    if (!x.allFinite()) throw DataError("recommend: non-finite context");

    std::vector<std::pair<int, double>> candidates;
    candidates.reserve(state.arms.size());
    for (auto& [arm, model] : state.arms) {
        if (excluded.count(arm)) continue;
        candidates.emplace_back(arm, detail::policy_score(state, model, x, state.rng));
    }
    if (candidates.empty()) throw DataError("recommend: no candidate arms");

    Slate slate;
    if (state.config.kind == PolicyKind::LinGreedy) {
        const auto total = std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size());
        // Exploitation slots consume candidates in score order; `next` skips
        // the ones already taken by random slots.
        std::stable_sort(candidates.begin(), candidates.end(), [](const auto& lhs, const auto& rhs) {
            if (lhs.second != rhs.second) return lhs.second > rhs.second;
            return lhs.first < rhs.first;
        });
        std::vector<char> taken(candidates.size(), 0);
        std::size_t next = 0;
        for (std::size_t slot = 0; slot < total; ++slot) {
            if (state.rng.uniform() < state.config.epsilon) {
                std::size_t remaining = candidates.size() - slot;
                std::size_t pick = state.rng.below(remaining);
                std::size_t index = 0;
                while (true) {
                    if (!taken[index] && pick-- == 0) break;
                    ++index;
                }
                taken[index] = 1;
                slate.items.push_back(candidates[index].first);
                slate.scores.push_back(std::nullopt);
            } else {
                while (taken[next]) ++next;
                taken[next] = 1;
                slate.items.push_back(candidates[next].first);
                slate.scores.push_back(candidates[next].second);
            }
        }
    } else {
        for (const auto& [arm, score] : select_top_k(std::move(candidates), k)) {
            slate.items.push_back(arm);
            slate.scores.push_back(score);
        }
    }
    return slate;
}

inline Slate recommend(BanditState& state, const Eigen::VectorXd& x, int k) {
    static const std::unordered_set<int> empty;
    return recommend(state, x, k, empty);
}

inline void update_policy(BanditState& state, int arm, const Eigen::VectorXd& x, double reward) {
    const auto it = state.arms.find(arm);
    if (it == state.arms.end()) throw DataError("update_policy: unknown arm " + std::to_string(arm));
    it->second.update(x, reward);
}

// Checkpoint: per-arm blocks of (arm index, n_updates, lambda, A, b) as 64-bit
// little-endian words; A^-1 is rebuilt on load.
inline void save_arms(const std::filesystem::path& path, const BanditState& state) {
    std::string blob;
    const auto append_u64 = [&blob](std::uint64_t value) {
        for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
    };
    const auto append_f64 = [&](double value) {
        std::uint64_t bits;
        std::memcpy(&bits, &value, 8);
        append_u64(bits);
    };
    blob.append("LINBARM1", 8);
    append_u64(static_cast<std::uint64_t>(state.dim));
    append_u64(state.arms.size());
    for (const auto& [arm, model] : state.arms) {
        append_u64(static_cast<std::uint64_t>(arm));
        append_u64(static_cast<std::uint64_t>(model.n_updates()));
        append_f64(model.lambda());
        for (int r = 0; r < state.dim; ++r)
            for (int c = 0; c < state.dim; ++c) append_f64(model.design()(r, c));
        for (int r = 0; r < state.dim; ++r) append_f64(model.response()(r));
    }
    atomic_write(path, blob);
}

inline BanditState load_arms(const std::filesystem::path& path, const PolicyConfig& config) {
    const std::string blob = read_file(path);
    if (blob.size() < 24 || blob.compare(0, 8, "LINBARM1") != 0)
        throw DataError("load_arms: bad magic in " + path.string());
    std::size_t offset = 8;
    const auto read_u64 = [&blob, &offset] {
        std::uint64_t value = 0;
        for (int i = 0; i < 8; ++i)
            value |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[offset + static_cast<std::size_t>(i)])) << (8 * i);
        offset += 8;
        return value;
    };
    const auto read_f64 = [&] {
        const std::uint64_t bits = read_u64();
        double value;
        std::memcpy(&value, &bits, 8);
        return value;
    };
    const auto dim = static_cast<int>(read_u64());
    const std::uint64_t n_arms = read_u64();
    const std::size_t block = 24 + static_cast<std::size_t>(dim) * static_cast<std::size_t>(dim) * 8 +
                              static_cast<std::size_t>(dim) * 8;
    if (blob.size() != 24 + n_arms * block) throw DataError("load_arms: truncated file " + path.string());

    BanditState state(config, dim, 1.0);
    for (std::uint64_t i = 0; i < n_arms; ++i) {
        const auto arm = static_cast<int>(read_u64());
        const auto n_updates = static_cast<std::int64_t>(read_u64());
        const double lambda = read_f64();
        Eigen::MatrixXd a(dim, dim);
        for (int r = 0; r < dim; ++r)
            for (int c = 0; c < dim; ++c) a(r, c) = read_f64();
        Eigen::VectorXd b(dim);
        for (int r = 0; r < dim; ++r) b(r) = read_f64();
        state.lambda = lambda;
        state.arms.try_emplace(arm, std::move(a), std::move(b), lambda, n_updates);
    }
    return state;
}

}  // namespace linbandit
