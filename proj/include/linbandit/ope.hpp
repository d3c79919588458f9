#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "linbandit/arm_model.hpp"
#include "linbandit/common.hpp"
#include "linbandit/policy.hpp"

namespace linbandit {

struct OpeEvent {
    Eigen::VectorXd context;
    int action = 0;
    double reward = 0.0;
    double propensity = 0.0;  // logging-policy probability of `action`, > 0 once estimated
};

struct OpeLog {
    std::vector<OpeEvent> events;
};

/// Context-free empirical propensities: p(a) = count(a)/n, clipped below at
/// clip_floor without renormalization.
inline void estimate_propensities(OpeLog& log, double clip_floor = 1e-3) {
    if (log.events.empty()) throw DataError("estimate_propensities: empty log");
    std::map<int, std::int64_t> counts;
    for (const OpeEvent& event : log.events) ++counts[event.action];
    const auto n = static_cast<double>(log.events.size());
    for (OpeEvent& event : log.events)
        event.propensity = std::max(static_cast<double>(counts.at(event.action)) / n, clip_floor);
}

/// Target-policy action distribution for one context, stored as a uniform
/// `base` mass over the arm universe plus sparse `extra` mass.
struct ActionDistribution {
    double base = 0.0;
    std::vector<std::pair<int, double>> extra;         // sorted by arm index
    std::shared_ptr<const std::vector<int>> arms;      // universe, sorted; required when base > 0

    double prob(int action) const {
        double p = 0.0;
        if (base > 0.0 && arms &&
            std::binary_search(arms->begin(), arms->end(), action))
            p += base;
        const auto it = std::lower_bound(extra.begin(), extra.end(), action,
                                         [](const auto& entry, int a) { return entry.first < a; });
        if (it != extra.end() && it->first == action) p += it->second;
        return p;
    }
};

namespace detail {

inline std::shared_ptr<const std::vector<int>> arm_universe(const BanditState& state) {
    auto arms = std::make_shared<std::vector<int>>();
    arms->reserve(state.arms.size());
    for (const auto& [arm, model] : state.arms) arms->push_back(arm);
    return arms;
}

inline int argmax_arm(std::span<const int> arms, std::span<const double> scores) {
    int best = arms[0];
    double best_score = scores[0];
    for (std::size_t i = 1; i < arms.size(); ++i) {
        if (scores[i] > best_score) {
            best_score = scores[i];
            best = arms[static_cast<std::size_t>(i)];
        }
    }
    return best;
}

// Thompson win frequencies from scalar score draws: x^T theta~ for arm a is
// N(mu_a, nu2 * x^T A_a^-1 x), so sampling the scores directly is the marginal
// of the posterior parameter draw. Arms whose score cannot plausibly beat the
// best arm (8-sigma gap) are skipped.
inline std::vector<std::pair<int, double>> thompson_frequencies(
    std::span<const int> arms, std::span<const double> mus, std::span<const double> sigmas,
    int n_samples, Rng& rng) {
    const std::size_t n_arms = arms.size();
    double best_lower = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_arms; ++i)
        best_lower = std::max(best_lower, mus[i] - 8.0 * sigmas[i]);
    std::vector<std::size_t> live;
    live.reserve(n_arms);
    for (std::size_t i = 0; i < n_arms; ++i)
        if (mus[i] + 8.0 * sigmas[i] >= best_lower) live.push_back(i);

    std::map<int, std::int64_t> wins;
    for (int draw = 0; draw < n_samples; ++draw) {
        double best_score = -std::numeric_limits<double>::infinity();
        int best_arm = arms[live.front()];
        for (const std::size_t i : live) {
            const double score = mus[i] + sigmas[i] * rng.normal();
            if (score > best_score) {
                best_score = score;
                best_arm = arms[i];
            }
        }
        ++wins[best_arm];
    }
    std::vector<std::pair<int, double>> extra;
    extra.reserve(wins.size());
    for (const auto& [arm, count] : wins)
        extra.emplace_back(arm, static_cast<double>(count) / static_cast<double>(n_samples));
    return extra;
}

}  // namespace detail

/// Evaluation-policy distribution over arms at one context. Lin and LinUCB put
/// a point mass on their arg-max arm; LinGreedy spreads epsilon/|arms| plus
/// 1-epsilon on the greedy arm; LinTS is estimated from n_ts_samples draws.
inline ActionDistribution target_action_distribution(const BanditState& state,
                                                     const Eigen::VectorXd& x, int n_ts_samples,
                                                     Rng& rng) {
    if (state.arms.empty()) throw DataError("target_action_distribution: no arms");
    const auto universe = detail::arm_universe(state);
    const std::size_t n_arms = universe->size();
    std::vector<double> mus(n_arms);
    std::size_t index = 0;
    for (const auto& [arm, model] : state.arms) mus[index++] = x.dot(model.theta_hat());

    ActionDistribution dist;
    dist.arms = universe;
    switch (state.config.kind) {
        case PolicyKind::Lin: {
            dist.extra = {{detail::argmax_arm(*universe, mus), 1.0}};
            break;
        }
        case PolicyKind::LinUCB: {
            std::vector<double> scores(n_arms);
            index = 0;
            for (const auto& [arm, model] : state.arms) {
                scores[index] = mus[index] + state.config.alpha * std::sqrt(model.predictive_variance(x));
                ++index;
            }
            dist.extra = {{detail::argmax_arm(*universe, scores), 1.0}};
            break;
        }
        case PolicyKind::LinGreedy: {
            dist.base = state.config.epsilon / static_cast<double>(n_arms);
            dist.extra = {{detail::argmax_arm(*universe, mus), 1.0 - state.config.epsilon}};
            break;
        }
        case PolicyKind::LinTS: {
            if (n_ts_samples < 1) throw std::invalid_argument("n_ts_samples must be >= 1");
            std::vector<double> sigmas(n_arms);
            index = 0;
            for (const auto& [arm, model] : state.arms) {
                sigmas[index] = std::sqrt(state.config.nu2 * model.predictive_variance(x));
                ++index;
            }
            dist.extra = detail::thompson_frequencies(*universe, mus, sigmas, n_ts_samples, rng);
            break;
        }
    }
    return dist;
}

inline ActionDistribution target_action_distribution(BanditState& state, const Eigen::VectorXd& x,
                                                     int n_ts_samples = 100) {
    return target_action_distribution(state, x, n_ts_samples, state.rng);
}

/// Per-arm ridge regression of reward on context; arms never seen predict 0.
class RewardModel {
public:
    RewardModel() = default;
    RewardModel(std::map<int, ArmModel> arms, int dim, double lambda)
        : arms_(std::move(arms)), dim_(dim), lambda_(lambda) {}

    double predict(const Eigen::VectorXd& x, int action) const {
        const auto it = arms_.find(action);
        if (it == arms_.end()) return 0.0;
        return x.dot(it->second.theta_hat());
    }

    // Sum over the distribution's support of pi(a|x) * q(x, a).
    double expected_value(const Eigen::VectorXd& x, const ActionDistribution& dist) const {
        double value = 0.0;
        if (dist.base > 0.0) {
            if (!dist.arms) throw DataError("ActionDistribution with base mass but no arm universe");
            for (const int arm : *dist.arms) value += dist.base * predict(x, arm);
        }
        for (const auto& [arm, p] : dist.extra) value += p * predict(x, arm);
        return value;
    }

    const std::map<int, ArmModel>& arms() const { return arms_; }

private:
    std::map<int, ArmModel> arms_;
    int dim_ = 0;
    double lambda_ = 1.0;
};

inline RewardModel fit_reward_model(const OpeLog& log, double lambda = 1.0) {
    if (log.events.empty()) throw DataError("fit_reward_model: empty log");
    const int dim = static_cast<int>(log.events.front().context.size());
    std::map<int, ArmModel> arms;
    for (const OpeEvent& event : log.events) {
        auto [it, inserted] = arms.try_emplace(event.action, dim, lambda);
        it->second.update(event.context, event.reward);
    }
    return RewardModel(std::move(arms), dim, lambda);
}

// V = (1/n) sum_i w_i r_i with w_i = pi(a_i|x_i) / p(a_i|x_i).
inline double ipw(const OpeLog& log, std::span<const ActionDistribution> targets) {
    if (log.events.size() != targets.size())
        throw std::invalid_argument("ipw: one target distribution per event required");
    double total = 0.0;
    for (std::size_t i = 0; i < log.events.size(); ++i) {
        const OpeEvent& event = log.events[i];
        if (!(event.propensity > 0.0)) throw DataError("ipw: non-positive propensity");
        total += targets[i].prob(event.action) / event.propensity * event.reward;
    }
    return total / static_cast<double>(log.events.size());
}

// V = (1/n) sum_i sum_a pi(a|x_i) q(x_i, a).
inline double dm(const OpeLog& log, std::span<const ActionDistribution> targets,
                 const RewardModel& reward_model) {
    if (log.events.size() != targets.size())
        throw std::invalid_argument("dm: one target distribution per event required");
    double total = 0.0;
    for (std::size_t i = 0; i < log.events.size(); ++i)
        total += reward_model.expected_value(log.events[i].context, targets[i]);
    return total / static_cast<double>(log.events.size());
}

// V = (1/n) sum_i [ sum_a pi(a|x_i) q(x_i,a) + w_i (r_i - q(x_i, a_i)) ].
inline double dr(const OpeLog& log, std::span<const ActionDistribution> targets,
                 const RewardModel& reward_model) {
    if (log.events.size() != targets.size())
        throw std::invalid_argument("dr: one target distribution per event required");
    double total = 0.0;
    for (std::size_t i = 0; i < log.events.size(); ++i) {
        const OpeEvent& event = log.events[i];
        if (!(event.propensity > 0.0)) throw DataError("dr: non-positive propensity");
        const double weight = targets[i].prob(event.action) / event.propensity;
        total += reward_model.expected_value(event.context, targets[i]) +
                 weight * (event.reward - reward_model.predict(event.context, event.action));
    }
    return total / static_cast<double>(log.events.size());
}

/// Chunked variant of target_action_distribution for long logs: one GEMM per
/// chunk for the mean scores and one per (arm, chunk) for the variance terms.
/// LinTS draws come from a per-event generator seeded by (seed_base, index),
/// so the result is deterministic and independent of chunking.
inline std::vector<ActionDistribution> target_distributions_bulk(const BanditState& state,
                                                                 const OpeLog& log,
                                                                 int n_ts_samples,
                                                                 std::uint64_t seed_base) {
    if (state.arms.empty()) throw DataError("target_distributions_bulk: no arms");
    const auto universe = detail::arm_universe(state);
    const auto n_arms = static_cast<Eigen::Index>(universe->size());
    const auto n_events = static_cast<Eigen::Index>(log.events.size());
    const int d = state.arms.begin()->second.dim();
    const PolicyKind kind = state.config.kind;
    const bool needs_var = kind == PolicyKind::LinUCB || kind == PolicyKind::LinTS;

    Eigen::MatrixXd thetas(n_arms, d);
    std::vector<const ArmModel*> models;
    models.reserve(static_cast<std::size_t>(n_arms));
    {
        Eigen::Index index = 0;
        for (const auto& [arm, model] : state.arms) {
            thetas.row(index++) = model.theta_hat();
            models.push_back(&model);
        }
    }

    std::vector<ActionDistribution> out(static_cast<std::size_t>(n_events));
    constexpr Eigen::Index kChunk = 1024;
    std::vector<double> mus(static_cast<std::size_t>(n_arms));
    std::vector<double> work(static_cast<std::size_t>(n_arms));
    for (Eigen::Index begin = 0; begin < n_events; begin += kChunk) {
        const Eigen::Index size = std::min(kChunk, n_events - begin);
        Eigen::MatrixXd contexts(size, d);
        for (Eigen::Index i = 0; i < size; ++i) {
            const Eigen::VectorXd& x = log.events[static_cast<std::size_t>(begin + i)].context;
            if (x.size() != d) throw DataError("target_distributions_bulk: context dimension mismatch");
            contexts.row(i) = x;
        }
        const Eigen::MatrixXd mu = contexts * thetas.transpose();  // size x n_arms
        Eigen::MatrixXd var;
        if (needs_var) {
            var.resize(size, n_arms);
            for (Eigen::Index a = 0; a < n_arms; ++a)
                var.col(a) =
                    (contexts * models[static_cast<std::size_t>(a)]->inverse_cholesky()).rowwise().squaredNorm();
        }

        for (Eigen::Index i = 0; i < size; ++i) {
            const std::size_t event_index = static_cast<std::size_t>(begin + i);
            for (Eigen::Index a = 0; a < n_arms; ++a) mus[static_cast<std::size_t>(a)] = mu(i, a);
            ActionDistribution dist;
            dist.arms = universe;
            switch (kind) {
                case PolicyKind::Lin:
                    dist.extra = {{detail::argmax_arm(*universe, mus), 1.0}};
                    break;
                case PolicyKind::LinUCB: {
                    for (Eigen::Index a = 0; a < n_arms; ++a)
                        work[static_cast<std::size_t>(a)] =
                            mus[static_cast<std::size_t>(a)] +
                            state.config.alpha * std::sqrt(std::max(var(i, a), 0.0));
                    dist.extra = {{detail::argmax_arm(*universe, work), 1.0}};
                    break;
                }
                case PolicyKind::LinGreedy:
                    dist.base = state.config.epsilon / static_cast<double>(n_arms);
                    dist.extra = {{detail::argmax_arm(*universe, mus), 1.0 - state.config.epsilon}};
                    break;
                case PolicyKind::LinTS: {
                    for (Eigen::Index a = 0; a < n_arms; ++a)
                        work[static_cast<std::size_t>(a)] =
                            std::sqrt(state.config.nu2 * std::max(var(i, a), 0.0));
                    Rng rng(derive_seed(seed_base, "ts-" + std::to_string(event_index)));
                    dist.extra =
                        detail::thompson_frequencies(*universe, mus, work, n_ts_samples, rng);
                    break;
                }
            }
            out[event_index] = std::move(dist);
        }
    }
    return out;
}

// ---- synthetic logged-bandit generator ---------------------------------------

enum class RewardMean { Logistic, ClippedLinear };

struct SyntheticSpec {
    int n_events = 0;
    int n_arms = 0;
    int d = 0;
    std::vector<Eigen::VectorXd> thetas;  // one per arm
    RewardMean mean = RewardMean::Logistic;
    std::uint64_t seed = 0;
};

inline double synthetic_mean_reward(const SyntheticSpec& spec, const Eigen::VectorXd& x, int arm) {
    const double raw = x.dot(spec.thetas[static_cast<std::size_t>(arm)]);
    if (spec.mean == RewardMean::Logistic) return 1.0 / (1.0 + std::exp(-raw));
    return std::clamp(raw, 0.0, 1.0);
}

using LoggingPolicy = std::function<std::vector<double>(const Eigen::VectorXd&)>;

inline LoggingPolicy uniform_logging(int n_arms) {
    return [n_arms](const Eigen::VectorXd&) {
        return std::vector<double>(static_cast<std::size_t>(n_arms), 1.0 / n_arms);
    };
}

/// Standard-normal contexts, Bernoulli rewards with the spec's per-arm mean,
/// actions drawn from the logging policy with their true probability recorded
/// as the propensity.
inline OpeLog synthesize_log(const SyntheticSpec& spec, const LoggingPolicy& logging) {
    if (spec.n_events < 1 || spec.n_arms < 1 || spec.d < 1 ||
        spec.thetas.size() != static_cast<std::size_t>(spec.n_arms))
        throw std::invalid_argument("synthesize_log: invalid spec");
    Rng rng(spec.seed);
    OpeLog log;
    log.events.reserve(static_cast<std::size_t>(spec.n_events));
    for (int i = 0; i < spec.n_events; ++i) {
        Eigen::VectorXd x(spec.d);
        for (int f = 0; f < spec.d; ++f) x(f) = rng.normal();
        const std::vector<double> probs = logging(x);
        const double u = rng.uniform();
        double cdf = 0.0;
        int action = spec.n_arms - 1;
        for (int a = 0; a < spec.n_arms; ++a) {
            cdf += probs[static_cast<std::size_t>(a)];
            if (u < cdf) {
                action = a;
                break;
            }
        }
        const double mean = synthetic_mean_reward(spec, x, action);
        const double reward = rng.uniform() < mean ? 1.0 : 0.0;
        log.events.push_back({std::move(x), action, reward, probs[static_cast<std::size_t>(action)]});
    }
    return log;
}

using TargetPolicy = std::function<ActionDistribution(const Eigen::VectorXd&)>;

// Point mass on the arm with the best true linear score.
inline TargetPolicy greedy_on_true(const SyntheticSpec& spec) {
    return [&spec](const Eigen::VectorXd& x) {
        int best = 0;
        double best_score = x.dot(spec.thetas[0]);
        for (int a = 1; a < spec.n_arms; ++a) {
            const double score = x.dot(spec.thetas[static_cast<std::size_t>(a)]);
            if (score > best_score) {
                best_score = score;
                best = a;
            }
        }
        ActionDistribution dist;
        dist.extra = {{best, 1.0}};
        return dist;
    };
}

inline TargetPolicy fixed_arm_target(int arm) {
    return [arm](const Eigen::VectorXd&) {
        ActionDistribution dist;
        dist.extra = {{arm, 1.0}};
        return dist;
    };
}

/// Monte Carlo ground truth E_x[ sum_a pi(a|x) mu_a(x) ] under the generator.
inline double true_policy_value(const SyntheticSpec& spec, const TargetPolicy& target, int n_mc,
                                std::uint64_t seed) {
    Rng rng(seed);
    double total = 0.0;
    for (int i = 0; i < n_mc; ++i) {
        Eigen::VectorXd x(spec.d);
        for (int f = 0; f < spec.d; ++f) x(f) = rng.normal();
        const ActionDistribution dist = target(x);
        double value = 0.0;
        if (dist.base > 0.0 && dist.arms)
            for (const int arm : *dist.arms) value += dist.base * synthetic_mean_reward(spec, x, arm);
        for (const auto& [arm, p] : dist.extra) value += p * synthetic_mean_reward(spec, x, arm);
        total += value;
    }
    return total / static_cast<double>(n_mc);
}

}  // namespace linbandit
