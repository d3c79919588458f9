#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "linbandit/common.hpp"
#include "linbandit/dataset.hpp"
#include "linbandit/metrics.hpp"
#include "linbandit/slate.hpp"

namespace linbandit {

struct EmbeddingConfig {
    int d = 32;
    double regularization = 32.0;
    int iterations = 15;
    double confidence_weight = 40.0;
    std::uint64_t seed = 0;
};

/// Item latent factors over the full dataset item index. Rows exist only for
/// items the factorization saw; touching any other row is an error.
struct ItemEmbeddings {
    Eigen::MatrixXd factors;            // n_items x d
    std::vector<std::uint8_t> trained;  // per item index
    std::uint64_t seed = 0;

    int dim() const { return static_cast<int>(factors.cols()); }
    int n_items() const { return static_cast<int>(factors.rows()); }
    bool has(int item) const {
        return item >= 0 && item < n_items() && trained[static_cast<std::size_t>(item)] != 0;
    }
    Eigen::VectorXd row(int item) const {
        if (item < 0 || item >= n_items())
            throw std::out_of_range("ItemEmbeddings: item index " + std::to_string(item) + " out of range");
        if (!trained[static_cast<std::size_t>(item)])
            throw DataError("ItemEmbeddings: item " + std::to_string(item) + " has no trained embedding");
        return factors.row(item);
    }
};

struct AlsModel {
    ItemEmbeddings items;
    Eigen::MatrixXd users;              // n_users x d, zero rows for users absent from training
    std::vector<std::uint8_t> user_trained;
};

namespace detail {

struct Observation {
    int other;
    double reward;
};

// One half-sweep of confidence-weighted alternating least squares: solve every
// observed row of `target` against the fixed `fixed` factors.
inline void als_solve_side(Eigen::MatrixXd& target, const Eigen::MatrixXd& fixed,
                           const std::vector<std::vector<Observation>>& observations,
                           const std::vector<int>& active_rows, const Eigen::MatrixXd& gram,
                           double regularization, double confidence_weight) {
    const int d = static_cast<int>(target.cols());
    const Eigen::MatrixXd reg = regularization * Eigen::MatrixXd::Identity(d, d);
    for (const int row : active_rows) {
        Eigen::MatrixXd m = gram + reg;
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
        for (const Observation& obs : observations[static_cast<std::size_t>(row)]) {
            const auto y = fixed.row(obs.other).transpose();
            const double extra = confidence_weight * obs.reward;
            if (extra != 0.0) m.noalias() += extra * (y * y.transpose());
            rhs.noalias() += (1.0 + extra) * y;
        }
        target.row(row) = m.llt().solve(rhs);
    }
}

}  // namespace detail

/// Confidence-weighted implicit-feedback ALS over the warm-up slice.
/// Preference is 1 wherever an interaction exists, confidence is
/// 1 + confidence_weight * binarized reward, and each alternation solves the
/// per-row regularized normal equations for users then items. Deterministic
/// given cfg.seed.
inline AlsModel train_als(const Dataset& ds, std::span<const std::size_t> rows,
                          const EmbeddingConfig& cfg, const RewardRule& rule) {
    if (rows.empty()) throw DataError("train_als: empty warm-up slice");
    if (cfg.d < 1 || cfg.iterations < 1 || cfg.regularization <= 0.0)
        throw std::invalid_argument("train_als: invalid config");

    const int n_users = ds.n_users();
    const int n_items = ds.n_items();
    std::vector<std::vector<detail::Observation>> by_user(static_cast<std::size_t>(n_users));
    std::vector<std::vector<detail::Observation>> by_item(static_cast<std::size_t>(n_items));
    for (const std::size_t row : rows) {
        const Interaction& x = ds.interactions[row];
        const double reward = binarize_reward(x, rule);
        by_user[static_cast<std::size_t>(x.user)].push_back({x.item, reward});
        by_item[static_cast<std::size_t>(x.item)].push_back({x.user, reward});
    }
    std::vector<int> active_users, active_items;
    for (int u = 0; u < n_users; ++u)
        if (!by_user[static_cast<std::size_t>(u)].empty()) active_users.push_back(u);
    for (int i = 0; i < n_items; ++i)
        if (!by_item[static_cast<std::size_t>(i)].empty()) active_items.push_back(i);

    // Factors are drawn for every row so the random stream does not depend on
    // which rows are active; inactive rows are then pinned to zero.
    Rng rng(cfg.seed);
    Eigen::MatrixXd users(n_users, cfg.d);
    Eigen::MatrixXd items(n_items, cfg.d);
    for (int u = 0; u < n_users; ++u)
        for (int f = 0; f < cfg.d; ++f) users(u, f) = -0.01 + 0.02 * rng.uniform();
    for (int i = 0; i < n_items; ++i)
        for (int f = 0; f < cfg.d; ++f) items(i, f) = -0.01 + 0.02 * rng.uniform();
    for (int u = 0; u < n_users; ++u)
        if (by_user[static_cast<std::size_t>(u)].empty()) users.row(u).setZero();
    for (int i = 0; i < n_items; ++i)
        if (by_item[static_cast<std::size_t>(i)].empty()) items.row(i).setZero();

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const Eigen::MatrixXd item_gram = items.transpose() * items;
        detail::als_solve_side(users, items, by_user, active_users, item_gram,
                               cfg.regularization, cfg.confidence_weight);
        const Eigen::MatrixXd user_gram = users.transpose() * users;
        detail::als_solve_side(items, users, by_item, active_items, user_gram,
                               cfg.regularization, cfg.confidence_weight);
    }

    AlsModel model;
    model.items.factors = std::move(items);
    model.items.trained.assign(static_cast<std::size_t>(n_items), 0);
    for (const int i : active_items) model.items.trained[static_cast<std::size_t>(i)] = 1;
    model.items.seed = cfg.seed;
    model.users = std::move(users);
    model.user_trained.assign(static_cast<std::size_t>(n_users), 0);
    for (const int u : active_users) model.user_trained[static_cast<std::size_t>(u)] = 1;
    return model;
}

/// Full confidence-weighted objective (observed pairs carry preference 1 and
/// confidence 1 + alpha*r, every other active pair preference 0, confidence 1)
/// plus L2 penalties. Dense in |users| x |items|; test and diagnostics only.
inline double als_objective(const AlsModel& model, const Dataset& ds, std::span<const std::size_t> rows,
                            const EmbeddingConfig& cfg, const RewardRule& rule) {
    std::unordered_map<std::int64_t, double> observed;
    for (const std::size_t row : rows) {
        const Interaction& x = ds.interactions[row];
        observed[static_cast<std::int64_t>(x.user) * ds.n_items() + x.item] = binarize_reward(x, rule);
    }
    double loss = 0.0;
    for (int u = 0; u < ds.n_users(); ++u) {
        if (!model.user_trained[static_cast<std::size_t>(u)]) continue;
        for (int i = 0; i < ds.n_items(); ++i) {
            if (!model.items.trained[static_cast<std::size_t>(i)]) continue;
            const double pred = model.users.row(u).dot(model.items.factors.row(i));
            const auto it = observed.find(static_cast<std::int64_t>(u) * ds.n_items() + i);
            if (it != observed.end()) {
                const double confidence = 1.0 + cfg.confidence_weight * it->second;
                loss += confidence * (1.0 - pred) * (1.0 - pred);
            } else {
                loss += pred * pred;
            }
        }
    }
    for (int u = 0; u < ds.n_users(); ++u)
        if (model.user_trained[static_cast<std::size_t>(u)]) loss += cfg.regularization * model.users.row(u).squaredNorm();
    for (int i = 0; i < ds.n_items(); ++i)
        if (model.items.trained[static_cast<std::size_t>(i)]) loss += cfg.regularization * model.items.factors.row(i).squaredNorm();
    return loss;
}

struct EmbeddingSelection {
    EmbeddingConfig config;
    double ndcg = 0.0;
};

/// Train every grid config on the training slice and keep the one with the
/// best mean NDCG@k over validation users (dot-product ranking, candidates
/// exclude each user's training items). Ties prefer smaller d, then smaller
/// regularization, then fewer iterations.
inline EmbeddingConfig select_embedding_config(std::span<const EmbeddingConfig> grid, const Dataset& ds,
                                               std::span<const std::size_t> train_rows,
                                               std::span<const std::size_t> validation_rows,
                                               const RewardRule& rule, int k = 20,
                                               std::vector<EmbeddingSelection>* table = nullptr) {
    if (grid.empty()) throw std::invalid_argument("select_embedding_config: empty grid");
    if (validation_rows.empty()) throw DataError("select_embedding_config: empty validation slice");

    std::optional<EmbeddingConfig> best;
    double best_ndcg = 0.0;
    for (const EmbeddingConfig& cfg : grid) {
        const AlsModel model = train_als(ds, train_rows, cfg, rule);

        std::vector<int> catalog;
        for (int i = 0; i < ds.n_items(); ++i)
            if (model.items.trained[static_cast<std::size_t>(i)]) catalog.push_back(i);

        std::vector<std::unordered_set<int>> consumed(static_cast<std::size_t>(ds.n_users()));
        for (const std::size_t row : train_rows)
            consumed[static_cast<std::size_t>(ds.interactions[row].user)].insert(ds.interactions[row].item);
        std::vector<std::unordered_set<int>> relevant(static_cast<std::size_t>(ds.n_users()));
        for (const std::size_t row : validation_rows) {
            const Interaction& x = ds.interactions[row];
            if (binarize_reward(x, rule) == 1.0 && model.items.trained[static_cast<std::size_t>(x.item)])
                relevant[static_cast<std::size_t>(x.user)].insert(x.item);
        }

        double total = 0.0;
        std::int64_t scorable = 0;
        for (int u = 0; u < ds.n_users(); ++u) {
            if (relevant[static_cast<std::size_t>(u)].empty()) continue;
            std::vector<std::pair<double, int>> scored;
            scored.reserve(catalog.size());
            for (const int item : catalog) {
                if (consumed[static_cast<std::size_t>(u)].count(item)) continue;
                scored.emplace_back(model.users.row(u).dot(model.items.factors.row(item)), item);
            }
            const auto depth = std::min<std::size_t>(static_cast<std::size_t>(k), scored.size());
            std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(depth), scored.end(),
                              [](const auto& lhs, const auto& rhs) {
                                  if (lhs.first != rhs.first) return lhs.first > rhs.first;
                                  return lhs.second < rhs.second;
                              });
            Slate slate;
            for (std::size_t pos = 0; pos < depth; ++pos) slate.items.push_back(scored[pos].second);
            if (const auto value = ndcg_at_k(slate, relevant[static_cast<std::size_t>(u)], k)) {
                total += *value;
                ++scorable;
            }
        }
        const double ndcg = scorable > 0 ? total / static_cast<double>(scorable) : 0.0;
        if (table) table->push_back({cfg, ndcg});

        const auto better = [&] {
            if (!best) return true;
            if (ndcg != best_ndcg) return ndcg > best_ndcg;
            if (cfg.d != best->d) return cfg.d < best->d;
            if (cfg.regularization != best->regularization) return cfg.regularization < best->regularization;
            return cfg.iterations < best->iterations;
        };
        if (better()) {
            best = cfg;
            best_ndcg = ndcg;
        }
    }
    return *best;
}

/// Running mean of consumed item embeddings; the zero vector before any history.
struct UserState {
    Eigen::VectorXd mean;
    std::int64_t count = 0;
};

inline UserState user_state(std::span<const int> history, const ItemEmbeddings& emb) {
    UserState state{Eigen::VectorXd::Zero(emb.dim()), 0};
    for (const int item : history) {
        state.mean += emb.row(item);
        ++state.count;
    }
    if (state.count > 0) state.mean /= static_cast<double>(state.count);
    return state;
}

inline UserState update_user_state(const UserState& state, int item, const ItemEmbeddings& emb) {
    UserState next;
    next.count = state.count + 1;
    next.mean = (static_cast<double>(state.count) * state.mean + emb.row(item)) /
                static_cast<double>(next.count);
    return next;
}

// Binary layout: magic, version, n_items, d, seed, then row-major float64
// little-endian; trained indices and the config travel in a JSON sidecar.
inline constexpr char kEmbeddingMagic[8] = {'L', 'I', 'N', 'B', 'E', 'M', 'B', '1'};

inline void save_embeddings(const std::filesystem::path& path, const ItemEmbeddings& emb,
                            const EmbeddingConfig& cfg) {
    std::string blob;
    blob.reserve(40 + static_cast<std::size_t>(emb.n_items()) * static_cast<std::size_t>(emb.dim()) * 8);
    blob.append(kEmbeddingMagic, 8);
    const auto append_u64 = [&blob](std::uint64_t value) {
        for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
    };
    append_u64(1);  // version
    append_u64(static_cast<std::uint64_t>(emb.n_items()));
    append_u64(static_cast<std::uint64_t>(emb.dim()));
    append_u64(emb.seed);
    for (int i = 0; i < emb.n_items(); ++i) {
        for (int f = 0; f < emb.dim(); ++f) {
            const double value = emb.factors(i, f);
            std::uint64_t bits;
            std::memcpy(&bits, &value, 8);
            append_u64(bits);
        }
    }
    atomic_write(path, blob);

    nlohmann::json sidecar;
    sidecar["schema_version"] = 1;
    sidecar["config"] = {{"d", cfg.d},
                         {"regularization", cfg.regularization},
                         {"iterations", cfg.iterations},
                         {"confidence_weight", cfg.confidence_weight},
                         {"seed", cfg.seed}};
    std::vector<int> trained;
    for (int i = 0; i < emb.n_items(); ++i)
        if (emb.trained[static_cast<std::size_t>(i)]) trained.push_back(i);
    sidecar["trained_items"] = trained;
    atomic_write(path.string() + ".json", sidecar.dump(2) + "\n");
}

inline std::pair<ItemEmbeddings, EmbeddingConfig> load_embeddings(const std::filesystem::path& path) {
    const std::string blob = read_file(path);
    if (blob.size() < 40 || std::memcmp(blob.data(), kEmbeddingMagic, 8) != 0)
        throw DataError("load_embeddings: bad magic in " + path.string());
    const auto read_u64 = [&blob](std::size_t offset) {
        std::uint64_t value = 0;
        for (int i = 0; i < 8; ++i)
            value |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[offset + static_cast<std::size_t>(i)])) << (8 * i);
        return value;
    };
    const std::uint64_t version = read_u64(8);
    if (version != 1) throw DataError("load_embeddings: unsupported version");
    const auto n_items = static_cast<int>(read_u64(16));
    const auto d = static_cast<int>(read_u64(24));
    const std::uint64_t seed = read_u64(32);
    const std::size_t expected = 40 + static_cast<std::size_t>(n_items) * static_cast<std::size_t>(d) * 8;
    if (blob.size() != expected) throw DataError("load_embeddings: truncated file " + path.string());

    ItemEmbeddings emb;
    emb.factors.resize(n_items, d);
    emb.seed = seed;
    std::size_t offset = 40;
    for (int i = 0; i < n_items; ++i) {
        for (int f = 0; f < d; ++f) {
            const std::uint64_t bits = read_u64(offset);
            double value;
            std::memcpy(&value, &bits, 8);
            emb.factors(i, f) = value;
            offset += 8;
        }
    }

    const nlohmann::json sidecar = nlohmann::json::parse(read_file(path.string() + ".json"));
    EmbeddingConfig cfg;
    cfg.d = sidecar.at("config").at("d").get<int>();
    cfg.regularization = sidecar.at("config").at("regularization").get<double>();
    cfg.iterations = sidecar.at("config").at("iterations").get<int>();
    cfg.confidence_weight = sidecar.at("config").at("confidence_weight").get<double>();
    cfg.seed = sidecar.at("config").at("seed").get<std::uint64_t>();
    emb.trained.assign(static_cast<std::size_t>(n_items), 0);
    for (const auto& item : sidecar.at("trained_items"))
        emb.trained[item.get<std::size_t>()] = 1;
    return {std::move(emb), cfg};
}

}  // namespace linbandit
