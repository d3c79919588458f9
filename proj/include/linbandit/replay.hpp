#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cstdint>
#include <json.hpp>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "linbandit/common.hpp"
#include "linbandit/dataset.hpp"
#include "linbandit/embedding.hpp"
#include "linbandit/metrics.hpp"
#include "linbandit/policy.hpp"

namespace linbandit {

struct ReplayConfig {
    int slate_size = 20;
    int n_batches = 10;
    RewardRule reward;
    bool exclude_consumed = true;   // drop already-consumed items from candidate slates
    bool update_on_all = true;      // false: learn only from logged items present in the slate
    int max_arms = 0;               // 0 = every warm-up item becomes an arm
    std::uint64_t seed = 0;
};

struct MetricPair {
    std::optional<double> value;       // this batch
    std::optional<double> cumulative;  // events 1..batch
};

struct BatchResult {
    int batch = 0;  // 1-based
    MetricPair ndcg, hit_rate, f1, novelty, coverage;
    std::int64_t n_events = 0;    // logged interactions
    std::int64_t n_users = 0;     // slates issued
    std::int64_t n_scorable = 0;  // (user, batch) events with >= 1 positive item
    std::int64_t n_hits = 0;      // slates matching >= 1 positive item
};

struct FinalMetrics {
    std::optional<double> ndcg, hit_rate, f1, novelty, coverage;
};

struct EvaluationReport {
    std::string dataset;
    PolicyConfig policy;
    EmbeddingConfig embedding;
    int slate_size = 0;
    std::vector<BatchResult> batches;
    FinalMetrics final;
    double wall_seconds = 0.0;  // never serialized into the byte-compared payload
};

// The tuple consumed by off-policy estimation: logged action, decision-time
// context, reward, and the slate issued to the user in that batch.
struct LoggedEvent {
    int user = 0;
    int item = 0;
    Eigen::VectorXd context;
    double reward = 0.0;
    int batch = 0;  // 1-based
    Slate slate;
};

struct ReplayOutcome {
    EvaluationReport report;
    std::vector<LoggedEvent> events;
};

// Evolving user side of a replay: running-mean states and consumed item sets.
struct ReplayContext {
    std::vector<UserState> states;
    std::vector<std::unordered_set<int>> consumed;
};

inline ReplayContext make_replay_context(int n_users, int dim) {
    ReplayContext ctx;
    ctx.states.assign(static_cast<std::size_t>(n_users), UserState{Eigen::VectorXd::Zero(dim), 0});
    ctx.consumed.resize(static_cast<std::size_t>(n_users));
    return ctx;
}

// Item multiset counts over the given rows; used for both the popularity
// table and the max_arms cap.
inline std::unordered_map<int, std::int64_t> item_counts(const Dataset& ds,
                                                         std::span<const std::size_t> rows) {
    std::unordered_map<int, std::int64_t> counts;
    for (const std::size_t row : rows) ++counts[ds.interactions[row].item];
    return counts;
}

inline PopularityTable popularity_from_rows(const Dataset& ds, std::span<const std::size_t> rows,
                                            bool laplace = true) {
    return PopularityTable(item_counts(ds, rows), static_cast<std::int64_t>(rows.size()), laplace);
}

/// Candidate arm set: every distinct item in `rows`, optionally capped to the
/// max_arms most frequent (frequency desc, item index asc). Ascending result.
inline std::vector<int> arm_ids_from_rows(const Dataset& ds, std::span<const std::size_t> rows,
                                          int max_arms = 0) {
    const auto counts = item_counts(ds, rows);
    std::vector<std::pair<int, std::int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& lhs, const auto& rhs) {
        if (lhs.second != rhs.second) return lhs.second > rhs.second;
        return lhs.first < rhs.first;
    });
    if (max_arms > 0 && ranked.size() > static_cast<std::size_t>(max_arms))
        ranked.resize(static_cast<std::size_t>(max_arms));
    std::vector<int> arms;
    arms.reserve(ranked.size());
    for (const auto& [item, count] : ranked) arms.push_back(item);
    std::sort(arms.begin(), arms.end());
    return arms;
}

/// Chronological pass over the warm-up: each interaction updates the logged
/// item's arm with the user's pre-interaction state as context, then the state
/// consumes the item. No recommendations are generated.
inline ReplayContext warmup_fit(BanditState& state, const Dataset& ds,
                                std::span<const std::size_t> rows, const ItemEmbeddings& emb,
                                const RewardRule& rule) {
    ReplayContext ctx = make_replay_context(ds.n_users(), emb.dim());
    for (const std::size_t row : rows) {
        const Interaction& x = ds.interactions[row];
        const double reward = binarize_reward(x, rule);
        const auto user = static_cast<std::size_t>(x.user);
        if (state.arms.count(x.item))
            update_policy(state, x.item, ctx.states[user].mean, reward);
        else if (!emb.has(x.item))
            throw DataError("warmup_fit: item " + std::to_string(x.item) + " has no embedding");
        ctx.states[user] = update_user_state(ctx.states[user], x.item, emb);
        ctx.consumed[user].insert(x.item);
    }
    return ctx;
}

namespace detail {

struct MetricAccumulator {
    double sum = 0.0;
    std::int64_t count = 0;
    void add(double value) {
        sum += value;
        ++count;
    }
    std::optional<double> mean() const {
        if (count == 0) return std::nullopt;
        return sum / static_cast<double>(count);
    }
};

}  // namespace detail

/// The sequential-batch replay protocol. Per batch: one slate per user with
/// logged interactions (issued from the pre-batch state, already-consumed
/// items excluded), slates scored against the user's positive items of the
/// batch, then every logged interaction updates its arm with the same
/// pre-batch context before user states advance.
inline ReplayOutcome run_replay(BanditState& state, ReplayContext& ctx, const Dataset& ds,
                                const Partitions& parts, const ItemEmbeddings& emb,
                                const ReplayConfig& rc, const PopularityTable& popularity) {
    const auto start = std::chrono::steady_clock::now();
    const int catalog_size = static_cast<int>(state.arms.size());
    static const std::unordered_set<int> no_exclusions;

    ReplayOutcome out;
    detail::MetricAccumulator cum_ndcg, cum_hit, cum_f1;
    double cum_novelty_sum = 0.0;
    std::int64_t cum_novelty_slots = 0;
    std::unordered_set<int> cum_recommended;
    std::int64_t cum_hits = 0;
    std::int64_t cum_slates = 0;

    for (std::size_t b = 0; b < parts.test_batches.size(); ++b) {
        const std::vector<std::size_t>& batch_rows = parts.test_batches[b];
        BatchResult result;
        result.batch = static_cast<int>(b) + 1;
        result.n_events = static_cast<std::int64_t>(batch_rows.size());

        std::map<int, std::vector<std::size_t>> by_user;
        for (const std::size_t row : batch_rows) by_user[ds.interactions[row].user].push_back(row);

        detail::MetricAccumulator batch_ndcg, batch_hit, batch_f1;
        double batch_novelty_sum = 0.0;
        std::int64_t batch_novelty_slots = 0;
        std::unordered_set<int> batch_recommended;
        std::unordered_map<int, Slate> slates;

        for (const auto& [user, rows] : by_user) {
            const auto uidx = static_cast<std::size_t>(user);
            const std::unordered_set<int>& excluded =
                rc.exclude_consumed ? ctx.consumed[uidx] : no_exclusions;
            Slate slate = recommend(state, ctx.states[uidx].mean, rc.slate_size, excluded);

            std::unordered_set<int> relevant;
            for (const std::size_t row : rows) {
                if (binarize_reward(ds.interactions[row], rc.reward) == 1.0)
                    relevant.insert(ds.interactions[row].item);
            }
            if (const auto value = ndcg_at_k(slate, relevant, rc.slate_size)) {
                batch_ndcg.add(*value);
                cum_ndcg.add(*value);
            }
            if (const auto value = hit_rate_at_k(slate, relevant, rc.slate_size)) {
                batch_hit.add(*value);
                cum_hit.add(*value);
                if (*value == 1.0) {
                    ++result.n_hits;
                    ++cum_hits;
                }
            }
            if (const auto value = f1_at_k(slate, relevant, rc.slate_size)) {
                batch_f1.add(*value);
                cum_f1.add(*value);
            }
            const auto [nov_sum, nov_slots] = novelty_sum_at_k(slate, popularity, rc.slate_size);
            batch_novelty_sum += nov_sum;
            batch_novelty_slots += nov_slots;
            const int depth = std::min<int>(rc.slate_size, static_cast<int>(slate.items.size()));
            for (int pos = 0; pos < depth; ++pos) batch_recommended.insert(slate.items[pos]);
            slates.emplace(user, std::move(slate));
        }

        // Arm updates: all contexts are the pre-batch user states, so the
        // per-arm sums commute and the event order within the batch is moot.
        for (const std::size_t row : batch_rows) {
            const Interaction& x = ds.interactions[row];
            const auto uidx = static_cast<std::size_t>(x.user);
            const Slate& slate = slates.at(x.user);
            out.events.push_back({x.user, x.item, ctx.states[uidx].mean,
                                  binarize_reward(x, rc.reward), result.batch, slate});
            if (!state.arms.count(x.item)) continue;
            const bool in_slate =
                std::find(slate.items.begin(), slate.items.end(), x.item) != slate.items.end();
            if (rc.update_on_all || in_slate)
                update_policy(state, x.item, ctx.states[uidx].mean, binarize_reward(x, rc.reward));
        }
        for (const std::size_t row : batch_rows) {
            const Interaction& x = ds.interactions[row];
            const auto uidx = static_cast<std::size_t>(x.user);
            ctx.states[uidx] = update_user_state(ctx.states[uidx], x.item, emb);
            ctx.consumed[uidx].insert(x.item);
        }

        result.n_users = static_cast<std::int64_t>(by_user.size());
        result.n_scorable = batch_ndcg.count;
        result.ndcg = {batch_ndcg.mean(), cum_ndcg.mean()};
        result.hit_rate = {batch_hit.mean(), cum_hit.mean()};
        result.f1 = {batch_f1.mean(), cum_f1.mean()};
        cum_novelty_sum += batch_novelty_sum;
        cum_novelty_slots += batch_novelty_slots;
        if (batch_novelty_slots > 0)
            result.novelty.value = batch_novelty_sum / static_cast<double>(batch_novelty_slots);
        if (cum_novelty_slots > 0)
            result.novelty.cumulative = cum_novelty_sum / static_cast<double>(cum_novelty_slots);
        for (const int item : batch_recommended) cum_recommended.insert(item);
        cum_slates += static_cast<std::int64_t>(slates.size());
        if (!slates.empty())
            result.coverage.value =
                static_cast<double>(batch_recommended.size()) / static_cast<double>(catalog_size);
        if (cum_slates > 0)
            result.coverage.cumulative =
                static_cast<double>(cum_recommended.size()) / static_cast<double>(catalog_size);
        out.report.batches.push_back(std::move(result));
    }

    if (!out.report.batches.empty()) {
        const BatchResult& last = out.report.batches.back();
        out.report.final = {last.ndcg.cumulative, last.hit_rate.cumulative, last.f1.cumulative,
                            last.novelty.cumulative, last.coverage.cumulative};
    }
    out.report.dataset = ds.name;
    out.report.policy = state.config;
    out.report.slate_size = rc.slate_size;
    out.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

struct SweepResult {
    double selected = 0.0;
    std::vector<std::pair<double, double>> table;  // (grid value, validation ndcg)
};

namespace detail {

inline PolicyConfig config_with_value(PolicyKind kind, double value, std::uint64_t seed) {
    PolicyConfig cfg;
    cfg.kind = kind;
    cfg.seed = seed;
    switch (kind) {
        case PolicyKind::LinUCB: cfg.alpha = value; break;
        case PolicyKind::LinGreedy: cfg.epsilon = value; break;
        case PolicyKind::LinTS: cfg.nu2 = value; break;
        case PolicyKind::Lin:
            throw std::invalid_argument("Lin has no exploration hyperparameter to sweep");
    }
    return cfg;
}

}  // namespace detail

/// Grid search for one policy's exploration hyperparameter: fit on
/// warmup_train, score NDCG@K over warmup_validation treated as a single
/// batch, same seed for every grid value. Ties go to the smaller value.
inline SweepResult sweep_hyperparameters(PolicyKind kind, std::span<const double> grid,
                                         const Dataset& ds, const Partitions& parts,
                                         const ItemEmbeddings& emb, const ReplayConfig& rc,
                                         std::uint64_t seed, double lambda = 1.0) {
    if (grid.empty()) throw std::invalid_argument("sweep_hyperparameters: empty grid");
    const std::vector<int> arms = arm_ids_from_rows(ds, parts.warmup_train, rc.max_arms);

    SweepResult result;
    double best_score = -std::numeric_limits<double>::infinity();
    bool first = true;
    for (const double value : grid) {
        BanditState state = make_bandit_state(detail::config_with_value(kind, value, seed), arms,
                                              emb.dim(), lambda);
        ReplayContext ctx = warmup_fit(state, ds, parts.warmup_train, emb, rc.reward);

        std::map<int, std::vector<std::size_t>> by_user;
        for (const std::size_t row : parts.warmup_validation)
            by_user[ds.interactions[row].user].push_back(row);
        static const std::unordered_set<int> no_exclusions;

        detail::MetricAccumulator accum;
        for (const auto& [user, rows] : by_user) {
            const auto uidx = static_cast<std::size_t>(user);
            std::unordered_set<int> relevant;
            for (const std::size_t row : rows) {
                const Interaction& x = ds.interactions[row];
                if (binarize_reward(x, rc.reward) == 1.0 && emb.has(x.item)) relevant.insert(x.item);
            }
            if (relevant.empty()) continue;
            const std::unordered_set<int>& excluded =
                rc.exclude_consumed ? ctx.consumed[uidx] : no_exclusions;
            const Slate slate = recommend(state, ctx.states[uidx].mean, rc.slate_size, excluded);
            if (const auto score = ndcg_at_k(slate, relevant, rc.slate_size)) accum.add(*score);
        }
        const double score = accum.mean().value_or(-std::numeric_limits<double>::infinity());
        result.table.emplace_back(value, accum.mean().value_or(0.0));
        if (first || score > best_score || (score == best_score && value < result.selected)) {
            best_score = score;
            result.selected = value;
            first = false;
        }
    }
    return result;
}

// ---- serialization ----------------------------------------------------------

inline nlohmann::json policy_config_to_json(const PolicyConfig& cfg) {
    nlohmann::json j;
    j["kind"] = to_string(cfg.kind);
    switch (cfg.kind) {
        case PolicyKind::Lin: break;
        case PolicyKind::LinGreedy: j["epsilon"] = cfg.epsilon; break;
        case PolicyKind::LinUCB: j["alpha"] = cfg.alpha; break;
        case PolicyKind::LinTS: j["nu2"] = cfg.nu2; break;
    }
    j["seed"] = cfg.seed;
    return j;
}

namespace detail {

inline nlohmann::json metric_pair_to_json(const MetricPair& pair) {
    nlohmann::json j;
    j["value"] = pair.value ? nlohmann::json(*pair.value) : nlohmann::json(nullptr);
    j["cumulative"] = pair.cumulative ? nlohmann::json(*pair.cumulative) : nlohmann::json(nullptr);
    return j;
}

}  // namespace detail

// The "results" subtree carries everything metric-valued; "meta" carries the
// configs. Wall-clock time is deliberately left out of both.
inline nlohmann::json report_to_json(const EvaluationReport& report) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["meta"] = {{"dataset", report.dataset},
                 {"policy", policy_config_to_json(report.policy)},
                 {"embedding",
                  {{"d", report.embedding.d},
                   {"regularization", report.embedding.regularization},
                   {"iterations", report.embedding.iterations},
                   {"confidence_weight", report.embedding.confidence_weight},
                   {"seed", report.embedding.seed}}},
                 {"slate_size", report.slate_size}};
    nlohmann::json batches = nlohmann::json::array();
    for (const BatchResult& batch : report.batches) {
        nlohmann::json item;
        item["batch"] = batch.batch;
        item["ndcg"] = detail::metric_pair_to_json(batch.ndcg);
        item["hit_rate"] = detail::metric_pair_to_json(batch.hit_rate);
        item["f1"] = detail::metric_pair_to_json(batch.f1);
        item["novelty"] = detail::metric_pair_to_json(batch.novelty);
        item["coverage"] = detail::metric_pair_to_json(batch.coverage);
        item["counts"] = {{"events", batch.n_events},
                          {"users", batch.n_users},
                          {"scorable", batch.n_scorable},
                          {"hits", batch.n_hits}};
        batches.push_back(std::move(item));
    }
    const auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    j["results"] = {{"batches", std::move(batches)},
                    {"final",
                     {{"ndcg", opt(report.final.ndcg)},
                      {"hit_rate", opt(report.final.hit_rate)},
                      {"f1", opt(report.final.f1)},
                      {"novelty", opt(report.final.novelty)},
                      {"coverage", opt(report.final.coverage)}}}};
    return j;
}

// batch,metric,value,cumulative rows; absent values emit empty fields.
inline std::string batches_to_csv(const EvaluationReport& report) {
    std::string csv = "batch,metric,value,cumulative\n";
    const auto field = [](const std::optional<double>& v) { return v ? format_double(*v) : ""; };
    for (const BatchResult& batch : report.batches) {
        const std::pair<const char*, const MetricPair*> rows[] = {
            {"ndcg", &batch.ndcg}, {"hit_rate", &batch.hit_rate}, {"f1", &batch.f1},
            {"novelty", &batch.novelty}, {"coverage", &batch.coverage}};
        for (const auto& [name, pair] : rows) {
            csv += std::to_string(batch.batch);
            csv += ',';
            csv += name;
            csv += ',';
            csv += field(pair->value);
            csv += ',';
            csv += field(pair->cumulative);
            csv += '\n';
        }
    }
    return csv;
}

// user,item,reward,batch,propensity,slate,context. Propensity is left empty
// here (a placeholder until off-policy estimation fills it); slate items and
// context components are pipe-separated.
inline std::string events_to_csv(std::span<const LoggedEvent> events) {
    std::string csv = "user,item,reward,batch,propensity,slate,context\n";
    for (const LoggedEvent& event : events) {
        csv += std::to_string(event.user);
        csv += ',';
        csv += std::to_string(event.item);
        csv += ',';
        csv += format_double(event.reward);
        csv += ',';
        csv += std::to_string(event.batch);
        csv += ",,";
        for (std::size_t i = 0; i < event.slate.items.size(); ++i) {
            if (i > 0) csv += '|';
            csv += std::to_string(event.slate.items[i]);
        }
        csv += ',';
        for (Eigen::Index i = 0; i < event.context.size(); ++i) {
            if (i > 0) csv += '|';
            csv += format_double(event.context(i));
        }
        csv += '\n';
    }
    return csv;
}

inline std::vector<LoggedEvent> events_from_csv(const std::string& csv) {
    std::vector<LoggedEvent> events;
    std::size_t pos = csv.find('\n');
    if (pos == std::string::npos) return events;
    ++pos;
    while (pos < csv.size()) {
        std::size_t end = csv.find('\n', pos);
        if (end == std::string::npos) end = csv.size();
        const std::string line = csv.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        const std::vector<std::string> fields = detail::split_line(line, ',');
        if (fields.size() != 7) throw DataError("events_from_csv: expected 7 fields");
        LoggedEvent event;
        event.user = std::stoi(fields[0]);
        event.item = std::stoi(fields[1]);
        event.reward = std::stod(fields[2]);
        event.batch = std::stoi(fields[3]);
        if (!fields[5].empty()) {
            for (const std::string& part : detail::split_line(fields[5], '|'))
                event.slate.items.push_back(std::stoi(part));
        }
        const std::vector<std::string> comps = detail::split_line(fields[6], '|');
        event.context.resize(static_cast<Eigen::Index>(comps.size()));
        for (std::size_t i = 0; i < comps.size(); ++i)
            event.context(static_cast<Eigen::Index>(i)) = std::stod(comps[i]);
        events.push_back(std::move(event));
    }
    return events;
}

}  // namespace linbandit
