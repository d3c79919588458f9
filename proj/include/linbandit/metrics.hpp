#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "linbandit/common.hpp"
#include "linbandit/slate.hpp"

namespace linbandit {

/// Relative item frequencies over a reference interaction slice. Items absent
/// from the slice fall back to one pseudo-count when smoothing is enabled.
class PopularityTable {
public:
    PopularityTable(std::unordered_map<int, std::int64_t> counts, std::int64_t total, bool laplace)
        : counts_(std::move(counts)), total_(total), laplace_(laplace) {}

    double pop(int item) const {
        const auto it = counts_.find(item);
        if (it != counts_.end()) return static_cast<double>(it->second) / static_cast<double>(total_);
        if (!laplace_) throw DataError("PopularityTable: no entry for item " + std::to_string(item));
        return 1.0 / static_cast<double>(total_);
    }

    std::int64_t total() const { return total_; }

private:
    std::unordered_map<int, std::int64_t> counts_;
    std::int64_t total_;
    bool laplace_;
};

// Binary-relevance NDCG@K. Not scorable when the relevant set is empty.
inline std::optional<double> ndcg_at_k(const Slate& slate, const std::unordered_set<int>& relevant, int k) {
    if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
    if (relevant.empty()) return std::nullopt;
    double dcg = 0.0;
    const int depth = std::min<int>(k, static_cast<int>(slate.items.size()));
    for (int pos = 1; pos <= depth; ++pos) {
        if (relevant.count(slate.items[pos - 1])) dcg += 1.0 / std::log2(pos + 1.0);
    }
    double idcg = 0.0;
    const int ideal = std::min<int>(k, static_cast<int>(relevant.size()));
    for (int pos = 1; pos <= ideal; ++pos) idcg += 1.0 / std::log2(pos + 1.0);
    return dcg / idcg;
}

inline std::optional<double> hit_rate_at_k(const Slate& slate, const std::unordered_set<int>& relevant, int k) {
    if (k < 1) throw std::invalid_argument("hit_rate_at_k: k must be >= 1");
    if (relevant.empty()) return std::nullopt;
    const int depth = std::min<int>(k, static_cast<int>(slate.items.size()));
    for (int pos = 0; pos < depth; ++pos) {
        if (relevant.count(slate.items[pos])) return 1.0;
    }
    return 0.0;
}

inline std::optional<double> f1_at_k(const Slate& slate, const std::unordered_set<int>& relevant, int k) {
    if (k < 1) throw std::invalid_argument("f1_at_k: k must be >= 1");
    if (relevant.empty()) return std::nullopt;
    const int depth = std::min<int>(k, static_cast<int>(slate.items.size()));
    int hits = 0;
    for (int pos = 0; pos < depth; ++pos) {
        if (relevant.count(slate.items[pos])) ++hits;
    }
    const double precision = depth > 0 ? static_cast<double>(hits) / depth : 0.0;
    const double recall = static_cast<double>(hits) / static_cast<double>(relevant.size());
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// Per-slate novelty contribution: (sum of -log2 pop over the top-k slots, slot count).
inline std::pair<double, std::int64_t> novelty_sum_at_k(const Slate& slate, const PopularityTable& pop, int k) {
    const int depth = std::min<int>(k, static_cast<int>(slate.items.size()));
    double sum = 0.0;
    for (int pos = 0; pos < depth; ++pos) sum -= std::log2(pop.pop(slate.items[pos]));
    return {sum, depth};
}

// Mean information content of the recommended slots. `printed_sign` keeps the
// raw log2 sum (non-positive) instead of the negated form.
inline double novelty_at_k(std::span<const Slate> slates, const PopularityTable& pop, int k,
                           bool printed_sign = false) {
    double sum = 0.0;
    std::int64_t slots = 0;
    for (const Slate& slate : slates) {
        const auto [s, n] = novelty_sum_at_k(slate, pop, k);
        sum += s;
        slots += n;
    }
    if (slots == 0) return 0.0;
    const double value = sum / static_cast<double>(slots);
    return printed_sign ? -value : value;
}

inline double coverage_at_k(std::span<const Slate> slates, int catalog_size, int k) {
    if (catalog_size < 1) throw std::invalid_argument("coverage_at_k: catalog_size must be >= 1");
    std::unordered_set<int> seen;
    for (const Slate& slate : slates) {
        const int depth = std::min<int>(k, static_cast<int>(slate.items.size()));
        for (int pos = 0; pos < depth; ++pos) seen.insert(slate.items[pos]);
    }
    return static_cast<double>(seen.size()) / static_cast<double>(catalog_size);
}

// Inverse standard-normal CDF: Acklam's rational approximation polished with
// one Halley step against erfc, giving ~1e-15 accuracy on (0,1).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must be in (0,1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    const double err = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = err * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

// Bonferroni-Dunn critical difference for comparing k average ranks over n
// datasets: q * sqrt(k(k+1)/(6n)) with q the two-tailed normal critical value
// at alpha/(k-1).
inline double critical_difference(int k, int n, double alpha) {
    if (k < 2) throw std::invalid_argument("critical_difference: k must be >= 2");
    if (n < 1) throw std::invalid_argument("critical_difference: n must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("critical_difference: alpha must be in (0,1)");
    const double adjusted = alpha / static_cast<double>(k - 1);
    const double q = normal_quantile(1.0 - adjusted / 2.0);
    return q * std::sqrt(static_cast<double>(k) * (k + 1) / (6.0 * n));
}

// Higher metric value = better (lower) rank; equal values share the average rank.
struct RankTable {
    std::vector<std::string> datasets;
    std::vector<std::string> policies;
    Eigen::MatrixXd values;         // datasets x policies
    Eigen::MatrixXd ranks;          // same shape, 1 = best
    Eigen::VectorXd average_ranks;  // per policy
};

inline RankTable rank_policies(std::vector<std::string> datasets, std::vector<std::string> policies,
                               const Eigen::MatrixXd& values) {
    const auto n_datasets = static_cast<Eigen::Index>(datasets.size());
    const auto n_policies = static_cast<Eigen::Index>(policies.size());
    if (values.rows() != n_datasets || values.cols() != n_policies)
        throw std::invalid_argument("rank_policies: value matrix shape mismatch");
    if (!values.allFinite()) throw DataError("rank_policies: missing (non-finite) cell");

    RankTable table{std::move(datasets), std::move(policies), values,
                    Eigen::MatrixXd::Zero(n_datasets, n_policies), Eigen::VectorXd::Zero(n_policies)};
    for (Eigen::Index row = 0; row < n_datasets; ++row) {
        std::vector<int> order(n_policies);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int lhs, int rhs) { return values(row, lhs) > values(row, rhs); });
        Eigen::Index pos = 0;
        while (pos < n_policies) {
            Eigen::Index end = pos;
            while (end + 1 < n_policies && values(row, order[end + 1]) == values(row, order[pos])) ++end;
            const double shared = 0.5 * static_cast<double>(pos + end) + 1.0;
            for (Eigen::Index i = pos; i <= end; ++i) table.ranks(row, order[i]) = shared;
            pos = end + 1;
        }
    }
    table.average_ranks = table.ranks.colwise().mean();
    return table;
}

}  // namespace linbandit
