#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "linbandit/common.hpp"

namespace linbandit {

// One logged event, ids already mapped to dense 0-based indices.
struct Interaction {
    int user;
    int item;
    std::optional<double> rating;
    std::int64_t timestamp;
};

struct Dataset {
    std::string name;
    std::vector<Interaction> interactions;  // non-decreasing timestamp, input order on ties
    std::vector<std::string> user_ids;      // dense index -> original id
    std::vector<std::string> item_ids;
    std::unordered_map<std::string, int> user_index;
    std::unordered_map<std::string, int> item_index;
    std::optional<std::pair<double, double>> rating_scale;

    int n_users() const { return static_cast<int>(user_ids.size()); }
    int n_items() const { return static_cast<int>(item_ids.size()); }
    std::size_t size() const { return interactions.size(); }
};

// Column selectors are header names when `has_header`, 0-based indices otherwise.
struct ColumnMapping {
    std::string user = "user";
    std::string item = "item";
    std::optional<std::string> rating;
    std::string timestamp = "timestamp";
    char delimiter = ',';
    bool has_header = true;
};

struct RewardRule {
    std::optional<std::pair<double, double>> rating_scale;  // absent = implicit feedback
    double threshold_fraction = 0.75;
};

// Chronological warm-up / validation / test partitioning as row indices into
// the cleaned dataset. Index vectors stay sorted, so concatenating the slices
// reproduces the dataset order.
struct Partitions {
    std::vector<std::size_t> warmup_train;
    std::vector<std::size_t> warmup_validation;
    std::vector<std::vector<std::size_t>> test_batches;
    std::vector<std::size_t> dropped_per_batch;  // filled by filter_unseen_items
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, char delimiter) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t end = line.find(delimiter, start);
        if (end == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, end - start));
        start = end + 1;
    }
    if (!fields.empty() && !fields.back().empty() && fields.back().back() == '\r')
        fields.back().pop_back();
    return fields;
}

inline std::size_t resolve_column(const std::vector<std::string>& header, const std::string& selector,
                                  bool has_header, const std::string& path) {
    if (has_header) {
        const auto it = std::find(header.begin(), header.end(), selector);
        if (it == header.end())
            throw DataError(path + ": missing column '" + selector + "' in header");
        return static_cast<std::size_t>(it - header.begin());
    }
    std::size_t index = 0;
    const auto res = std::from_chars(selector.data(), selector.data() + selector.size(), index);
    if (res.ec != std::errc() || res.ptr != selector.data() + selector.size())
        throw ConfigError("column selector '" + selector + "' is not an index and the file has no header");
    return index;
}

}  // namespace detail

/// Parse a delimiter-separated interaction log. Rows are stably sorted by
/// timestamp and ids densified in order of first (chronological) appearance.
/// Any malformed row aborts the load with its 1-based line number.
inline Dataset load_interactions(const std::filesystem::path& path, const ColumnMapping& mapping,
                                 std::optional<std::pair<double, double>> rating_scale = std::nullopt,
                                 std::string name = "") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path.string());

    struct RawRow {
        std::string user, item;
        std::optional<double> rating;
        std::int64_t timestamp;
    };
    std::vector<RawRow> rows;

    std::string line;
    std::size_t line_number = 0;
    std::vector<std::string> header;
    if (mapping.has_header) {
        if (!std::getline(in, line)) return Dataset{std::move(name), {}, {}, {}, {}, {}, rating_scale};
        ++line_number;
        header = detail::split_line(line, mapping.delimiter);
    }
    const std::size_t user_col = detail::resolve_column(header, mapping.user, mapping.has_header, path.string());
    const std::size_t item_col = detail::resolve_column(header, mapping.item, mapping.has_header, path.string());
    const std::size_t ts_col = detail::resolve_column(header, mapping.timestamp, mapping.has_header, path.string());
    std::optional<std::size_t> rating_col;
    if (mapping.rating)
        rating_col = detail::resolve_column(header, *mapping.rating, mapping.has_header, path.string());

    while (std::getline(in, line)) {
        ++line_number;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        const std::vector<std::string> fields = detail::split_line(line, mapping.delimiter);
        const std::size_t needed =
            std::max({user_col, item_col, ts_col, rating_col.value_or(0)}) + 1;
        if (fields.size() < needed)
            throw DataError(path.string() + ":" + std::to_string(line_number) + ": expected at least " +
                            std::to_string(needed) + " columns, got " + std::to_string(fields.size()));

        RawRow row;
        row.user = fields[user_col];
        row.item = fields[item_col];
        const std::string& ts = fields[ts_col];
        const auto ts_res = std::from_chars(ts.data(), ts.data() + ts.size(), row.timestamp);
        if (ts_res.ec != std::errc() || ts_res.ptr != ts.data() + ts.size() || row.timestamp < 0)
            throw DataError(path.string() + ":" + std::to_string(line_number) +
                            ": unparseable timestamp '" + ts + "'");
        if (rating_col) {
            const std::string& r = fields[*rating_col];
            try {
                std::size_t used = 0;
                const double value = std::stod(r, &used);
                if (used != r.size()) throw std::invalid_argument(r);
                row.rating = value;
            } catch (const std::exception&) {
                throw DataError(path.string() + ":" + std::to_string(line_number) +
                                ": unparseable rating '" + r + "'");
            }
            if (rating_scale && (*row.rating < rating_scale->first || *row.rating > rating_scale->second))
                throw DataError(path.string() + ":" + std::to_string(line_number) + ": rating " + r +
                                " outside declared scale");
        }
        rows.push_back(std::move(row));
    }

    std::stable_sort(rows.begin(), rows.end(),
                     [](const RawRow& lhs, const RawRow& rhs) { return lhs.timestamp < rhs.timestamp; });

    Dataset ds{std::move(name), {}, {}, {}, {}, {}, rating_scale};
    ds.interactions.reserve(rows.size());
    for (const RawRow& row : rows) {
        auto [uit, unew] = ds.user_index.try_emplace(row.user, ds.n_users());
        if (unew) ds.user_ids.push_back(row.user);
        auto [iit, inew] = ds.item_index.try_emplace(row.item, ds.n_items());
        if (inew) ds.item_ids.push_back(row.item);
        ds.interactions.push_back({uit->second, iit->second, row.rating, row.timestamp});
    }
    return ds;
}

/// Deduplicate per §-style rules: identical (user, item, rating) tuples keep
/// the earliest occurrence; a (user, item) pair seen with conflicting ratings
/// is removed entirely; ratingless repeats keep the earliest. Indices are
/// re-densified over the surviving rows.
inline Dataset clean(const Dataset& ds) {
    struct PairState {
        std::optional<double> rating;
        bool conflicting = false;
        bool has_rating = false;
    };
    std::unordered_map<std::int64_t, PairState> pairs;
    const auto key = [&](const Interaction& x) {
        return static_cast<std::int64_t>(x.user) * ds.n_items() + x.item;
    };
    for (const Interaction& x : ds.interactions) {
        auto [it, inserted] = pairs.try_emplace(key(x));
        PairState& state = it->second;
        if (inserted) {
            state.rating = x.rating;
            state.has_rating = x.rating.has_value();
        } else if (state.has_rating != x.rating.has_value() ||
                   (state.has_rating && *state.rating != *x.rating)) {
            state.conflicting = true;
        }
    }

    Dataset out{ds.name, {}, {}, {}, {}, {}, ds.rating_scale};
    std::unordered_set<std::int64_t> emitted;
    for (const Interaction& x : ds.interactions) {
        const std::int64_t k = key(x);
        if (pairs.at(k).conflicting) continue;
        if (!emitted.insert(k).second) continue;
        const std::string& user_id = ds.user_ids[static_cast<std::size_t>(x.user)];
        const std::string& item_id = ds.item_ids[static_cast<std::size_t>(x.item)];
        auto [uit, unew] = out.user_index.try_emplace(user_id, out.n_users());
        if (unew) out.user_ids.push_back(user_id);
        auto [iit, inew] = out.item_index.try_emplace(item_id, out.n_items());
        if (inew) out.item_ids.push_back(item_id);
        out.interactions.push_back({uit->second, iit->second, x.rating, x.timestamp});
    }
    return out;
}

/// First floor(wf*N) rows form the warm-up, whose trailing floor(vf*|warmup|)
/// rows are held out for validation; the rest is cut into n_batches contiguous
/// batches, earlier batches one row larger when sizes do not divide evenly.
inline Partitions chronological_split(const Dataset& ds, double warmup_fraction,
                                      double validation_fraction_of_warmup, int n_batches) {
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
        throw std::invalid_argument("chronological_split: warmup_fraction must be in (0,1)");
    if (!(validation_fraction_of_warmup >= 0.0 && validation_fraction_of_warmup < 1.0))
        throw std::invalid_argument("chronological_split: validation fraction must be in [0,1)");
    if (n_batches < 1) throw std::invalid_argument("chronological_split: n_batches must be >= 1");

    const std::size_t n = ds.size();
    const auto warmup = static_cast<std::size_t>(warmup_fraction * static_cast<double>(n));
    const auto validation = static_cast<std::size_t>(validation_fraction_of_warmup * static_cast<double>(warmup));
    const std::size_t test = n - warmup;
    if (test < static_cast<std::size_t>(n_batches))
        throw DataError("chronological_split: " + std::to_string(test) + " test rows cannot fill " +
                        std::to_string(n_batches) + " batches");

    Partitions parts;
    const std::size_t train_end = warmup - validation;
    for (std::size_t i = 0; i < train_end; ++i) parts.warmup_train.push_back(i);
    for (std::size_t i = train_end; i < warmup; ++i) parts.warmup_validation.push_back(i);

    const std::size_t base = test / static_cast<std::size_t>(n_batches);
    const std::size_t remainder = test % static_cast<std::size_t>(n_batches);
    std::size_t cursor = warmup;
    for (int batch = 0; batch < n_batches; ++batch) {
        const std::size_t size = base + (static_cast<std::size_t>(batch) < remainder ? 1 : 0);
        std::vector<std::size_t> rows(size);
        for (std::size_t i = 0; i < size; ++i) rows[i] = cursor + i;
        cursor += size;
        parts.test_batches.push_back(std::move(rows));
    }
    parts.dropped_per_batch.assign(parts.test_batches.size(), 0);
    return parts;
}

inline std::unordered_set<int> warmup_item_set(const Dataset& ds, const Partitions& parts) {
    std::unordered_set<int> items;
    for (const std::size_t row : parts.warmup_train) items.insert(ds.interactions[row].item);
    for (const std::size_t row : parts.warmup_validation) items.insert(ds.interactions[row].item);
    return items;
}

/// Drop test rows whose item never occurs in the warm-up (train or validation).
inline Partitions filter_unseen_items(const Dataset& ds, const Partitions& parts) {
    const std::unordered_set<int> known = warmup_item_set(ds, parts);
    Partitions out;
    out.warmup_train = parts.warmup_train;
    out.warmup_validation = parts.warmup_validation;
    for (const std::vector<std::size_t>& batch : parts.test_batches) {
        std::vector<std::size_t> kept;
        kept.reserve(batch.size());
        for (const std::size_t row : batch) {
            if (known.count(ds.interactions[row].item)) kept.push_back(row);
        }
        out.dropped_per_batch.push_back(batch.size() - kept.size());
        out.test_batches.push_back(std::move(kept));
    }
    return out;
}

/// Binary reward: implicit feedback is always 1; explicit ratings binarize at
/// min + threshold_fraction * (max - min).
inline double binarize_reward(const Interaction& x, const RewardRule& rule) {
    if (!(rule.threshold_fraction >= 0.0 && rule.threshold_fraction <= 1.0))
        throw std::invalid_argument("binarize_reward: threshold_fraction must be in [0,1]");
    if (!rule.rating_scale) return 1.0;
    if (!x.rating) throw DataError("binarize_reward: explicit dataset with missing rating");
    const auto [lo, hi] = *rule.rating_scale;
    return *x.rating >= lo + rule.threshold_fraction * (hi - lo) ? 1.0 : 0.0;
}

}  // namespace linbandit
