#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "linbandit/common.hpp"
#include "linbandit/dataset.hpp"
#include "linbandit/embedding.hpp"
#include "linbandit/metrics.hpp"
#include "linbandit/ope.hpp"
#include "linbandit/policy.hpp"
#include "linbandit/replay.hpp"

namespace linbandit {

struct DatasetSpec {
    std::string name;
    std::filesystem::path path;
    ColumnMapping mapping;
    std::optional<std::pair<double, double>> rating_scale;
};

struct PolicySpec {
    PolicyKind kind = PolicyKind::Lin;
    std::string name;                // defaults to the kind name; must be unique
    std::optional<double> fixed;     // pinned hyperparameter, skips the sweep
    std::vector<double> grid;        // swept values (empty for Lin)
};

struct SplitSpec {
    double warmup_fraction = 0.5;
    double validation_fraction_of_warmup = 0.1;
    int n_batches = 10;
};

struct OpeSpec {
    double clip_floor = 1e-3;
    int n_ts_samples = 100;
    std::size_t max_events = 0;  // 0 = all logged events
};

struct RunConfig {
    DatasetSpec dataset;
    SplitSpec split;
    double threshold_fraction = 0.75;
    std::vector<EmbeddingConfig> embedding_grid;  // seeds filled in at stage time
    std::vector<PolicySpec> policies;
    int slate_size = 20;
    int max_arms = 0;
    bool exclude_consumed = true;
    bool update_on_all = true;
    double lambda = 1.0;
    OpeSpec ope;
    std::uint64_t seed = 42;
    std::filesystem::path out_dir;

    RewardRule reward_rule() const { return {dataset.rating_scale, threshold_fraction}; }
    ReplayConfig replay_config() const {
        return {slate_size, split.n_batches, reward_rule(), exclude_consumed, update_on_all,
                max_arms, seed};
    }
};

inline std::vector<double> default_grid(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::Lin: return {};
        case PolicyKind::LinUCB:
        case PolicyKind::LinTS: return {0.10, 0.50, 1.00, 1.50, 2.00};
        case PolicyKind::LinGreedy: return {0.01, 0.05, 0.10, 0.25, 0.50};
    }
    return {};
}

namespace detail {

template <typename T>
inline std::vector<T> scalar_or_list(const nlohmann::json& j) {
    if (j.is_array()) return j.get<std::vector<T>>();
    return {j.get<T>()};
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    try {
        RunConfig cfg;
        const auto& ds = j.at("dataset");
        cfg.dataset.name = ds.at("name").get<std::string>();
        cfg.dataset.path = base_dir / ds.at("path").get<std::string>();
        if (ds.contains("delimiter")) {
            const auto delim = ds.at("delimiter").get<std::string>();
            if (delim.size() != 1) throw ConfigError("dataset.delimiter must be one character");
            cfg.dataset.mapping.delimiter = delim[0];
        }
        if (ds.contains("has_header")) cfg.dataset.mapping.has_header = ds.at("has_header").get<bool>();
        const auto& cols = ds.at("columns");
        cfg.dataset.mapping.user = cols.at("user").get<std::string>();
        cfg.dataset.mapping.item = cols.at("item").get<std::string>();
        cfg.dataset.mapping.timestamp = cols.at("timestamp").get<std::string>();
        if (cols.contains("rating")) cfg.dataset.mapping.rating = cols.at("rating").get<std::string>();
        if (ds.contains("rating_scale") && !ds.at("rating_scale").is_null()) {
            const auto scale = ds.at("rating_scale").get<std::vector<double>>();
            if (scale.size() != 2) throw ConfigError("dataset.rating_scale must be [min, max]");
            cfg.dataset.rating_scale = {scale[0], scale[1]};
        }

        if (j.contains("split")) {
            const auto& split = j.at("split");
            if (split.contains("warmup_fraction"))
                cfg.split.warmup_fraction = split.at("warmup_fraction").get<double>();
            if (split.contains("validation_fraction_of_warmup"))
                cfg.split.validation_fraction_of_warmup =
                    split.at("validation_fraction_of_warmup").get<double>();
            if (split.contains("n_batches")) cfg.split.n_batches = split.at("n_batches").get<int>();
        }
        if (j.contains("reward") && j.at("reward").contains("threshold_fraction"))
            cfg.threshold_fraction = j.at("reward").at("threshold_fraction").get<double>();

        const auto& emb = j.at("embedding");
        const std::vector<int> ds_list = detail::scalar_or_list<int>(emb.at("d"));
        const std::vector<double> regs = detail::scalar_or_list<double>(emb.at("regularization"));
        const std::vector<int> iters = detail::scalar_or_list<int>(emb.at("iterations"));
        const double confidence =
            emb.contains("confidence_weight") ? emb.at("confidence_weight").get<double>() : 40.0;
        for (const int d : ds_list)
            for (const double reg : regs)
                for (const int iter : iters)
                    cfg.embedding_grid.push_back({d, reg, iter, confidence, 0});

        std::set<std::string> names;
        for (const auto& pj : j.at("policies")) {
            PolicySpec spec;
            spec.kind = policy_kind_from_string(pj.at("kind").get<std::string>());
            spec.name = pj.contains("name") ? pj.at("name").get<std::string>() : to_string(spec.kind);
            if (!names.insert(spec.name).second)
                throw ConfigError("duplicate policy name: " + spec.name);
            const char* fixed_key = spec.kind == PolicyKind::LinUCB      ? "alpha"
                                    : spec.kind == PolicyKind::LinGreedy ? "epsilon"
                                    : spec.kind == PolicyKind::LinTS     ? "nu2"
                                                                         : nullptr;
            if (fixed_key && pj.contains(fixed_key)) spec.fixed = pj.at(fixed_key).get<double>();
            const std::string grid_key = fixed_key ? std::string(fixed_key) + "_grid" : "";
            if (!grid_key.empty() && pj.contains(grid_key))
                spec.grid = pj.at(grid_key).get<std::vector<double>>();
            else if (!spec.fixed)
                spec.grid = default_grid(spec.kind);
            cfg.policies.push_back(std::move(spec));
        }
        if (cfg.policies.empty()) throw ConfigError("at least one policy is required");

        if (j.contains("replay")) {
            const auto& replay = j.at("replay");
            if (replay.contains("slate_size")) cfg.slate_size = replay.at("slate_size").get<int>();
            if (replay.contains("max_arms")) cfg.max_arms = replay.at("max_arms").get<int>();
            if (replay.contains("exclude_consumed"))
                cfg.exclude_consumed = replay.at("exclude_consumed").get<bool>();
            if (replay.contains("update_on_all"))
                cfg.update_on_all = replay.at("update_on_all").get<bool>();
            if (replay.contains("lambda")) cfg.lambda = replay.at("lambda").get<double>();
        }
        if (j.contains("ope")) {
            const auto& ope = j.at("ope");
            if (ope.contains("clip_floor")) cfg.ope.clip_floor = ope.at("clip_floor").get<double>();
            if (ope.contains("n_ts_samples")) cfg.ope.n_ts_samples = ope.at("n_ts_samples").get<int>();
            if (ope.contains("max_events"))
                cfg.ope.max_events = ope.at("max_events").get<std::size_t>();
        }
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.out_dir = base_dir / j.at("out_dir").get<std::string>();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad run config: ") + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_run_config(j, path.has_parent_path() ? path.parent_path() : ".");
}

// ---- canonical config views (stage staleness hashing) ------------------------

namespace detail {

inline nlohmann::json dataset_view(const RunConfig& cfg) {
    nlohmann::json j;
    j["name"] = cfg.dataset.name;
    j["path"] = cfg.dataset.path.string();
    j["delimiter"] = std::string(1, cfg.dataset.mapping.delimiter);
    j["has_header"] = cfg.dataset.mapping.has_header;
    j["user"] = cfg.dataset.mapping.user;
    j["item"] = cfg.dataset.mapping.item;
    j["timestamp"] = cfg.dataset.mapping.timestamp;
    j["rating"] = cfg.dataset.mapping.rating ? nlohmann::json(*cfg.dataset.mapping.rating)
                                             : nlohmann::json(nullptr);
    j["rating_scale"] = cfg.dataset.rating_scale
                            ? nlohmann::json({cfg.dataset.rating_scale->first,
                                              cfg.dataset.rating_scale->second})
                            : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json prepare_view(const RunConfig& cfg) {
    return {{"dataset", dataset_view(cfg)},
            {"warmup_fraction", cfg.split.warmup_fraction},
            {"validation_fraction_of_warmup", cfg.split.validation_fraction_of_warmup},
            {"n_batches", cfg.split.n_batches}};
}

inline nlohmann::json embed_view(const RunConfig& cfg) {
    nlohmann::json grid = nlohmann::json::array();
    for (const EmbeddingConfig& e : cfg.embedding_grid)
        grid.push_back({{"d", e.d},
                        {"regularization", e.regularization},
                        {"iterations", e.iterations},
                        {"confidence_weight", e.confidence_weight}});
    return {{"prepare", prepare_view(cfg)},
            {"threshold_fraction", cfg.threshold_fraction},
            {"grid", std::move(grid)},
            {"seed", cfg.seed}};
}

inline nlohmann::json policies_view(const RunConfig& cfg) {
    nlohmann::json list = nlohmann::json::array();
    for (const PolicySpec& p : cfg.policies)
        list.push_back({{"kind", to_string(p.kind)},
                        {"name", p.name},
                        {"fixed", p.fixed ? nlohmann::json(*p.fixed) : nlohmann::json(nullptr)},
                        {"grid", p.grid}});
    return list;
}

inline nlohmann::json run_view(const RunConfig& cfg) {
    return {{"embed", embed_view(cfg)},
            {"policies", policies_view(cfg)},
            {"slate_size", cfg.slate_size},
            {"max_arms", cfg.max_arms},
            {"exclude_consumed", cfg.exclude_consumed},
            {"update_on_all", cfg.update_on_all},
            {"lambda", cfg.lambda}};
}

inline nlohmann::json ope_view(const RunConfig& cfg) {
    return {{"run", run_view(cfg)},
            {"clip_floor", cfg.ope.clip_floor},
            {"n_ts_samples", cfg.ope.n_ts_samples},
            {"max_events", cfg.ope.max_events}};
}

inline std::string view_hash(const nlohmann::json& view) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(view.dump())));
    return std::string(buf);
}

}  // namespace detail

// ---- manifest -----------------------------------------------------------------

/// Content hashes of every artifact plus, per stage, the exact inputs it
/// consumed. Downstream stages verify their inputs against this before running.
class Manifest {
public:
    static Manifest load_or_create(const std::filesystem::path& out_dir, std::uint64_t master_seed) {
        Manifest m;
        m.dir_ = out_dir;
        const std::filesystem::path file = out_dir / "manifest.json";
        if (std::filesystem::exists(file)) {
            m.root_ = nlohmann::json::parse(read_file(file));
        } else {
            m.root_ = {{"schema_version", 1},
                       {"master_seed", master_seed},
                       {"seeds", nlohmann::json::object()},
                       {"artifacts", nlohmann::json::object()},
                       {"stages", nlohmann::json::object()}};
        }
        return m;
    }

    void record_seed(const std::string& name, std::uint64_t value) {
        root_["seeds"][name] = value;
    }

    bool has_artifact(const std::string& name) const { return root_["artifacts"].contains(name); }

    // Recorded hash, re-hashed against the file on disk.
    std::string verified_hash(const std::string& name) const {
        if (!root_["artifacts"].contains(name))
            throw DependencyError("missing artifact '" + name + "'; run the producing stage first");
        const std::filesystem::path file = dir_ / name;
        if (!std::filesystem::exists(file))
            throw DependencyError("artifact '" + name + "' recorded but deleted; rerun its stage");
        const std::string recorded = root_["artifacts"][name].get<std::string>();
        const std::string actual = hash_file_hex(file);
        if (recorded != actual)
            throw StalenessError("stale artifact '" + name + "': recorded " + recorded + ", found " +
                                 actual);
        return actual;
    }

    bool stage_is_current(const std::string& stage, const std::string& config_hash,
                          const std::map<std::string, std::string>& input_hashes) const {
        if (!root_["stages"].contains(stage)) return false;
        const nlohmann::json& entry = root_["stages"][stage];
        if (entry["config_hash"].get<std::string>() != config_hash) return false;
        if (entry["inputs"] != nlohmann::json(input_hashes)) return false;
        for (const auto& output : entry["outputs"]) {
            const std::string name = output.get<std::string>();
            const std::filesystem::path file = dir_ / name;
            if (!std::filesystem::exists(file)) return false;
            if (!root_["artifacts"].contains(name)) return false;
            if (root_["artifacts"][name].get<std::string>() != hash_file_hex(file)) return false;
        }
        return true;
    }

    void record_stage(const std::string& stage, const std::string& config_hash,
                      const std::map<std::string, std::string>& input_hashes,
                      const std::vector<std::string>& outputs) {
        nlohmann::json entry;
        entry["config_hash"] = config_hash;
        entry["inputs"] = input_hashes;
        entry["outputs"] = outputs;
        for (const std::string& name : outputs)
            root_["artifacts"][name] = hash_file_hex(dir_ / name);
        root_["stages"][stage] = std::move(entry);
    }

    void save() const { atomic_write(dir_ / "manifest.json", root_.dump(2) + "\n"); }

private:
    nlohmann::json root_;
    std::filesystem::path dir_;
};

struct StageStatus {
    bool skipped = false;
    double wall_seconds = 0.0;
};

// ---- stage implementations ------------------------------------------------------

namespace detail {

inline Dataset load_cleaned(const RunConfig& cfg) {
    const nlohmann::json parts_json =
        nlohmann::json::parse(read_file(cfg.out_dir / "partitions.json"));
    ColumnMapping mapping;
    mapping.user = "user";
    mapping.item = "item";
    mapping.timestamp = "timestamp";
    if (parts_json.at("has_ratings").get<bool>()) mapping.rating = "rating";
    std::optional<std::pair<double, double>> scale;
    if (!parts_json.at("rating_scale").is_null()) {
        const auto s = parts_json.at("rating_scale").get<std::vector<double>>();
        scale = {s[0], s[1]};
    }
    return load_interactions(cfg.out_dir / "cleaned.csv", mapping, scale, cfg.dataset.name);
}

inline Partitions load_partitions(const RunConfig& cfg, const Dataset& ds) {
    const nlohmann::json j = nlohmann::json::parse(read_file(cfg.out_dir / "partitions.json"));
    Partitions parts;
    const auto range = [&](const nlohmann::json& r) {
        std::vector<std::size_t> rows;
        for (std::size_t i = r.at("begin").get<std::size_t>(); i < r.at("end").get<std::size_t>(); ++i)
            rows.push_back(i);
        return rows;
    };
    parts.warmup_train = range(j.at("warmup_train"));
    parts.warmup_validation = range(j.at("warmup_validation"));
    for (const auto& batch : j.at("test_batches")) parts.test_batches.push_back(range(batch));
    parts.dropped_per_batch.assign(parts.test_batches.size(), 0);

    Partitions filtered = filter_unseen_items(ds, parts);
    const auto recorded = j.at("dropped_per_batch").get<std::vector<std::size_t>>();
    if (recorded != filtered.dropped_per_batch)
        throw StalenessError("partitions.json dropped counts no longer match the cleaned data");
    return filtered;
}

inline std::string cleaned_to_csv(const Dataset& ds, bool has_ratings) {
    std::string csv = has_ratings ? "user,item,rating,timestamp\n" : "user,item,timestamp\n";
    for (const Interaction& x : ds.interactions) {
        csv += ds.user_ids[static_cast<std::size_t>(x.user)];
        csv += ',';
        csv += ds.item_ids[static_cast<std::size_t>(x.item)];
        csv += ',';
        if (has_ratings) {
            csv += format_double(*x.rating);
            csv += ',';
        }
        csv += std::to_string(x.timestamp);
        csv += '\n';
    }
    return csv;
}

inline std::vector<std::size_t> full_warmup_rows(const Partitions& parts) {
    std::vector<std::size_t> rows = parts.warmup_train;
    rows.insert(rows.end(), parts.warmup_validation.begin(), parts.warmup_validation.end());
    return rows;
}

// Selected hyperparameter for a policy: fixed value, else the swept choice.
inline PolicyConfig resolve_policy(const RunConfig& cfg, const PolicySpec& spec,
                                   const nlohmann::json* hyperparams, std::uint64_t seed) {
    PolicyConfig out;
    out.kind = spec.kind;
    out.seed = seed;
    double value = 0.0;
    if (spec.kind != PolicyKind::Lin) {
        if (spec.fixed) {
            value = *spec.fixed;
        } else {
            if (!hyperparams || !hyperparams->contains(spec.name))
                throw DependencyError("policy '" + spec.name +
                                      "' has no swept hyperparameter; run the sweep stage first");
            value = hyperparams->at(spec.name).at("selected").get<double>();
        }
    }
    switch (spec.kind) {
        case PolicyKind::Lin: break;
        case PolicyKind::LinUCB: out.alpha = value; break;
        case PolicyKind::LinGreedy: out.epsilon = value; break;
        case PolicyKind::LinTS: out.nu2 = value; break;
    }
    return out;
}

inline bool needs_sweep(const RunConfig& cfg) {
    for (const PolicySpec& spec : cfg.policies)
        if (spec.kind != PolicyKind::Lin && !spec.fixed) return true;
    return false;
}

}  // namespace detail

/// Load, clean, split and filter the raw log; writes cleaned.csv and
/// partitions.json (row ranges per slice, so the split is bit-reproducible).
inline StageStatus cmd_prepare(const RunConfig& cfg, bool force = false) {
    const auto start = std::chrono::steady_clock::now();
    std::filesystem::create_directories(cfg.out_dir);
    Manifest manifest = Manifest::load_or_create(cfg.out_dir, cfg.seed);

    const std::string config_hash = detail::view_hash(detail::prepare_view(cfg));
    if (!std::filesystem::exists(cfg.dataset.path))
        throw ConfigError("dataset file not found: " + cfg.dataset.path.string());
    const std::map<std::string, std::string> inputs = {
        {cfg.dataset.path.string(), hash_file_hex(cfg.dataset.path)}};
    if (!force && manifest.stage_is_current("prepare", config_hash, inputs))
        return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};

    const Dataset raw = load_interactions(cfg.dataset.path, cfg.dataset.mapping,
                                          cfg.dataset.rating_scale, cfg.dataset.name);
    const Dataset ds = clean(raw);
    const Partitions parts = chronological_split(ds, cfg.split.warmup_fraction,
                                                 cfg.split.validation_fraction_of_warmup,
                                                 cfg.split.n_batches);
    const Partitions filtered = filter_unseen_items(ds, parts);

    const bool has_ratings = cfg.dataset.mapping.rating.has_value();
    atomic_write(cfg.out_dir / "cleaned.csv", detail::cleaned_to_csv(ds, has_ratings));

    nlohmann::json pj;
    pj["schema_version"] = 1;
    pj["dataset"] = cfg.dataset.name;
    pj["n_interactions"] = ds.size();
    pj["n_users"] = ds.n_users();
    pj["n_items"] = ds.n_items();
    pj["has_ratings"] = has_ratings;
    pj["rating_scale"] = ds.rating_scale
                             ? nlohmann::json({ds.rating_scale->first, ds.rating_scale->second})
                             : nlohmann::json(nullptr);
    const auto range_json = [](const std::vector<std::size_t>& rows) {
        return nlohmann::json{{"begin", rows.empty() ? 0 : rows.front()},
                              {"end", rows.empty() ? 0 : rows.back() + 1}};
    };
    pj["warmup_train"] = range_json(parts.warmup_train);
    pj["warmup_validation"] = range_json(parts.warmup_validation);
    nlohmann::json batches = nlohmann::json::array();
    for (const auto& batch : parts.test_batches) batches.push_back(range_json(batch));
    pj["test_batches"] = std::move(batches);
    pj["dropped_per_batch"] = filtered.dropped_per_batch;
    atomic_write(cfg.out_dir / "partitions.json", pj.dump(2) + "\n");

    manifest.record_stage("prepare", config_hash, inputs, {"cleaned.csv", "partitions.json"});
    manifest.save();
    return {false, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

/// Select the ALS config on (train, validation), then write two artifacts: the
/// sweep embedding trained on warmup_train only (embeddings_train.bin) and the
/// replay embedding trained on the full warm-up (embeddings.bin).
inline StageStatus cmd_embed(const RunConfig& cfg, bool force = false) {
    const auto start = std::chrono::steady_clock::now();
    Manifest manifest = Manifest::load_or_create(cfg.out_dir, cfg.seed);

    const std::string config_hash = detail::view_hash(detail::embed_view(cfg));
    const std::map<std::string, std::string> inputs = {
        {"cleaned.csv", manifest.verified_hash("cleaned.csv")},
        {"partitions.json", manifest.verified_hash("partitions.json")}};
    if (!force && manifest.stage_is_current("embed", config_hash, inputs))
        return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};

    const Dataset ds = detail::load_cleaned(cfg);
    const Partitions parts = detail::load_partitions(cfg, ds);
    const RewardRule rule = cfg.reward_rule();
    const std::uint64_t seed = derive_seed(cfg.seed, "embedding");
    manifest.record_seed("embedding", seed);

    std::vector<EmbeddingConfig> grid = cfg.embedding_grid;
    for (EmbeddingConfig& e : grid) e.seed = seed;

    std::vector<EmbeddingSelection> table;
    EmbeddingConfig chosen = grid.size() == 1
                                 ? grid.front()
                                 : select_embedding_config(grid, ds, parts.warmup_train,
                                                           parts.warmup_validation, rule,
                                                           cfg.slate_size, &table);

    const AlsModel sweep_model = train_als(ds, parts.warmup_train, chosen, rule);
    save_embeddings(cfg.out_dir / "embeddings_train.bin", sweep_model.items, chosen);

    const std::vector<std::size_t> warmup = detail::full_warmup_rows(parts);
    const AlsModel replay_model = train_als(ds, warmup, chosen, rule);
    save_embeddings(cfg.out_dir / "embeddings.bin", replay_model.items, chosen);

    nlohmann::json selection;
    selection["schema_version"] = 1;
    selection["selected"] = {{"d", chosen.d},
                             {"regularization", chosen.regularization},
                             {"iterations", chosen.iterations},
                             {"confidence_weight", chosen.confidence_weight},
                             {"seed", chosen.seed}};
    nlohmann::json rows = nlohmann::json::array();
    for (const EmbeddingSelection& entry : table)
        rows.push_back({{"d", entry.config.d},
                        {"regularization", entry.config.regularization},
                        {"iterations", entry.config.iterations},
                        {"ndcg", entry.ndcg}});
    selection["grid"] = std::move(rows);
    atomic_write(cfg.out_dir / "embedding_selection.json", selection.dump(2) + "\n");

    manifest.record_stage("embed", config_hash, inputs,
                          {"embeddings.bin", "embeddings.bin.json", "embeddings_train.bin",
                           "embeddings_train.bin.json", "embedding_selection.json"});
    manifest.save();
    return {false, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

/// Grid-search exploration hyperparameters on the validation slice.
inline StageStatus cmd_sweep(const RunConfig& cfg, bool force = false) {
    const auto start = std::chrono::steady_clock::now();
    Manifest manifest = Manifest::load_or_create(cfg.out_dir, cfg.seed);

    const std::string config_hash = detail::view_hash(detail::run_view(cfg));
    const std::map<std::string, std::string> inputs = {
        {"cleaned.csv", manifest.verified_hash("cleaned.csv")},
        {"partitions.json", manifest.verified_hash("partitions.json")},
        {"embeddings_train.bin", manifest.verified_hash("embeddings_train.bin")},
        {"embeddings_train.bin.json", manifest.verified_hash("embeddings_train.bin.json")}};
    if (!force && manifest.stage_is_current("sweep", config_hash, inputs))
        return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};

    const Dataset ds = detail::load_cleaned(cfg);
    const Partitions parts = detail::load_partitions(cfg, ds);
    const auto [emb, emb_cfg] = load_embeddings(cfg.out_dir / "embeddings_train.bin");
    const ReplayConfig rc = cfg.replay_config();

    nlohmann::json out;
    out["schema_version"] = 1;
    for (const PolicySpec& spec : cfg.policies) {
        if (spec.kind == PolicyKind::Lin || spec.fixed) continue;
        const std::uint64_t seed = derive_seed(cfg.seed, "sweep-" + spec.name);
        manifest.record_seed("sweep-" + spec.name, seed);
        const SweepResult result =
            sweep_hyperparameters(spec.kind, spec.grid, ds, parts, emb, rc, seed, cfg.lambda);
        nlohmann::json entry;
        entry["selected"] = result.selected;
        nlohmann::json table = nlohmann::json::array();
        for (const auto& [value, score] : result.table)
            table.push_back({{"value", value}, {"ndcg", score}});
        entry["table"] = std::move(table);
        out[spec.name] = std::move(entry);
    }
    atomic_write(cfg.out_dir / "hyperparams.json", out.dump(2) + "\n");

    manifest.record_stage("sweep", config_hash, inputs, {"hyperparams.json"});
    manifest.save();
    return {false, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

/// Warm-fit once (the warm arm statistics are policy independent), checkpoint
/// the warm arms, then replay every policy over the test batches.
inline StageStatus cmd_run(const RunConfig& cfg, bool force = false) {
    const auto start = std::chrono::steady_clock::now();
    Manifest manifest = Manifest::load_or_create(cfg.out_dir, cfg.seed);

    const std::string config_hash = detail::view_hash(detail::run_view(cfg));
    std::map<std::string, std::string> inputs = {
        {"cleaned.csv", manifest.verified_hash("cleaned.csv")},
        {"partitions.json", manifest.verified_hash("partitions.json")},
        {"embeddings.bin", manifest.verified_hash("embeddings.bin")},
        {"embeddings.bin.json", manifest.verified_hash("embeddings.bin.json")}};
    if (detail::needs_sweep(cfg))
        inputs.emplace("hyperparams.json", manifest.verified_hash("hyperparams.json"));
    if (!force && manifest.stage_is_current("run", config_hash, inputs))
        return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};

    const Dataset ds = detail::load_cleaned(cfg);
    const Partitions parts = detail::load_partitions(cfg, ds);
    const auto [emb, emb_cfg] = load_embeddings(cfg.out_dir / "embeddings.bin");
    const ReplayConfig rc = cfg.replay_config();

    std::optional<nlohmann::json> hyperparams;
    if (detail::needs_sweep(cfg))
        hyperparams = nlohmann::json::parse(read_file(cfg.out_dir / "hyperparams.json"));

    const std::vector<std::size_t> warmup = detail::full_warmup_rows(parts);
    const std::vector<int> arms = arm_ids_from_rows(ds, warmup, cfg.max_arms);
    const PopularityTable popularity = popularity_from_rows(ds, warmup);

    BanditState warm = make_bandit_state(PolicyConfig{}, arms, emb.dim(), cfg.lambda);
    const ReplayContext warm_ctx = warmup_fit(warm, ds, warmup, emb, rc.reward);
    save_arms(cfg.out_dir / "arms_warm.bin", warm);

    std::vector<std::string> outputs = {"arms_warm.bin"};
    for (const PolicySpec& spec : cfg.policies) {
        const std::uint64_t seed = derive_seed(cfg.seed, "policy-" + spec.name);
        manifest.record_seed("policy-" + spec.name, seed);
        const PolicyConfig pc =
            detail::resolve_policy(cfg, spec, hyperparams ? &*hyperparams : nullptr, seed);

        BanditState state(pc, emb.dim(), cfg.lambda);
        state.arms = warm.arms;
        ReplayContext ctx = warm_ctx;
        ReplayOutcome outcome = run_replay(state, ctx, ds, parts, emb, rc, popularity);
        outcome.report.embedding = emb_cfg;

        atomic_write(cfg.out_dir / ("report_" + spec.name + ".json"),
                     report_to_json(outcome.report).dump(2) + "\n");
        atomic_write(cfg.out_dir / ("batches_" + spec.name + ".csv"),
                     batches_to_csv(outcome.report));
        atomic_write(cfg.out_dir / ("events_" + spec.name + ".csv"), events_to_csv(outcome.events));
        outputs.push_back("report_" + spec.name + ".json");
        outputs.push_back("batches_" + spec.name + ".csv");
        outputs.push_back("events_" + spec.name + ".csv");
    }

    manifest.record_stage("run", config_hash, inputs, outputs);
    manifest.save();
    return {false, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

/// IPW / DM / DR estimates of every policy over the logged test events. The
/// logged data is policy independent, so the first policy's event stream is
/// the canonical log; targets are the warm-fitted states.
inline StageStatus cmd_ope(const RunConfig& cfg, bool force = false) {
    const auto start = std::chrono::steady_clock::now();
    Manifest manifest = Manifest::load_or_create(cfg.out_dir, cfg.seed);

    const std::string log_name = "events_" + cfg.policies.front().name + ".csv";
    const std::string config_hash = detail::view_hash(detail::ope_view(cfg));
    std::map<std::string, std::string> inputs = {
        {log_name, manifest.verified_hash(log_name)},
        {"arms_warm.bin", manifest.verified_hash("arms_warm.bin")}};
    if (detail::needs_sweep(cfg))
        inputs.emplace("hyperparams.json", manifest.verified_hash("hyperparams.json"));
    if (!force && manifest.stage_is_current("ope", config_hash, inputs))
        return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};

    std::vector<LoggedEvent> logged = events_from_csv(read_file(cfg.out_dir / log_name));
    if (cfg.ope.max_events > 0 && logged.size() > cfg.ope.max_events)
        logged.resize(cfg.ope.max_events);
    if (logged.empty()) throw DataError("cmd_ope: empty logged event stream");

    OpeLog log;
    log.events.reserve(logged.size());
    for (const LoggedEvent& event : logged)
        log.events.push_back({event.context, event.item, event.reward, 0.0});
    estimate_propensities(log, cfg.ope.clip_floor);
    const RewardModel reward_model = fit_reward_model(log, 1.0);

    std::optional<nlohmann::json> hyperparams;
    if (detail::needs_sweep(cfg))
        hyperparams = nlohmann::json::parse(read_file(cfg.out_dir / "hyperparams.json"));

    nlohmann::json values = {{"ipw", nlohmann::json::object()},
                             {"dm", nlohmann::json::object()},
                             {"dr", nlohmann::json::object()}};
    for (const PolicySpec& spec : cfg.policies) {
        const std::uint64_t seed = derive_seed(cfg.seed, "ope-" + spec.name);
        manifest.record_seed("ope-" + spec.name, seed);
        const PolicyConfig pc =
            detail::resolve_policy(cfg, spec, hyperparams ? &*hyperparams : nullptr, seed);
        BanditState state = load_arms(cfg.out_dir / "arms_warm.bin", pc);

        const std::vector<ActionDistribution> targets =
            target_distributions_bulk(state, log, cfg.ope.n_ts_samples, seed);
        values["ipw"][spec.name] = ipw(log, targets);
        values["dm"][spec.name] = dm(log, targets, reward_model);
        values["dr"][spec.name] = dr(log, targets, reward_model);
    }

    nlohmann::json out;
    out["schema_version"] = 1;
    out["dataset"] = cfg.dataset.name;
    out["n_events"] = log.events.size();
    out["clip_floor"] = cfg.ope.clip_floor;
    out["n_ts_samples"] = cfg.ope.n_ts_samples;
    out["estimators"] = std::move(values);
    atomic_write(cfg.out_dir / "ope.json", out.dump(2) + "\n");

    manifest.record_stage("ope", config_hash, inputs, {"ope.json"});
    manifest.save();
    return {false, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

/// Merge the per-policy reports into table- and plot-ready CSVs plus the
/// average-rank / critical-difference summary.
inline StageStatus cmd_report(const RunConfig& cfg, bool force = false) {
    const auto start = std::chrono::steady_clock::now();
    Manifest manifest = Manifest::load_or_create(cfg.out_dir, cfg.seed);

    const std::string config_hash = detail::view_hash(detail::ope_view(cfg));
    std::map<std::string, std::string> inputs = {{"ope.json", manifest.verified_hash("ope.json")}};
    for (const PolicySpec& spec : cfg.policies) {
        const std::string name = "report_" + spec.name + ".json";
        inputs.emplace(name, manifest.verified_hash(name));
    }
    if (detail::needs_sweep(cfg))
        inputs.emplace("hyperparams.json", manifest.verified_hash("hyperparams.json"));
    if (!force && manifest.stage_is_current("report", config_hash, inputs))
        return {true, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};

    std::optional<nlohmann::json> hyperparams;
    if (detail::needs_sweep(cfg))
        hyperparams = nlohmann::json::parse(read_file(cfg.out_dir / "hyperparams.json"));

    std::vector<nlohmann::json> reports;
    for (const PolicySpec& spec : cfg.policies)
        reports.push_back(
            nlohmann::json::parse(read_file(cfg.out_dir / ("report_" + spec.name + ".json"))));

    const std::string k_suffix = "@" + std::to_string(cfg.slate_size);
    const char* metric_keys[] = {"ndcg", "hit_rate", "f1", "novelty", "coverage"};

    // (dataset, policy, metric, value) long-form finals.
    std::string finals = "dataset,policy,metric,value\n";
    for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        for (const char* key : metric_keys) {
            const nlohmann::json& value = reports[p]["results"]["final"][key];
            finals += cfg.dataset.name + "," + cfg.policies[p].name + "," + key + k_suffix + ",";
            if (!value.is_null()) finals += format_double(value.get<double>());
            finals += '\n';
        }
    }
    atomic_write(cfg.out_dir / "report" / "final_metrics.csv", finals);

    // Dataset row x policy columns, final NDCG.
    std::string table3 = "dataset";
    for (const PolicySpec& spec : cfg.policies) table3 += "," + spec.name;
    table3 += '\n';
    table3 += cfg.dataset.name;
    for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        const nlohmann::json& value = reports[p]["results"]["final"]["ndcg"];
        table3 += ',';
        if (!value.is_null()) table3 += format_double(value.get<double>());
    }
    table3 += '\n';
    atomic_write(cfg.out_dir / "report" / "table_ndcg.csv", table3);

    // Selected hyperparameters.
    std::string table4 = "dataset,policy,hyperparameter,value,source\n";
    for (const PolicySpec& spec : cfg.policies) {
        if (spec.kind == PolicyKind::Lin) continue;
        const char* param = spec.kind == PolicyKind::LinUCB      ? "alpha"
                            : spec.kind == PolicyKind::LinGreedy ? "epsilon"
                                                                 : "nu2";
        double value = 0.0;
        const char* source = "fixed";
        if (spec.fixed) {
            value = *spec.fixed;
        } else {
            value = hyperparams->at(spec.name).at("selected").get<double>();
            source = "swept";
        }
        table4 += cfg.dataset.name;
        table4 += ',';
        table4 += spec.name;
        table4 += ',';
        table4 += param;
        table4 += ',';
        table4 += format_double(value);
        table4 += ',';
        table4 += source;
        table4 += '\n';
    }
    atomic_write(cfg.out_dir / "report" / "table_hyperparameters.csv", table4);

    // Estimator x policy values.
    const nlohmann::json ope_json = nlohmann::json::parse(read_file(cfg.out_dir / "ope.json"));
    std::string table5 = "estimator";
    for (const PolicySpec& spec : cfg.policies) table5 += "," + spec.name;
    table5 += '\n';
    for (const char* estimator : {"ipw", "dm", "dr"}) {
        table5 += estimator;
        for (const PolicySpec& spec : cfg.policies) {
            table5 += ',';
            table5 += format_double(ope_json["estimators"][estimator][spec.name].get<double>());
        }
        table5 += '\n';
    }
    atomic_write(cfg.out_dir / "report" / "table_ope.csv", table5);

    // Cumulative per-batch series (plot data).
    std::string series = "dataset,policy,metric,batch,value,cumulative\n";
    for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        for (const nlohmann::json& batch : reports[p]["results"]["batches"]) {
            for (const char* key : metric_keys) {
                series += cfg.dataset.name + "," + cfg.policies[p].name + "," + key + k_suffix + "," +
                          std::to_string(batch["batch"].get<int>()) + ",";
                if (!batch[key]["value"].is_null())
                    series += format_double(batch[key]["value"].get<double>());
                series += ',';
                if (!batch[key]["cumulative"].is_null())
                    series += format_double(batch[key]["cumulative"].get<double>());
                series += '\n';
            }
        }
    }
    atomic_write(cfg.out_dir / "report" / "series.csv", series);

    // Average ranks over the datasets present in this run (one, unless reports
    // are merged externally) and the Bonferroni-Dunn critical difference.
    std::vector<std::string> policy_names;
    for (const PolicySpec& spec : cfg.policies) policy_names.push_back(spec.name);
    Eigen::MatrixXd ndcg_values(1, static_cast<Eigen::Index>(cfg.policies.size()));
    bool all_present = true;
    for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        const nlohmann::json& value = reports[p]["results"]["final"]["ndcg"];
        if (value.is_null()) all_present = false;
        ndcg_values(0, static_cast<Eigen::Index>(p)) = value.is_null() ? 0.0 : value.get<double>();
    }
    nlohmann::json ranks_json;
    ranks_json["schema_version"] = 1;
    ranks_json["alpha"] = 0.10;
    ranks_json["n_datasets"] = 1;
    if (all_present && cfg.policies.size() >= 2) {
        const RankTable table = rank_policies({cfg.dataset.name}, policy_names, ndcg_values);
        const double cd = critical_difference(static_cast<int>(cfg.policies.size()), 1, 0.10);
        ranks_json["critical_difference"] = cd;
        nlohmann::json avg = nlohmann::json::object();
        for (std::size_t p = 0; p < policy_names.size(); ++p)
            avg[policy_names[p]] = table.average_ranks(static_cast<Eigen::Index>(p));
        ranks_json["average_ranks"] = std::move(avg);
        nlohmann::json significant = nlohmann::json::array();
        for (std::size_t a = 0; a < policy_names.size(); ++a)
            for (std::size_t b = a + 1; b < policy_names.size(); ++b)
                if (std::abs(table.average_ranks(static_cast<Eigen::Index>(a)) -
                             table.average_ranks(static_cast<Eigen::Index>(b))) > cd)
                    significant.push_back({policy_names[a], policy_names[b]});
        ranks_json["significant_pairs"] = std::move(significant);
    } else {
        ranks_json["note"] = "ranks unavailable: missing final metric values";
    }
    atomic_write(cfg.out_dir / "report" / "ranks.json", ranks_json.dump(2) + "\n");

    manifest.record_stage("report", config_hash, inputs,
                          {"report/final_metrics.csv", "report/table_ndcg.csv",
                           "report/table_hyperparameters.csv", "report/table_ope.csv",
                           "report/series.csv", "report/ranks.json"});
    manifest.save();
    return {false, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

}  // namespace linbandit
