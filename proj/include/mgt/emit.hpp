#pragma once

// Result emission: bit-stable CSV files, the JSON summary with per-group
// aggregates, and atomic file writes (temp + rename, never a partial file).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgt/config.hpp"
#include "mgt/errors.hpp"
#include "mgt/train.hpp"

namespace mgt {

// One row of experiment output. (run_id, index, metric) is unique.
struct MetricsRecord {
    std::string run_id;
    std::string experiment;
    std::string variant;
    size_t depth = 0;
    uint64_t seed = 0;
    long index = 0;  // step or layer, depending on the metric
    std::string metric;
    double value = 0.0;
};

// ---------------------------------------------------------------------------
// Atomic file I/O
// ---------------------------------------------------------------------------

inline void atomic_write_file(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out << content;
        if (!out.good()) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
}

// Creates the output directory and proves it is writable before any work.
inline void ensure_writable_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
    fs::path probe = fs::path(dir) / ".write_probe";
    {
        std::ofstream out(probe, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("output directory " + dir + " is not writable");
    }
    fs::remove(probe, ec);
}

// ---------------------------------------------------------------------------
// metrics.csv
// ---------------------------------------------------------------------------

inline std::string metrics_csv_text(const std::vector<MetricsRecord>& records) {
    std::set<std::string> seen;
    std::ostringstream os;
    os << "run_id,experiment,variant,depth,seed,index,metric,value\n";
    for (const MetricsRecord& r : records) {
        if (!std::isfinite(r.value))
            throw InternalConsistencyError("metrics row " + r.run_id + "/" + r.metric + " is not finite");
        std::string key = r.run_id + "\x1f" + std::to_string(r.index) + "\x1f" + r.metric;
        if (!seen.insert(key).second)
            throw InternalConsistencyError("duplicate metrics row: " + r.run_id + " index " +
                                           std::to_string(r.index) + " metric " + r.metric);
        os << r.run_id << ',' << r.experiment << ',' << r.variant << ',' << r.depth << ',' << r.seed << ','
           << r.index << ',' << r.metric << ',' << format_double(r.value) << "\n";
    }
    return os.str();
}

inline void emit_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path) {
    atomic_write_file(path, metrics_csv_text(records));
}

inline std::vector<MetricsRecord> parse_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw IngestionError(path + " is empty");
    if (line != "run_id,experiment,variant,depth,seed,index,metric,value")
        throw IngestionError(path + " has an unexpected header: " + line);
    std::vector<MetricsRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        MetricsRecord r;
        std::getline(ss, r.run_id, ',');
        std::getline(ss, r.experiment, ',');
        std::getline(ss, r.variant, ',');
        std::getline(ss, field, ',');
        r.depth = std::stoull(field);
        std::getline(ss, field, ',');
        r.seed = std::stoull(field);
        std::getline(ss, field, ',');
        r.index = std::stol(field);
        std::getline(ss, r.metric, ',');
        std::getline(ss, field, ',');
        r.value = std::strtod(field.c_str(), nullptr);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// rank.csv / beta.csv
// ---------------------------------------------------------------------------

struct RankRow {
    size_t layer;
    std::string variant;
    size_t depth;
    uint64_t seed;
    double rank_eff;
};

inline std::string rank_csv_text(const std::vector<RankRow>& rows) {
    std::ostringstream os;
    os << "layer,variant,depth,seed,rank_eff\n";
    for (const RankRow& r : rows)
        os << r.layer << ',' << r.variant << ',' << r.depth << ',' << r.seed << ',' << format_double(r.rank_eff)
           << "\n";
    return os.str();
}

struct BetaRow {
    uint64_t seed;
    double checkpoint_pct;
    size_t layer;  // 1-based attention+FFN pair index
    double mean;
    double variance;
    double neg_frac;
};

inline std::string beta_csv_text(const std::vector<BetaRow>& rows) {
    std::ostringstream os;
    os << "seed,checkpoint_pct,layer,beta_mean,beta_var,beta_neg_frac\n";
    for (const BetaRow& r : rows)
        os << r.seed << ',' << format_double(r.checkpoint_pct) << ',' << r.layer << ',' << format_double(r.mean)
           << ',' << format_double(r.variance) << ',' << format_double(r.neg_frac) << "\n";
    return os.str();
}

// Pools per-block beta statistics into per-pair rows (attention and FFN block
// of one depth level merged; both see the same entry count).
inline std::vector<BetaRow> beta_rows_from_stats(uint64_t seed, double pct, const BetaStats& stats) {
    std::vector<BetaRow> rows;
    size_t pairs = stats.mean.size() / 2;
    for (size_t p = 0; p < pairs; ++p) {
        double m1 = stats.mean[2 * p], m2 = stats.mean[2 * p + 1];
        double e2_1 = stats.variance[2 * p] + m1 * m1;
        double e2_2 = stats.variance[2 * p + 1] + m2 * m2;
        BetaRow row;
        row.seed = seed;
        row.checkpoint_pct = pct;
        row.layer = p + 1;
        row.mean = 0.5 * (m1 + m2);
        row.variance = 0.5 * (e2_1 + e2_2) - row.mean * row.mean;
        if (row.variance < 0.0) row.variance = 0.0;
        row.neg_frac = 0.5 * (stats.neg_frac[2 * p] + stats.neg_frac[2 * p + 1]);
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Aggregation and summary.json
// ---------------------------------------------------------------------------

// Mean/std (sample) per (experiment, variant, depth, metric) over the final
// row (max index) of each non-aborted run. A pure function of the records, so
// re-aggregating a parsed metrics.csv reproduces the summary exactly.
inline nlohmann::json aggregate_records(const std::vector<MetricsRecord>& records) {
    std::set<std::string> aborted;
    for (const MetricsRecord& r : records)
        if (r.metric == "aborted" && r.value != 0.0) aborted.insert(r.run_id);

    // (group key, metric) -> run_id -> (index, value), keeping the max index
    std::map<std::string, std::map<std::string, std::map<std::string, std::pair<long, double>>>> latest;
    for (const MetricsRecord& r : records) {
        if (r.metric == "aborted" || aborted.count(r.run_id)) continue;
        std::string group = r.experiment + "|" + r.variant + "|depth" + std::to_string(r.depth);
        auto& slot = latest[group][r.metric];
        auto it = slot.find(r.run_id);
        if (it == slot.end() || r.index > it->second.first) slot[r.run_id] = {r.index, r.value};
    }

    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [group, metrics] : latest) {
        nlohmann::json m = nlohmann::json::object();
        for (const auto& [metric, byrun] : metrics) {
            double mean = 0.0;
            for (const auto& [id, iv] : byrun) mean += iv.second;
            mean /= double(byrun.size());
            double var = 0.0;
            for (const auto& [id, iv] : byrun) var += (iv.second - mean) * (iv.second - mean);
            double stdev = byrun.size() > 1 ? std::sqrt(var / double(byrun.size() - 1)) : 0.0;
            m[metric] = {{"mean", mean}, {"std", stdev}, {"runs", byrun.size()}};
        }
        groups[group] = std::move(m);
    }
    nlohmann::json out;
    out["groups"] = std::move(groups);
    out["aborted_runs"] = aborted.size();
    return out;
}

inline void emit_json(const nlohmann::json& j, const std::string& path) {
    atomic_write_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// RunResult -> records
// ---------------------------------------------------------------------------

inline void append_run_records(std::vector<MetricsRecord>& out, const RunResult& run,
                               const std::string& experiment) {
    MetricsRecord base;
    base.run_id = run.run_id;
    base.experiment = experiment;
    base.variant = variant_name(run.variant);
    base.depth = run.depth;
    base.seed = run.seed;
    for (const EvalRecord& rec : run.records) {
        base.index = long(rec.step);
        base.metric = "train_loss";
        base.value = rec.train_loss;
        out.push_back(base);
        base.metric = "val_loss";
        base.value = rec.val_loss;
        out.push_back(base);
        base.metric = "accuracy";
        base.value = rec.accuracy;
        out.push_back(base);
    }
    if (!run.final_rank.per_layer.empty()) {
        base.index = long(run.steps_completed);
        base.metric = "rank_rho";
        base.value = run.final_rank.preservation_ratio;
        out.push_back(base);
        base.metric = "rank_decay";
        base.value = run.final_rank.decay_rate;
        out.push_back(base);
    }
    if (run.aborted) {
        base.index = long(run.steps_completed);
        base.metric = "aborted";
        base.value = 1.0;
        out.push_back(base);
    }
}

inline void append_rank_rows(std::vector<RankRow>& out, const RunResult& run) {
    for (size_t l = 0; l < run.final_rank.per_layer.size(); ++l)
        out.push_back(RankRow{l, variant_name(run.variant), run.depth, run.seed, run.final_rank.per_layer[l]});
}

}  // namespace mgt
