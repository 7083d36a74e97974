#pragma once

// Flat key=value experiment configuration: file parsing, command-line
// overrides, defaults, and the canonical resolved-config echo.

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mgt/errors.hpp"
#include "mgt/train.hpp"

namespace mgt {

// Exact f64 round-trip formatting, used for the echo and every CSV cell.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

struct ParsedExperiment {
    ExperimentConfig config;
    std::set<std::string> explicit_keys;  // keys set by file or override
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        unsigned long long out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw ParseError("config key " + key + ": expected a non-negative integer, got '" + v + "'");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (...) {
        throw ParseError("config key " + key + ": expected a number, got '" + v + "'");
    }
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v,
                          T (*one)(const std::string&, const std::string&)) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(one(key, item));
    }
    if (out.empty()) throw ParseError("config key " + key + ": expected a comma-separated list, got '" + v + "'");
    return out;
}

inline uint64_t parse_u64_item(const std::string& k, const std::string& v) { return parse_u64(k, v); }
inline double parse_f64_item(const std::string& k, const std::string& v) { return parse_f64(k, v); }

}  // namespace detail

// Applies one key=value pair onto the config. Unknown keys are a hard error.
inline void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_f64;
    using detail::parse_u64;
    if (key == "model.variant") cfg.model.variant = parse_variant(value);
    else if (key == "model.depth") cfg.model.depth = parse_u64(key, value);
    else if (key == "model.width") cfg.model.width = parse_u64(key, value);
    else if (key == "model.heads") cfg.model.heads = parse_u64(key, value);
    else if (key == "model.ffn_mult") cfg.model.ffn_mult = parse_u64(key, value);
    else if (key == "model.vocab") cfg.model.vocab = parse_u64(key, value);
    else if (key == "model.seq_len") cfg.model.seq_len = parse_u64(key, value);
    else if (key == "model.lambda") cfg.model.lambda = parse_f64(key, value);
    else if (key == "model.epsilon") cfg.model.epsilon = parse_f64(key, value);
    else if (key == "model.alpha_init") cfg.model.alpha_init = parse_f64(key, value);
    else if (key == "task.kind") cfg.task = parse_task(value);
    else if (key == "task.copy_m") cfg.copy_half_len = parse_u64(key, value);
    else if (key == "task.corpus") cfg.corpus_path = value;
    else if (key == "opt.lr") cfg.optimizer.learning_rate = parse_f64(key, value);
    else if (key == "opt.beta1") cfg.optimizer.beta1 = parse_f64(key, value);
    else if (key == "opt.beta2") cfg.optimizer.beta2 = parse_f64(key, value);
    else if (key == "opt.eps") cfg.optimizer.eps = parse_f64(key, value);
    else if (key == "opt.grad_clip") cfg.optimizer.grad_clip = parse_f64(key, value);
    else if (key == "train.batch_size") cfg.batch_size = parse_u64(key, value);
    else if (key == "train.total_steps") cfg.total_steps = parse_u64(key, value);
    else if (key == "train.eval_every") cfg.eval_every = parse_u64(key, value);
    else if (key == "train.eval_batches") cfg.eval_batches = parse_u64(key, value);
    else if (key == "train.early_stop_accuracy") cfg.early_stop_accuracy = parse_f64(key, value);
    else if (key == "train.seeds") cfg.seeds = detail::parse_list<uint64_t>(key, value, detail::parse_u64_item);
    else if (key == "rank.depths") cfg.rank_depths = detail::parse_list<uint64_t>(key, value, detail::parse_u64_item);
    else if (key == "scale.depths") cfg.scale_depths = detail::parse_list<uint64_t>(key, value, detail::parse_u64_item);
    else if (key == "scale.param_budget") cfg.param_budget = parse_u64(key, value);
    else if (key == "scale.loss_target") cfg.scale_loss_target = parse_f64(key, value);
    else if (key == "beta.checkpoints") cfg.beta_checkpoints = detail::parse_list<double>(key, value, detail::parse_f64_item);
    else throw ParseError("unknown config key '" + key + "'");
}

// File (optional) first, then overrides, then validation. Lines are
// `key = value`; '#' starts a comment.
inline ParsedExperiment parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    ParsedExperiment out;
    auto apply_line = [&](const std::string& raw, const std::string& where) {
        std::string line = raw.substr(0, raw.find('#'));
        line = detail::trim(line);
        if (line.empty()) return;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(where + ": expected key=value, got '" + line + "'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        apply_config_key(out.config, key, value);
        out.explicit_keys.insert(key);
    };

    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ParseError("cannot open config file " + path);
        std::string line;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            apply_line(line, path + ":" + std::to_string(lineno));
        }
    }
    for (const std::string& ov : overrides) apply_line(ov, "override '" + ov + "'");
    out.config.validate();
    return out;
}

namespace detail {

template <class T>
std::string join_list(const std::vector<T>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        if constexpr (std::is_floating_point_v<T>)
            os << format_double(v[i]);
        else
            os << v[i];
    }
    return os.str();
}

}  // namespace detail

// Canonical resolved config: every key, sorted, exact float round-trip.
// Feeding these lines back through parse_config reproduces the run.
inline std::string config_echo(const ExperimentConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["model.variant"] = variant_name(cfg.model.variant);
    kv["model.depth"] = std::to_string(cfg.model.depth);
    kv["model.width"] = std::to_string(cfg.model.width);
    kv["model.heads"] = std::to_string(cfg.model.heads);
    kv["model.ffn_mult"] = std::to_string(cfg.model.ffn_mult);
    kv["model.vocab"] = std::to_string(cfg.model.vocab);
    kv["model.seq_len"] = std::to_string(cfg.model.seq_len);
    kv["model.lambda"] = format_double(cfg.model.lambda);
    kv["model.epsilon"] = format_double(cfg.model.epsilon);
    kv["model.alpha_init"] = format_double(cfg.model.alpha_init);
    kv["task.kind"] = task_name(cfg.task);
    kv["task.copy_m"] = std::to_string(cfg.copy_half_len);
    kv["task.corpus"] = cfg.corpus_path;
    kv["opt.lr"] = format_double(cfg.optimizer.learning_rate);
    kv["opt.beta1"] = format_double(cfg.optimizer.beta1);
    kv["opt.beta2"] = format_double(cfg.optimizer.beta2);
    kv["opt.eps"] = format_double(cfg.optimizer.eps);
    kv["opt.grad_clip"] = format_double(cfg.optimizer.grad_clip);
    kv["train.batch_size"] = std::to_string(cfg.batch_size);
    kv["train.total_steps"] = std::to_string(cfg.total_steps);
    kv["train.eval_every"] = std::to_string(cfg.eval_every);
    kv["train.eval_batches"] = std::to_string(cfg.eval_batches);
    kv["train.early_stop_accuracy"] = format_double(cfg.early_stop_accuracy);
    kv["train.seeds"] = detail::join_list(cfg.seeds);
    kv["rank.depths"] = detail::join_list(cfg.rank_depths);
    kv["scale.depths"] = detail::join_list(cfg.scale_depths);
    kv["scale.param_budget"] = std::to_string(cfg.param_budget);
    kv["scale.loss_target"] = format_double(cfg.scale_loss_target);
    kv["beta.checkpoints"] = detail::join_list(cfg.beta_checkpoints);

    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    return os.str();
}

}  // namespace mgt
