#pragma once

// Deterministic training runs and the four experiment protocols: rank scan,
// ablation, beta-gate analysis, and parameter-matched depth scaling.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mgt/data.hpp"
#include "mgt/errors.hpp"
#include "mgt/metrics.hpp"
#include "mgt/model.hpp"
#include "mgt/optim.hpp"
#include "mgt/rng.hpp"
#include "mgt/tensor.hpp"

namespace mgt {

enum class TaskKind { copy, char_lm };

inline const char* task_name(TaskKind t) { return t == TaskKind::copy ? "copy" : "char_lm"; }

inline TaskKind parse_task(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "char_lm") return TaskKind::char_lm;
    throw ParseError("unknown task '" + s + "' (expected copy|char_lm)");
}

struct ExperimentConfig {
    ModelConfig model;
    TaskKind task = TaskKind::copy;
    size_t copy_half_len = 8;  // m; copy sequences have length 2m+1
    std::string corpus_path;   // char_lm only
    AdamConfig optimizer;
    size_t batch_size = 16;
    size_t total_steps = 1500;
    size_t eval_every = 100;
    size_t eval_batches = 4;
    double early_stop_accuracy = -1.0;  // disabled unless in (0, 1]
    std::vector<uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "out";
    // experiment-specific knobs
    std::vector<size_t> rank_depths = {4, 8, 16, 24};
    std::vector<size_t> scale_depths = {4, 8, 16};
    size_t param_budget = 500000;
    double scale_loss_target = 0.5;  // pilot-derived; provenance labeled in output
    std::vector<double> beta_checkpoints = {0.0, 25.0, 50.0, 100.0};  // percent of total_steps

    void validate() const {
        model.validate();
        if (seeds.empty()) throw InvalidConfigError("train.seeds must not be empty");
        if (eval_every < 1) throw InvalidConfigError("train.eval_every must be >= 1");
        if (total_steps > 0 && eval_every > total_steps)
            throw InvalidConfigError("train.eval_every exceeds train.total_steps");
        if (batch_size < 1) throw InvalidConfigError("train.batch_size must be >= 1");
        if (eval_batches < 1) throw InvalidConfigError("train.eval_batches must be >= 1");
        if (task == TaskKind::copy) {
            if (model.vocab < 3) throw InvalidConfigError("copy task needs model.vocab >= 3");
            if (2 * copy_half_len + 1 != model.seq_len)
                throw InvalidConfigError("copy task needs model.seq_len == 2*task.copy_m+1 (= " +
                                         std::to_string(2 * copy_half_len + 1) + ")");
        } else if (corpus_path.empty()) {
            throw InvalidConfigError("char_lm task needs task.corpus");
        }
    }
};

struct EvalRecord {
    size_t step;
    double train_loss;
    double val_loss;
    double accuracy;
};

struct BetaSnapshot {
    size_t step;
    double pct;  // checkpoint position in percent of total_steps
    BetaStats stats;
};

struct RunResult {
    uint64_t config_hash = 0;  // includes the seed; unique per run
    std::string run_id;        // hex of config_hash
    uint64_t seed = 0;
    Variant variant = Variant::standard;
    size_t depth = 0;
    size_t width = 0;
    std::vector<EvalRecord> records;
    RankProfile final_rank;       // empty per_layer for depth-0 models
    BetaStats final_beta;         // empty unless the variant carries DDL
    std::vector<BetaSnapshot> beta_snapshots;
    uint64_t batch_digest = 0;    // rolling FNV over (step, token ids)
    size_t steps_completed = 0;
    bool early_stopped = false;
    bool aborted = false;
    std::string abort_reason;
    double wall_seconds = 0.0;    // informational; never serialized to CSV
};

// First `rows` rows of a 2-d tensor, with pass-through gradient. Used to drop
// the final position (which has no next-token target) before the loss.
inline Tensor slice_rows_head(const Tensor& x, size_t rows) {
    if (x.rank() != 2) throw DimensionError("slice_rows_head: expected 2-d tensor");
    size_t n = x.shape()[1];
    if (rows > x.shape()[0]) throw DimensionError("slice_rows_head: row count out of range");
    if (rows == x.shape()[0]) return x;
    std::vector<double> out(x.ptr(), x.ptr() + rows * n);
    Tensor result({rows, n}, std::move(out));
    if (!x.on_tape()) return result;
    int xn = x.node_id();
    return x.tape()->record(result, [xn, rows, n](GradTape& tp, const std::vector<double>& g) {
        std::vector<double>& buf = tp.grad_buffer(xn);
        for (size_t i = 0; i < rows * n; ++i) buf[i] += g[i];
    });
}

namespace detail {

constexpr uint64_t kTrainStream = 0x7472;
constexpr uint64_t kEvalStream = 0x6576;
constexpr uint64_t kProbeStream = 0x7072;

// A batch in model-ready form: sequences plus the prediction-position mask.
struct TokenBatch {
    std::vector<std::vector<int>> sequences;
    std::vector<bool> token_mask;  // over token positions; prediction row i uses token_mask[i+1]
};

struct TaskData {
    TaskKind kind;
    size_t vocab;
    size_t seq_len;
    size_t copy_half_len;
    const CharCorpus* corpus;  // char_lm only
};

inline TokenBatch make_batch(const TaskData& task, size_t batch, uint64_t seed) {
    TokenBatch out;
    if (task.kind == TaskKind::copy) {
        CopyBatch cb = gen_copy_batch(task.vocab, task.copy_half_len, batch, seed);
        out.sequences = std::move(cb.sequences);
        out.token_mask = std::move(cb.mask);
    } else {
        out.sequences = sample_windows(task.corpus->train_ids, task.seq_len, batch, seed);
        out.token_mask.assign(task.seq_len, true);
    }
    return out;
}

inline TokenBatch make_eval_batch(const TaskData& task, size_t batch, uint64_t seed) {
    TokenBatch out;
    if (task.kind == TaskKind::copy) {
        CopyBatch cb = gen_copy_batch(task.vocab, task.copy_half_len, batch, seed);
        out.sequences = std::move(cb.sequences);
        out.token_mask = std::move(cb.mask);
    } else {
        out.sequences = sample_windows(task.corpus->val_ids, task.seq_len, batch, seed);
        out.token_mask.assign(task.seq_len, true);
    }
    return out;
}

// Next-token targets/mask for one sequence: prediction row i targets
// token[i+1]; the final row has no target.
inline void targets_for(const std::vector<int>& seq, const std::vector<bool>& token_mask,
                        std::vector<int>& targets, std::vector<bool>& mask) {
    size_t n = seq.size() - 1;
    targets.resize(n);
    mask.resize(n);
    for (size_t i = 0; i < n; ++i) {
        targets[i] = seq[i + 1];
        mask[i] = token_mask[i + 1];
    }
}

inline uint64_t digest_batch(uint64_t digest, size_t step, const TokenBatch& batch) {
    digest = fnv1a(&step, sizeof(step), digest);
    for (const auto& seq : batch.sequences) digest = fnv1a(seq.data(), seq.size() * sizeof(int), digest);
    return digest;
}

// Mean loss over a batch, on-tape when params are bound.
inline Tensor batch_loss(const ModelParams& params, const TokenBatch& batch) {
    Tensor total;
    std::vector<int> targets;
    std::vector<bool> mask;
    bool first = true;
    for (const auto& seq : batch.sequences) {
        auto [logits, trace] = forward_model(seq, params);
        targets_for(seq, batch.token_mask, targets, mask);
        Tensor row_loss = softmax_cross_entropy(slice_rows_head(logits, seq.size() - 1), targets, mask);
        total = first ? row_loss : add(total, row_loss);
        first = false;
    }
    return scale(total, 1.0 / double(batch.sequences.size()));
}

// Loss and argmax accuracy without tape participation.
inline std::pair<double, double> eval_batch(const ModelParams& params, const TokenBatch& batch) {
    double loss = 0.0, acc = 0.0;
    std::vector<int> targets;
    std::vector<bool> mask;
    for (const auto& seq : batch.sequences) {
        auto [logits, trace] = forward_model(seq, params);
        targets_for(seq, batch.token_mask, targets, mask);
        Tensor head = slice_rows_head(logits, seq.size() - 1);
        loss += softmax_cross_entropy(head, targets, mask).item();
        acc += copy_accuracy(head, targets, mask);
    }
    return {loss / double(batch.sequences.size()), acc / double(batch.sequences.size())};
}

inline std::vector<ModelTrace> probe_traces(const ModelParams& params, const TokenBatch& batch) {
    std::vector<ModelTrace> traces;
    traces.reserve(batch.sequences.size());
    for (const auto& seq : batch.sequences) {
        auto [logits, trace] = forward_model(seq, params);
        traces.push_back(std::move(trace));
    }
    return traces;
}

inline std::string canonical_run_string(const ExperimentConfig& cfg, uint64_t seed) {
    std::ostringstream os;
    os << "variant=" << variant_name(cfg.model.variant) << ";depth=" << cfg.model.depth
       << ";width=" << cfg.model.width << ";heads=" << cfg.model.heads << ";ffn=" << cfg.model.ffn_mult
       << ";vocab=" << cfg.model.vocab << ";seq=" << cfg.model.seq_len << ";lambda=" << cfg.model.lambda
       << ";epsilon=" << cfg.model.epsilon << ";alpha=" << cfg.model.alpha_init << ";task=" << task_name(cfg.task)
       << ";m=" << cfg.copy_half_len << ";corpus=" << cfg.corpus_path << ";lr=" << cfg.optimizer.learning_rate
       << ";b1=" << cfg.optimizer.beta1 << ";b2=" << cfg.optimizer.beta2 << ";eps=" << cfg.optimizer.eps
       << ";clip=" << cfg.optimizer.grad_clip << ";batch=" << cfg.batch_size << ";steps=" << cfg.total_steps
       << ";eval=" << cfg.eval_every << ";evalb=" << cfg.eval_batches << ";seed=" << seed;
    return os.str();
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
    return std::string(buf);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single training run
// ---------------------------------------------------------------------------

// Fully deterministic per (config, seed): batches depend only on (seed, step),
// so runs differing only in model variant see identical data streams. Trace
// capture for the final metrics uses a probe batch pinned to seed 0.
inline RunResult train_run(const ExperimentConfig& cfg, uint64_t seed,
                           const std::vector<size_t>& beta_snapshot_steps = {}) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    CharCorpus corpus;
    detail::TaskData task{cfg.task, cfg.model.vocab, cfg.model.seq_len, cfg.copy_half_len, nullptr};
    ModelConfig mc = cfg.model;
    if (cfg.task == TaskKind::char_lm) {
        corpus = load_char_corpus(cfg.corpus_path);
        mc.vocab = corpus.vocab_size;
        task.vocab = corpus.vocab_size;
        task.corpus = &corpus;
    }
    mc.seed = seed;

    RunResult result;
    result.config_hash = fnv1a(detail::canonical_run_string(cfg, seed).data(),
                               detail::canonical_run_string(cfg, seed).size());
    result.run_id = detail::hex64(result.config_hash);
    result.seed = seed;
    result.variant = mc.variant;
    result.depth = mc.depth;
    result.width = mc.width;

    ModelParams params = init_params(mc);
    AdamState opt_state;

    detail::TokenBatch probe = detail::make_eval_batch(task, cfg.batch_size, mix_seed(0, 0, detail::kProbeStream));
    std::vector<detail::TokenBatch> eval_set;
    eval_set.reserve(cfg.eval_batches);
    for (size_t b = 0; b < cfg.eval_batches; ++b)
        eval_set.push_back(detail::make_eval_batch(task, cfg.batch_size, mix_seed(seed, b, detail::kEvalStream)));

    auto evaluate = [&]() {
        double loss = 0.0, acc = 0.0;
        for (const auto& batch : eval_set) {
            auto [l, a] = detail::eval_batch(params, batch);
            loss += l;
            acc += a;
        }
        return std::pair<double, double>{loss / double(eval_set.size()), acc / double(eval_set.size())};
    };

    auto capture_beta = [&](size_t step) {
        if (!variant_has_ddl(mc.variant) || params.blocks.empty()) return;
        std::vector<ModelTrace> traces = detail::probe_traces(params, probe);
        double pct = cfg.total_steps == 0 ? 0.0 : 100.0 * double(step) / double(cfg.total_steps);
        result.beta_snapshots.push_back(BetaSnapshot{step, pct, beta_stats(traces)});
    };

    try {
        // step-0 record: train loss is the untouched loss on the first batch
        detail::TokenBatch first_batch = detail::make_batch(task, cfg.batch_size, mix_seed(seed, 1, detail::kTrainStream));
        double train_probe_loss = detail::batch_loss(params, first_batch).item();
        auto [v0, a0] = evaluate();
        result.records.push_back({0, train_probe_loss, v0, a0});

        if (std::find(beta_snapshot_steps.begin(), beta_snapshot_steps.end(), size_t(0)) != beta_snapshot_steps.end())
            capture_beta(0);

        double window_loss = 0.0;
        size_t window_count = 0;
        for (size_t step = 1; step <= cfg.total_steps; ++step) {
            detail::TokenBatch batch = detail::make_batch(task, cfg.batch_size, mix_seed(seed, step, detail::kTrainStream));
            result.batch_digest = detail::digest_batch(result.batch_digest, step, batch);

            GradTape tape;
            ModelParams bound = bind_to_tape(params, tape);
            Tensor loss = detail::batch_loss(bound, batch);
            tape.backward(loss);
            std::map<std::string, Tensor> grads;
            for_each_param(bound, [&](const std::string& name, Tensor& t) { grads.emplace(name, tape.grad(t)); });
            adam_step(params, grads, opt_state, cfg.optimizer);

            window_loss += loss.item();
            ++window_count;
            result.steps_completed = step;

            bool eval_point = (step % cfg.eval_every == 0) || step == cfg.total_steps;
            if (eval_point) {
                auto [vl, va] = evaluate();
                result.records.push_back({step, window_loss / double(window_count), vl, va});
                window_loss = 0.0;
                window_count = 0;
                if (cfg.early_stop_accuracy > 0.0 && va >= cfg.early_stop_accuracy) {
                    result.early_stopped = true;
                    break;
                }
            }
            for (size_t snap : beta_snapshot_steps)
                if (snap == step) capture_beta(step);
        }

        // final metrics on the probe batch
        if (!params.blocks.empty()) {
            std::vector<ModelTrace> traces = detail::probe_traces(params, probe);
            result.final_rank = rank_profile(traces);
            if (variant_has_ddl(mc.variant)) result.final_beta = beta_stats(traces);
        }
    } catch (const InstabilityError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
    } catch (const NumericalError& e) {
        // non-finite values outside a block (loss, optimizer maths)
        result.aborted = true;
        result.abort_reason = e.what();
    }

    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

// Runs tasks on up to `workers` threads (capped by MGT_WORKERS when set).
// Results land in caller-owned slots, so completion order never matters.
inline void run_parallel(std::vector<std::function<void()>> tasks, size_t workers = 0) {
    if (workers == 0) {
        workers = std::thread::hardware_concurrency();
        if (const char* env = std::getenv("MGT_WORKERS")) {
            long cap = std::strtol(env, nullptr, 10);
            if (cap >= 1) workers = size_t(cap);
        }
    }
    workers = std::max<size_t>(1, std::min(workers, tasks.size()));
    if (workers == 1) {
        for (auto& t : tasks) t();
        return;
    }
    std::vector<std::exception_ptr> errors(tasks.size());
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            try {
                tasks[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Experiment protocols
// ---------------------------------------------------------------------------

struct RankExperimentResult {
    std::vector<RunResult> runs;  // variant-major, depth-minor, seed-innermost
    size_t max_depth = 0;
    double rho_mgt_mean = 0.0;
    double rho_standard_mean = 0.0;
    bool directional_ok = false;  // rho(MGT) >= rho(Standard) at max depth
};

// Trains standard and mgt_full at every rank_depths entry across all seeds
// and checks the directional hypothesis at the deepest setting.
inline RankExperimentResult run_rank_experiment(const ExperimentConfig& base) {
    RankExperimentResult out;
    out.max_depth = *std::max_element(base.rank_depths.begin(), base.rank_depths.end());

    struct Job {
        Variant variant;
        size_t depth;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (Variant v : {Variant::standard, Variant::mgt_full})
        for (size_t depth : base.rank_depths)
            for (uint64_t seed : base.seeds) jobs.push_back({v, depth, seed});

    out.runs.resize(jobs.size());
    std::vector<std::function<void()>> tasks;
    for (size_t i = 0; i < jobs.size(); ++i) {
        tasks.push_back([&, i]() {
            ExperimentConfig cfg = base;
            cfg.model.variant = jobs[i].variant;
            cfg.model.depth = jobs[i].depth;
            out.runs[i] = train_run(cfg, jobs[i].seed);
        });
    }
    run_parallel(std::move(tasks));

    double rho_mgt = 0.0, rho_std = 0.0;
    size_t n_mgt = 0, n_std = 0;
    for (const RunResult& r : out.runs) {
        if (r.aborted || r.depth != out.max_depth) continue;
        if (r.variant == Variant::mgt_full) {
            rho_mgt += r.final_rank.preservation_ratio;
            ++n_mgt;
        } else if (r.variant == Variant::standard) {
            rho_std += r.final_rank.preservation_ratio;
            ++n_std;
        }
    }
    if (n_mgt > 0) out.rho_mgt_mean = rho_mgt / double(n_mgt);
    if (n_std > 0) out.rho_standard_mean = rho_std / double(n_std);
    out.directional_ok = n_mgt > 0 && n_std > 0 && out.rho_mgt_mean >= out.rho_standard_mean;
    return out;
}

struct AblationResult {
    std::vector<RunResult> runs;  // variant-major, seed-minor
    double mean_loss[4] = {0, 0, 0, 0};  // indexed by Variant order
    double synergy = 0.0;
    bool paired = false;  // identical batch digests across variants per seed
};

// Four variants, identical seeds and hyperparameters. The synergy coefficient
// is computed on seed-mean final validation losses.
inline AblationResult run_ablation(const ExperimentConfig& base) {
    const Variant order[4] = {Variant::standard, Variant::mhc_only, Variant::ddl_only, Variant::mgt_full};
    AblationResult out;
    out.runs.resize(4 * base.seeds.size());
    std::vector<std::function<void()>> tasks;
    for (size_t v = 0; v < 4; ++v)
        for (size_t s = 0; s < base.seeds.size(); ++s) {
            size_t slot = v * base.seeds.size() + s;
            tasks.push_back([&, v, s, slot]() {
                ExperimentConfig cfg = base;
                cfg.model.variant = order[v];
                out.runs[slot] = train_run(cfg, base.seeds[s]);
            });
        }
    run_parallel(std::move(tasks));

    out.paired = true;
    for (size_t s = 0; s < base.seeds.size(); ++s) {
        uint64_t reference = out.runs[s].batch_digest;
        for (size_t v = 1; v < 4; ++v)
            if (out.runs[v * base.seeds.size() + s].batch_digest != reference) out.paired = false;
    }

    for (size_t v = 0; v < 4; ++v) {
        double sum = 0.0;
        size_t n = 0;
        for (size_t s = 0; s < base.seeds.size(); ++s) {
            const RunResult& r = out.runs[v * base.seeds.size() + s];
            if (r.aborted) continue;
            sum += r.records.back().val_loss;
            ++n;
        }
        if (n == 0) throw InstabilityError("ablation: every seed aborted for variant " +
                                           std::string(variant_name(order[v])));
        out.mean_loss[v] = sum / double(n);
    }
    out.synergy = synergy_coefficient(out.mean_loss[0], out.mean_loss[1], out.mean_loss[2], out.mean_loss[3]);
    return out;
}

struct BetaAnalysisResult {
    std::vector<RunResult> runs;  // one per seed
    std::vector<size_t> snapshot_steps;
};

// Deep mgt_full run with beta statistics captured at fixed checkpoints.
inline BetaAnalysisResult run_beta_analysis(const ExperimentConfig& base) {
    ExperimentConfig cfg = base;
    cfg.model.variant = Variant::mgt_full;
    BetaAnalysisResult out;
    for (double pct : cfg.beta_checkpoints) {
        size_t step = size_t(std::llround(pct / 100.0 * double(cfg.total_steps)));
        out.snapshot_steps.push_back(std::min(step, cfg.total_steps));
    }
    std::sort(out.snapshot_steps.begin(), out.snapshot_steps.end());
    out.snapshot_steps.erase(std::unique(out.snapshot_steps.begin(), out.snapshot_steps.end()),
                             out.snapshot_steps.end());

    out.runs.resize(cfg.seeds.size());
    std::vector<std::function<void()>> tasks;
    for (size_t s = 0; s < cfg.seeds.size(); ++s)
        tasks.push_back([&, s]() { out.runs[s] = train_run(cfg, cfg.seeds[s], out.snapshot_steps); });
    run_parallel(std::move(tasks));
    return out;
}

struct DepthScaleRow {
    Variant variant;
    size_t depth;
    size_t width;
    size_t params;
    double mean_final_loss;
    double loss_variance;     // sample variance across seeds
    double mean_steps_to_target;  // -1 when never reached
};

struct DepthScalingResult {
    std::vector<RunResult> runs;
    std::vector<DepthScaleRow> rows;
    double loss_target;
};

// Smallest-deviation width (multiple of the head count) whose parameter count
// lands within 10% of the budget.
inline size_t solve_width_for_budget(const ModelConfig& base, size_t depth, Variant variant, size_t budget) {
    ModelConfig probe = base;
    probe.depth = depth;
    probe.variant = variant;
    size_t best_width = 0;
    size_t best_dev = size_t(-1);
    for (size_t w = probe.heads; w <= 4096; w += probe.heads) {
        probe.width = w;
        size_t count = param_count(probe);
        size_t dev = count > budget ? count - budget : budget - count;
        if (dev < best_dev) {
            best_dev = dev;
            best_width = w;
        }
        if (count > 2 * budget) break;
    }
    if (best_width < probe.heads || double(best_dev) > 0.10 * double(budget))
        throw InvalidConfigError("depth-scale: no feasible width for depth " + std::to_string(depth) +
                                 " within 10% of budget " + std::to_string(budget));
    return best_width;
}

// Parameter-matched depth sweep for standard and mgt_full.
inline DepthScalingResult run_depth_scaling(const ExperimentConfig& base) {
    DepthScalingResult out;
    out.loss_target = base.scale_loss_target;

    struct Job {
        Variant variant;
        size_t depth;
        size_t width;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (Variant v : {Variant::standard, Variant::mgt_full})
        for (size_t depth : base.scale_depths) {
            size_t width = solve_width_for_budget(base.model, depth, v, base.param_budget);
            for (uint64_t seed : base.seeds) jobs.push_back({v, depth, width, seed});
        }

    out.runs.resize(jobs.size());
    std::vector<std::function<void()>> tasks;
    for (size_t i = 0; i < jobs.size(); ++i) {
        tasks.push_back([&, i]() {
            ExperimentConfig cfg = base;
            cfg.model.variant = jobs[i].variant;
            cfg.model.depth = jobs[i].depth;
            cfg.model.width = jobs[i].width;
            out.runs[i] = train_run(cfg, jobs[i].seed);
        });
    }
    run_parallel(std::move(tasks));

    size_t seeds = base.seeds.size();
    for (size_t g = 0; g < jobs.size(); g += seeds) {
        DepthScaleRow row;
        row.variant = jobs[g].variant;
        row.depth = jobs[g].depth;
        row.width = jobs[g].width;
        ModelConfig probe = base.model;
        probe.variant = row.variant;
        probe.depth = row.depth;
        probe.width = row.width;
        row.params = param_count(probe);

        std::vector<double> finals;
        std::vector<double> to_target;
        for (size_t s = 0; s < seeds; ++s) {
            const RunResult& r = out.runs[g + s];
            if (r.aborted) continue;
            finals.push_back(r.records.back().val_loss);
            double reached = -1.0;
            for (const EvalRecord& rec : r.records)
                if (rec.val_loss <= out.loss_target) {
                    reached = double(rec.step);
                    break;
                }
            to_target.push_back(reached);
        }
        if (finals.empty()) throw InstabilityError("depth-scale: every seed aborted at depth " +
                                                   std::to_string(row.depth));
        double mean = 0.0;
        for (double v : finals) mean += v;
        mean /= double(finals.size());
        double var = 0.0;
        for (double v : finals) var += (v - mean) * (v - mean);
        var = finals.size() > 1 ? var / double(finals.size() - 1) : 0.0;
        row.mean_final_loss = mean;
        row.loss_variance = var;
        double mt = 0.0;
        bool all_reached = true;
        for (double v : to_target) {
            if (v < 0) all_reached = false;
            mt += v;
        }
        row.mean_steps_to_target = all_reached ? mt / double(to_target.size()) : -1.0;
        out.rows.push_back(row);
    }
    return out;
}

}  // namespace mgt
