#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "mgt/train.hpp"

using namespace mgt;

namespace {

ExperimentConfig tiny_config(Variant v = Variant::mgt_full) {
    ExperimentConfig cfg;
    cfg.model.depth = 1;
    cfg.model.width = 8;
    cfg.model.heads = 2;
    cfg.model.ffn_mult = 2;
    cfg.model.vocab = 7;
    cfg.model.seq_len = 5;
    cfg.model.variant = v;
    cfg.copy_half_len = 2;
    cfg.batch_size = 3;
    cfg.total_steps = 4;
    cfg.eval_every = 2;
    cfg.eval_batches = 2;
    cfg.seeds = {1};
    return cfg;
}

std::string write_temp_corpus(const std::string& name, const std::string& unit, size_t repeats) {
    std::string path = name;
    std::ofstream out(path, std::ios::binary);
    for (size_t i = 0; i < repeats; ++i) out << unit;
    return path;
}

}  // namespace

TEST_CASE("gen_copy_batch construction and determinism") {
    CopyBatch b = gen_copy_batch(16, 3, 4, 99);
    REQUIRE(b.sequences.size() == 4);
    REQUIRE(b.mask.size() == 7);
    for (const auto& seq : b.sequences) {
        REQUIRE(seq.size() == 7);
        CHECK(seq[3] == 15);  // separator is vocab-1
        for (size_t i = 0; i < 3; ++i) {
            CHECK(seq[i] == seq[4 + i]);
            CHECK(seq[i] >= 0);
            CHECK(seq[i] <= 14);
        }
    }
    for (size_t i = 0; i < 4; ++i) CHECK(b.mask[i] == false);
    for (size_t i = 4; i < 7; ++i) CHECK(b.mask[i] == true);

    CopyBatch again = gen_copy_batch(16, 3, 4, 99);
    for (size_t s = 0; s < 4; ++s) CHECK(again.sequences[s] == b.sequences[s]);
    CopyBatch other = gen_copy_batch(16, 3, 4, 100);
    bool any_diff = false;
    for (size_t s = 0; s < 4; ++s) any_diff |= (other.sequences[s] != b.sequences[s]);
    CHECK(any_diff);

    CHECK_THROWS_AS(gen_copy_batch(2, 3, 1, 0), InvalidConfigError);
}

TEST_CASE("copy symbol distribution is uniform (chi-square at 1e4 samples)") {
    size_t V = 16, m = 5;
    std::vector<size_t> counts(V - 1, 0);
    size_t samples = 0;
    for (uint64_t seed = 0; samples < 10000; ++seed) {
        CopyBatch b = gen_copy_batch(V, m, 16, seed);
        for (const auto& seq : b.sequences)
            for (size_t i = 0; i < m; ++i) {
                ++counts[size_t(seq[i])];
                ++samples;
            }
    }
    double expect = double(samples) / double(V - 1);
    double chi2 = 0.0;
    for (size_t c : counts) chi2 += (double(c) - expect) * (double(c) - expect) / expect;
    // 14 degrees of freedom; 36.12 is the 0.999 quantile
    CHECK(chi2 < 36.12);
}

TEST_CASE("char corpus ingestion") {
    std::string path = write_temp_corpus("corpus_ab.txt", "ab", 6000);
    CharCorpus c = load_char_corpus(path);
    CHECK(c.vocab_size == 3);  // a, b, unknown
    CHECK(c.train_ids.size() + c.val_ids.size() == 12000);
    CHECK(c.train_ids.size() == 10800);

    // ids round-trip to text
    std::vector<int> head(c.train_ids.begin(), c.train_ids.begin() + 4);
    CHECK(c.decode(head) == "abab");

    CharCorpus c2 = load_char_corpus(path);
    CHECK(c2.train_ids == c.train_ids);
    CHECK(c2.val_ids == c.val_ids);
    std::remove(path.c_str());

    std::string small = write_temp_corpus("corpus_small.txt", "ab", 10);
    CHECK_THROWS_AS(load_char_corpus(small), IngestionError);
    std::remove(small.c_str());
    CHECK_THROWS_AS(load_char_corpus("no_such_file.txt"), IngestionError);
}

TEST_CASE("unseen validation bytes map to the unknown id") {
    // 'z' appears only in the last 10% of the file
    std::string path = "corpus_unk.txt";
    {
        std::ofstream out(path, std::ios::binary);
        for (size_t i = 0; i < 11000; ++i) out << 'a';
        for (size_t i = 0; i < 1000; ++i) out << 'z';
    }
    CharCorpus c = load_char_corpus(path);
    CHECK(c.vocab_size == 2);  // a + unknown
    bool saw_unk = false;
    for (int id : c.val_ids) saw_unk |= (id == c.unk_id);
    CHECK(saw_unk);
    std::remove(path.c_str());
}

TEST_CASE("adam single-parameter recurrence") {
    AdamConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.grad_clip = 0.0;
    std::vector<double> p = {0.0}, m, v;
    adam_update(p, {1.0}, m, v, 1, cfg);
    CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));  // mhat/sqrt(vhat) = 1 up to eps

    // zero gradient leaves parameters and moments untouched
    std::vector<double> q = {0.7}, m2, v2;
    adam_update(q, {0.0}, m2, v2, 1, cfg);
    CHECK(q[0] == 0.7);
    CHECK(m2[0] == 0.0);
    CHECK(v2[0] == 0.0);
}

TEST_CASE("adam_step applies global-norm clipping and rejects NaN") {
    ModelConfig mc;
    mc.depth = 0;
    mc.width = 4;
    mc.heads = 2;
    mc.vocab = 5;
    mc.seq_len = 3;
    ModelParams params = init_params(mc);

    // gradient of norm 10 on a single parameter, clip 1 -> effective scale 0.1
    std::map<std::string, Tensor> grads;
    std::vector<double> g(params.tok_embed.size(), 0.0);
    g[0] = 10.0;
    grads.emplace("embed.token", Tensor(params.tok_embed.shape(), std::move(g)));
    CHECK(global_grad_norm(grads) == doctest::Approx(10.0).epsilon(1e-12));

    AdamConfig cfg;
    cfg.grad_clip = 1.0;
    AdamState state;
    double before = params.tok_embed.at(0);
    adam_step(params, grads, state, cfg);
    // clipped gradient is 1.0; first Adam step is then ~ -lr
    CHECK(params.tok_embed.at(0) == doctest::Approx(before - cfg.learning_rate).epsilon(1e-6));

    std::map<std::string, Tensor> bad;
    bad.emplace("embed.token", Tensor({1}, {std::nan("")}));
    CHECK_THROWS_AS(adam_step(params, bad, state, cfg), InstabilityError);
}

TEST_CASE("train_run with zero steps emits only the step-0 record") {
    ExperimentConfig cfg = tiny_config();
    cfg.total_steps = 0;
    RunResult r = train_run(cfg, 1);
    REQUIRE(r.records.size() == 1);
    CHECK(r.records[0].step == 0);
    CHECK(std::isfinite(r.records[0].val_loss));
    CHECK_FALSE(r.aborted);
}

TEST_CASE("identity at init: step-0 val loss equals the depth-0 model") {
    ExperimentConfig deep = tiny_config(Variant::mgt_full);
    deep.model.depth = 3;
    deep.total_steps = 0;
    ExperimentConfig shallow = deep;
    shallow.model.depth = 0;
    RunResult rd = train_run(deep, 7);
    RunResult rs = train_run(shallow, 7);
    CHECK(std::fabs(rd.records[0].val_loss - rs.records[0].val_loss) < 1e-9);
}

TEST_CASE("train_run is bit-deterministic and batches pair across variants") {
    ExperimentConfig cfg = tiny_config(Variant::mgt_full);
    RunResult a = train_run(cfg, 3);
    RunResult b = train_run(cfg, 3);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].step == b.records[i].step);
        CHECK(a.records[i].train_loss == b.records[i].train_loss);
        CHECK(a.records[i].val_loss == b.records[i].val_loss);
        CHECK(a.records[i].accuracy == b.records[i].accuracy);
    }
    CHECK(a.batch_digest == b.batch_digest);

    ExperimentConfig other = tiny_config(Variant::standard);
    RunResult c = train_run(other, 3);
    CHECK(c.batch_digest == a.batch_digest);  // same seed, same data stream
    RunResult d = train_run(other, 4);
    CHECK(d.batch_digest != a.batch_digest);

    // records strictly increasing in step, all values finite
    size_t prev = 0;
    for (size_t i = 1; i < a.records.size(); ++i) {
        CHECK(a.records[i].step > prev);
        prev = a.records[i].step;
        CHECK(std::isfinite(a.records[i].train_loss));
        CHECK(std::isfinite(a.records[i].val_loss));
        CHECK(std::isfinite(a.records[i].accuracy));
    }
}

TEST_CASE("train_run captures rank profile and beta stats") {
    ExperimentConfig cfg = tiny_config(Variant::mgt_full);
    cfg.model.depth = 2;
    RunResult r = train_run(cfg, 5);
    REQUIRE(r.final_rank.per_layer.size() == 5);  // embedding + 4 blocks
    for (double v : r.final_rank.per_layer) {
        CHECK(v > 0.0);
        CHECK(v <= 1.0 + 1e-12);
    }
    REQUIRE(r.final_beta.mean.size() == 4);
    for (size_t l = 0; l < 4; ++l) {
        CHECK(r.final_beta.neg_frac[l] >= 0.0);
        CHECK(r.final_beta.neg_frac[l] <= 1.0);
        // range contract: |beta| < lambda + |epsilon|
        CHECK(std::fabs(r.final_beta.mean[l]) < cfg.model.lambda + std::fabs(cfg.model.epsilon));
    }

    RunResult rs = train_run(tiny_config(Variant::standard), 5);
    CHECK(rs.final_beta.mean.empty());
}

TEST_CASE("short copy-task training reduces the loss") {
    ExperimentConfig cfg = tiny_config(Variant::mgt_full);
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.batch_size = 8;
    cfg.total_steps = 60;
    cfg.eval_every = 30;
    RunResult r = train_run(cfg, 11);
    REQUIRE_FALSE(r.aborted);
    CHECK(r.records.back().val_loss < r.records.front().val_loss);
}

TEST_CASE("char_lm training round trip on a tiny synthetic corpus") {
    std::string path = write_temp_corpus("corpus_lm.txt", "the quick brown fox. ", 700);
    ExperimentConfig cfg = tiny_config(Variant::mgt_full);
    cfg.task = TaskKind::char_lm;
    cfg.corpus_path = path;
    cfg.model.seq_len = 8;
    cfg.total_steps = 6;
    cfg.eval_every = 3;
    RunResult r = train_run(cfg, 2);
    REQUIRE_FALSE(r.aborted);
    CHECK(r.records.size() >= 3);
    CHECK(r.records.back().val_loss < 4.0);  // log(vocab) is ~2.9, sanity only
    std::remove(path.c_str());
}

TEST_CASE("ablation bookkeeping: pairing, distinct hashes, synergy recompute") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1, 2};
    cfg.total_steps = 3;
    cfg.eval_every = 3;
    AblationResult res = run_ablation(cfg);
    REQUIRE(res.runs.size() == 8);  // 4 variants x 2 seeds
    CHECK(res.paired);

    std::set<uint64_t> hashes;
    for (const RunResult& r : res.runs) {
        CHECK_FALSE(r.aborted);
        hashes.insert(r.config_hash);
    }
    CHECK(hashes.size() == 8);

    double recomputed = synergy_coefficient(res.mean_loss[0], res.mean_loss[1], res.mean_loss[2], res.mean_loss[3]);
    CHECK(res.synergy == recomputed);
}

TEST_CASE("rank experiment covers the variant x depth x seed grid") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1, 2};
    cfg.rank_depths = {1, 2};
    cfg.total_steps = 2;
    cfg.eval_every = 2;
    RankExperimentResult res = run_rank_experiment(cfg);
    REQUIRE(res.runs.size() == 8);  // 2 variants x 2 depths x 2 seeds
    CHECK(res.max_depth == 2);
    for (const RunResult& r : res.runs)
        CHECK(r.final_rank.per_layer.size() == 2 * r.depth + 1);
    CHECK(res.rho_mgt_mean > 0.0);
    CHECK(res.rho_standard_mean > 0.0);
}

TEST_CASE("beta analysis snapshots at the requested checkpoints") {
    ExperimentConfig cfg = tiny_config(Variant::mgt_full);
    cfg.model.depth = 2;
    cfg.total_steps = 4;
    cfg.eval_every = 4;
    cfg.seeds = {1};
    cfg.beta_checkpoints = {0.0, 50.0, 100.0};
    BetaAnalysisResult res = run_beta_analysis(cfg);
    REQUIRE(res.runs.size() == 1);
    const RunResult& r = res.runs[0];
    REQUIRE(r.beta_snapshots.size() == 3);
    CHECK(r.beta_snapshots[0].step == 0);
    CHECK(r.beta_snapshots[1].step == 2);
    CHECK(r.beta_snapshots[2].step == 4);
    // zero-init controller: first snapshot is exactly zero
    for (double v : r.beta_snapshots[0].stats.mean) CHECK(v == 0.0);
    for (double v : r.beta_snapshots[0].stats.variance) CHECK(v == 0.0);
    for (double v : r.beta_snapshots[0].stats.neg_frac) CHECK(v == 0.0);
    REQUIRE(r.beta_snapshots[0].stats.mean.size() == 4);  // per block
}

TEST_CASE("beta analysis at 16 pairs emits 4 checkpoints x 16 pooled rows") {
    ExperimentConfig cfg = tiny_config(Variant::mgt_full);
    cfg.model.depth = 16;
    cfg.model.width = 8;
    cfg.total_steps = 4;
    cfg.eval_every = 4;
    cfg.seeds = {1};
    BetaAnalysisResult res = run_beta_analysis(cfg);
    const RunResult& r = res.runs[0];
    REQUIRE(r.beta_snapshots.size() == 4);  // 0%, 25%, 50%, 100% of 4 steps
    size_t rows = 0;
    for (const BetaSnapshot& snap : r.beta_snapshots) {
        REQUIRE(snap.stats.mean.size() == 32);  // per block
        rows += snap.stats.mean.size() / 2;     // pooled per pair downstream
    }
    CHECK(rows == 4 * 16);
}

TEST_CASE("depth scaling solves widths within the parameter budget") {
    ExperimentConfig cfg = tiny_config();
    cfg.param_budget = 200000;
    size_t w4 = solve_width_for_budget(cfg.model, 4, Variant::standard, cfg.param_budget);
    size_t w8 = solve_width_for_budget(cfg.model, 8, Variant::standard, cfg.param_budget);
    CHECK(w4 % cfg.model.heads == 0);
    CHECK(w8 % cfg.model.heads == 0);
    CHECK(w8 < w4);

    ModelConfig probe = cfg.model;
    probe.variant = Variant::standard;
    probe.depth = 4;
    probe.width = w4;
    double c4 = double(param_count(probe));
    probe.depth = 8;
    probe.width = w8;
    double c8 = double(param_count(probe));
    CHECK(std::fabs(c4 - double(cfg.param_budget)) <= 0.10 * double(cfg.param_budget));
    CHECK(std::fabs(c8 - double(cfg.param_budget)) <= 0.10 * double(cfg.param_budget));
    // realized counts across depths agree within 10% of each other
    CHECK(std::fabs(c4 - c8) <= 0.10 * std::max(c4, c8));

    // tiny budget is infeasible
    CHECK_THROWS_AS(solve_width_for_budget(cfg.model, 4, Variant::standard, 10), InvalidConfigError);
}

TEST_CASE("depth scaling end to end on a tiny grid") {
    ExperimentConfig cfg = tiny_config();
    cfg.seeds = {1, 2};
    cfg.scale_depths = {1, 2};
    cfg.param_budget = 60000;
    cfg.total_steps = 2;
    cfg.eval_every = 2;
    cfg.scale_loss_target = 0.05;  // unreachable in 2 steps
    DepthScalingResult res = run_depth_scaling(cfg);
    REQUIRE(res.runs.size() == 8);
    REQUIRE(res.rows.size() == 4);  // 2 variants x 2 depths
    for (const DepthScaleRow& row : res.rows) {
        CHECK(std::isfinite(row.mean_final_loss));
        CHECK(row.loss_variance >= 0.0);
        CHECK(row.mean_steps_to_target == -1.0);
        CHECK(double(row.params) <= 1.10 * double(cfg.param_budget));
        CHECK(double(row.params) >= 0.90 * double(cfg.param_budget));
        // emitted variance equals the sample variance of per-seed finals
        std::vector<double> finals;
        for (const RunResult& r : res.runs)
            if (r.variant == row.variant && r.depth == row.depth) finals.push_back(r.records.back().val_loss);
        REQUIRE(finals.size() == 2);
        double mean = (finals[0] + finals[1]) / 2.0;
        double var = (finals[0] - mean) * (finals[0] - mean) + (finals[1] - mean) * (finals[1] - mean);
        CHECK(row.loss_variance == doctest::Approx(var).epsilon(1e-12));
    }
}

TEST_CASE("a destabilized run aborts with partial results instead of throwing") {
    ExperimentConfig cfg = tiny_config(Variant::standard);
    cfg.optimizer.learning_rate = 1e200;  // guaranteed overflow in the next forward
    cfg.optimizer.grad_clip = 0.0;
    cfg.total_steps = 8;
    cfg.eval_every = 4;
    RunResult r = train_run(cfg, 1);
    CHECK(r.aborted);
    CHECK_FALSE(r.abort_reason.empty());
    CHECK(r.records.size() >= 1);  // step-0 evaluation was flushed
}

TEST_CASE("untrained standard stacks: rank ratio shrinks with depth") {
    auto init_rho = [](size_t depth) {
        ExperimentConfig cfg;
        cfg.model.variant = Variant::standard;
        cfg.model.depth = depth;
        cfg.model.width = 16;
        cfg.model.heads = 2;
        cfg.model.ffn_mult = 2;
        cfg.model.vocab = 16;
        cfg.model.seq_len = 17;
        cfg.copy_half_len = 8;
        cfg.batch_size = 4;
        cfg.total_steps = 0;  // probe the freshly initialized model
        cfg.eval_every = 1;
        cfg.eval_batches = 1;
        RunResult r = train_run(cfg, 1);
        return r.final_rank.preservation_ratio;
    };
    double shallow = init_rho(4);
    double deep = init_rho(16);
    CHECK(deep < shallow);
}

TEST_CASE("untrained standard depth-24 profile is monotone non-increasing after layer 2") {
    ExperimentConfig cfg;
    cfg.model.variant = Variant::standard;
    cfg.model.depth = 24;
    cfg.model.width = 32;
    cfg.model.heads = 4;
    cfg.model.vocab = 16;
    cfg.model.seq_len = 17;
    cfg.copy_half_len = 8;
    cfg.batch_size = 4;
    cfg.total_steps = 0;
    cfg.eval_every = 1;
    cfg.eval_batches = 1;
    RunResult r = train_run(cfg, 1);
    const std::vector<double>& prof = r.final_rank.per_layer;
    REQUIRE(prof.size() == 49);
    for (size_t l = 2; l + 1 < prof.size(); ++l) CHECK(prof[l + 1] <= 1.05 * prof[l]);
}

TEST_CASE("config validation catches contradictions") {
    ExperimentConfig cfg = tiny_config();
    cfg.model.seq_len = 6;  // copy task needs 2m+1 = 5
    CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);

    cfg = tiny_config();
    cfg.seeds = {};
    CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);

    cfg = tiny_config();
    cfg.eval_every = 10;  // exceeds total_steps 4
    CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);

    cfg = tiny_config();
    cfg.task = TaskKind::char_lm;  // no corpus path
    CHECK_THROWS_AS(cfg.validate(), InvalidConfigError);
}
