#pragma once

// Orchestration of the full loop: supervised pretraining, alternating
// dataset growth and improvement phases, evaluation, and Best-of-N
// inference. Every random stream is derived from the root seed and a fixed
// phase constant plus the context index, so metrics are reproducible and
// independent of the worker count.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/grow.hpp"
#include "rest/improve.hpp"
#include "rest/losses.hpp"
#include "rest/mdp.hpp"
#include "rest/model.hpp"
#include "rest/oracle.hpp"
#include "rest/policy.hpp"
#include "rest/task.hpp"

namespace rest {

struct EvalSettings {
    enum class Mode { sample, greedy };
    Mode mode = Mode::sample;
    int n_samples = 8;       // per context, sample mode
    double temperature = 0.8;

    static Mode parse_mode(const std::string& s) {
        if (s == "sample") return Mode::sample;
        if (s == "greedy") return Mode::greedy;
        throw std::invalid_argument("eval mode must be 'sample' or 'greedy'");
    }
    static const char* mode_name(Mode m) { return m == Mode::sample ? "sample" : "greedy"; }
};

// Mean reward of policy outputs over the evaluation contexts. Sample mode
// draws n_samples per context at the configured temperature; greedy decodes
// once. Deterministic given the seed, independent of worker count.
template <typename Real>
double evaluate(const Checkpoint<Real>& policy, const Vocab& vocab,
                const std::vector<SourceReference>& eval_set, const RewardFn& reward_fn,
                const EvalSettings& es, std::uint64_t seed, int workers = 1) {
    if (eval_set.empty()) throw std::invalid_argument("evaluate: empty eval set");
    const std::size_t max_len = static_cast<std::size_t>(policy.config.max_out);
    std::vector<double> ctx_sum(eval_set.size(), 0.0);
    const int n = es.mode == EvalSettings::Mode::sample ? es.n_samples : 1;
    detail::run_chunked(eval_set.size(), workers, [&](std::size_t begin, std::size_t end) {
        PolicySession<Real> session(policy, vocab);
        for (std::size_t i = begin; i < end; ++i) {
            const TokenSeq x = vocab.encode(eval_set[i].source);
            if (es.mode == EvalSettings::Mode::greedy) {
                const TokenSeq y = session.greedy(x, max_len);
                ctx_sum[i] = reward_fn(eval_set[i].source, vocab.decode(y));
            } else {
                Rng rng(derive_seed(seed, i));
                double s = 0;
                for (int k = 0; k < n; ++k) {
                    const TokenSeq y = session.sample(x, es.temperature, max_len, rng);
                    s += reward_fn(eval_set[i].source, vocab.decode(y));
                }
                ctx_sum[i] = s;
            }
        }
    });
    double total = 0;
    for (double s : ctx_sum) total += s;
    return total / (static_cast<double>(eval_set.size()) * static_cast<double>(n));
}

// Draw N candidates and keep the highest-reward one; ties go to the first
// drawn, and N = 1 consumes the rng exactly like a single sample() call.
template <typename Real>
std::string best_of_n(PolicySession<Real>& session, const std::string& source, int N,
                      const RewardFn& reward_fn, double temperature, Rng& rng) {
    if (N < 1) throw std::invalid_argument("best_of_n: N must be >= 1");
    const std::size_t max_len =
        static_cast<std::size_t>(session.checkpoint().config.max_out);
    const TokenSeq x = session.vocab().encode(source);
    std::string best;
    double best_reward = -1;
    for (int k = 0; k < N; ++k) {
        const std::string y = session.vocab().decode(session.sample(x, temperature, max_len, rng));
        const double r = reward_fn(source, y);
        if (r > best_reward) {
            best_reward = r;
            best = y;
        }
    }
    return best;
}

template <typename Real>
std::string best_of_n(const Checkpoint<Real>& policy, const Vocab& vocab,
                      const std::string& source, int N, const RewardFn& reward_fn,
                      double temperature, Rng& rng) {
    PolicySession<Real> session(policy, vocab);
    return best_of_n(session, source, N, reward_fn, temperature, rng);
}

// Mean best-of-N reward over a context set; one derived rng per context.
template <typename Real>
double best_of_n_eval(const Checkpoint<Real>& policy, const Vocab& vocab,
                      const std::vector<SourceReference>& contexts, int N,
                      const RewardFn& reward_fn, double temperature, std::uint64_t seed,
                      int workers = 1) {
    std::vector<double> slot(contexts.size(), 0.0);
    detail::run_chunked(contexts.size(), workers, [&](std::size_t begin, std::size_t end) {
        PolicySession<Real> session(policy, vocab);
        for (std::size_t i = begin; i < end; ++i) {
            Rng rng(derive_seed(seed, i));
            const std::string y =
                best_of_n(session, contexts[i].source, N, reward_fn, temperature, rng);
            slot[i] = reward_fn(contexts[i].source, y);
        }
    });
    double total = 0;
    for (double s : slot) total += s;
    return total / static_cast<double>(contexts.size());
}

// ---- full-loop configuration -----------------------------------------------------

struct RestConfig {
    // data
    std::size_t n_train = 2000;
    std::size_t n_eval = 500;
    // model
    ModelConfig model;
    // loop shape
    int grow_steps = 1;       // G
    int n_per_context = 16;   // candidates per source in a grow step
    double temperature = 0.8;
    ThresholdSchedule schedule = ThresholdSchedule::global_taus({0.7, 0.8, 0.9});
    LossSpec loss;
    // training
    double lr = 0.005;
    double lr_decay = 0.5;
    int batch_size = 32;
    int pretrain_budget = 5000;
    int improve_budget = 3000;
    int value_budget = 1500;
    int eval_interval = 200;
    int patience = 3;
    // evaluation
    EvalSettings eval;
    std::size_t stop_eval_contexts = 250;  // cheap evaluator driving early stopping
    int stop_eval_samples = 4;
    // flags
    bool zero_tau_keeps_all = false;
    bool allow_low_tau1 = false;
    bool restart_from_bc = false;  // improve each grow from the BC checkpoint instead
    std::uint64_t seed = 1;
    int workers = 1;

    int improve_steps() const {
        return grow_steps == 0 ? 0 : static_cast<int>(schedule.steps());
    }

    void validate() const {
        if (grow_steps < 0) throw std::invalid_argument("config: G must be >= 0");
        if (grow_steps > 0) schedule.validate();
        if (n_per_context < 1) throw std::invalid_argument("config: n_per_context must be >= 1");
        if (!(temperature > 0)) throw std::invalid_argument("config: temperature must be > 0");
        loss.validate();
        model.validate();
    }
};

struct PhaseMetric {
    std::string phase;  // pretrain | grow | improve | final
    int grow = 0;
    int improve = 0;
    std::string tau;    // empty when not applicable
    double eval_reward = 0;
    int steps = 0;
};

struct RunRecord {
    std::vector<PhaseMetric> metrics;
    std::vector<ImproveRow> improve_rows;
    double bc_eval = 0;
    double final_eval = 0;
    double wall_seconds = 0;
};

inline std::string metrics_csv(const RunRecord& record) {
    std::string out = "phase,grow,improve,tau,eval_reward,steps\n";
    for (const auto& m : record.metrics) {
        out += m.phase + "," + std::to_string(m.grow) + "," + std::to_string(m.improve) + "," +
               m.tau + "," + format_reward(m.eval_reward) + "," + std::to_string(m.steps) + "\n";
    }
    return out;
}

namespace detail {

// fixed stream constants for phase-level seed derivation
inline constexpr std::uint64_t kDataStream = 1;
inline constexpr std::uint64_t kInitStream = 2;
inline constexpr std::uint64_t kPretrainStream = 3;
inline constexpr std::uint64_t kGrowStream = 100;
inline constexpr std::uint64_t kValueStream = 200;
inline constexpr std::uint64_t kImproveStream = 300;
inline constexpr std::uint64_t kEvalStream = 7;
inline constexpr std::uint64_t kStopEvalStream = 8;

inline GrowDataset originals_dataset(const std::vector<SourceReference>& data,
                                     const RewardFn& reward_fn, std::size_t max_out) {
    GrowDataset ds;
    ds.grow_index = 0;
    ds.max_out = max_out;
    ds.examples.reserve(data.size());
    for (const auto& d : data) {
        AnnotatedExample e;
        e.source = d.source;
        e.output = d.reference;
        e.origin = Origin::original;
        ds.examples.push_back(std::move(e));
    }
    annotate(ds.examples, reward_fn);
    assign_source_ids(ds.examples);
    return ds;
}

// Mean per-sequence NLL of the references; the pretraining stopping signal.
template <typename Real>
double eval_nll(const Checkpoint<Real>& policy, const Vocab& vocab,
                const std::vector<SourceReference>& eval_set, std::size_t max_out) {
    double total = 0;
    Tape<Real> tape;
    auto params = ModelParams<Real>::put(tape, policy);
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
        if (tape.size() > 20000) {  // bound memory over large eval sets
            tape.clear();
            params = ModelParams<Real>::put(tape, policy);
        }
        AnnotatedExample e;
        e.source = eval_set[i].source;
        e.output = eval_set[i].reference;
        auto lp = detail::example_logprobs(tape, params, vocab, e);
        double s = 0;
        for (Real v : tape.value(lp).data) s += static_cast<double>(v);
        total -= s;
    }
    return total / static_cast<double>(eval_set.size());
}

}  // namespace detail

template <typename Real>
SampleFnFactory policy_sampler_factory(const Checkpoint<Real>& policy, const Vocab& vocab,
                                       double temperature) {
    const std::size_t max_len = static_cast<std::size_t>(policy.config.max_out);
    return [&policy, &vocab, temperature, max_len]() -> SampleFn {
        auto session = std::make_shared<PolicySession<Real>>(policy, vocab);
        return [session, &vocab, temperature, max_len](const std::string& source,
                                                       Rng& rng) -> std::string {
            const TokenSeq y = session->sample(vocab.encode(source), temperature, max_len, rng);
            return vocab.decode(y);
        };
    };
}

// Executes the full algorithm: BC pretraining, then for each grow step a
// fresh sampled dataset followed by the improve schedule. When out_dir is
// non-empty, checkpoints, datasets, reports and a metrics CSV are persisted
// there.
template <typename Real>
std::pair<Checkpoint<Real>, RunRecord> run_rest(const RestConfig& cfg, const TaskSpec& task,
                                                const std::string& out_dir = "",
                                                const std::string& config_snapshot = "") {
    cfg.validate();
    task.validate();
    const auto start = std::chrono::steady_clock::now();
    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    std::ostringstream log;

    const Vocab vocab = task.vocab();
    const RewardFn reward_fn = make_reward_fn(task);
    const std::size_t max_out = static_cast<std::size_t>(cfg.model.max_out);

    const auto train_set = make_dataset(cfg.n_train, task, derive_seed(cfg.seed, detail::kDataStream));
    const auto eval_set =
        make_dataset(cfg.n_eval, task, derive_seed(cfg.seed, detail::kDataStream, 2));
    const std::vector<SourceReference> stop_eval_set(
        eval_set.begin(),
        eval_set.begin() + static_cast<std::ptrdiff_t>(
                               std::min(cfg.stop_eval_contexts, eval_set.size())));

    // cheap seeded evaluator that drives early stopping and checkpoint choice
    EvalSettings stop_es = cfg.eval;
    stop_es.n_samples = cfg.stop_eval_samples;
    const std::uint64_t stop_seed = derive_seed(cfg.seed, detail::kStopEvalStream);
    Evaluator<Real> reward_evaluator = [&](const Checkpoint<Real>& c) {
        return evaluate(c, vocab, stop_eval_set, reward_fn, stop_es, stop_seed, cfg.workers);
    };
    const std::uint64_t eval_seed = derive_seed(cfg.seed, detail::kEvalStream);
    auto full_eval = [&](const Checkpoint<Real>& c) {
        return evaluate(c, vocab, eval_set, reward_fn, cfg.eval, eval_seed, cfg.workers);
    };

    RunRecord record;
    auto phase_error = [](const std::string& phase, const std::exception& ex) {
        return std::runtime_error("phase " + phase + ": " + ex.what());
    };

    // ---- BC pretraining ----
    Checkpoint<Real> bc;
    TrainResult<Real> pre;
    try {
        Checkpoint<Real> fresh = init_policy<Real>(cfg.model, derive_seed(cfg.seed, detail::kInitStream));
        GrowDataset d0 = detail::originals_dataset(train_set, reward_fn, max_out);
        std::vector<std::size_t> all(d0.examples.size());
        std::iota(all.begin(), all.end(), 0);
        TrainSettings ts;
        ts.batch_size = cfg.batch_size;
        ts.budget = cfg.pretrain_budget;
        ts.eval_interval = cfg.eval_interval;
        ts.patience = cfg.patience;
        ts.lr = cfg.lr;
        ts.seed = derive_seed(cfg.seed, detail::kPretrainStream);
        // early stopping on eval NLL (lower is better, so negate)
        Evaluator<Real> nll_eval = [&](const Checkpoint<Real>& c) {
            return -detail::eval_nll(c, vocab, eval_set, max_out);
        };
        LossEnv<Real> env;  // BC
        pre = train_policy(fresh, vocab, d0, all, env, ts, nll_eval);
        bc = pre.best;
    } catch (const std::exception& ex) {
        throw phase_error("pretrain", ex);
    }
    record.bc_eval = full_eval(bc);
    record.metrics.push_back({"pretrain", 0, 0, "", record.bc_eval, pre.steps_run});
    log << "pretrain: steps=" << pre.steps_run << " eval_nll=" << -pre.best_eval
        << " eval_reward=" << format_reward(record.bc_eval) << "\n";
    if (!out_dir.empty()) save_checkpoint(bc, out_dir + "/pretrain.ckpt");

    Checkpoint<Real> current = bc;
    record.final_eval = record.bc_eval;

    // ---- grow / improve loop ----
    for (int g = 1; g <= cfg.grow_steps; ++g) {
        GrowDataset dg;
        try {
            dg = grow(policy_sampler_factory(current, vocab, cfg.temperature), train_set,
                      cfg.n_per_context, reward_fn, derive_seed(cfg.seed, detail::kGrowStream + static_cast<std::uint64_t>(g)),
                      g, max_out, cfg.workers);
        } catch (const std::exception& ex) {
            throw phase_error("grow " + std::to_string(g), ex);
        }
        const double v_hat = dg.mean_sampled_reward();
        record.metrics.push_back({"grow", g, 0, "", v_hat, 0});
        log << "grow " << g << ": records=" << dg.examples.size()
            << " sampled_mean_reward=" << format_reward(v_hat)
            << " dataset_mean_reward=" << format_reward(dg.mean_reward()) << "\n";
        if (!out_dir.empty()) save_dataset(dg, out_dir + "/grow_" + std::to_string(g) + ".txt");

        // improvement guarantee precondition on the first threshold
        if (cfg.schedule.kind == ScheduleKind::global && !cfg.allow_low_tau1) {
            const double v_ds = dg.mean_reward();
            if (!(cfg.schedule.values.front() > v_ds)) {
                throw std::runtime_error(
                    "phase improve " + std::to_string(g) + ": tau_1 = " +
                    format_reward(cfg.schedule.values.front()) +
                    " does not exceed the dataset mean reward " + format_reward(v_ds) +
                    "; raise the thresholds or set allow_low_tau1");
            }
        }

        ValueNet<Real> vnet;
        LossEnv<Real> env;
        env.spec = cfg.loss;
        Checkpoint<Real> prior = current;
        if (cfg.loss.kind == LossSpec::Kind::oac || cfg.loss.kind == LossSpec::Kind::bvmpo) {
            try {
                vnet = init_value_net<Real>(cfg.model, derive_seed(cfg.seed, detail::kValueStream + static_cast<std::uint64_t>(g)));
                auto bve = train_value_bve(vnet, vocab, dg, cfg.loss.discount, cfg.value_budget,
                                           derive_seed(cfg.seed, detail::kValueStream, static_cast<std::uint64_t>(g)),
                                           cfg.batch_size, cfg.lr);
                log << "value net " << g << ": steps=" << bve.steps
                    << " loss " << bve.initial_loss << " -> " << bve.final_loss << "\n";
            } catch (const std::exception& ex) {
                throw phase_error("value training " + std::to_string(g), ex);
            }
            env.value_net = &vnet;
            env.bc_prior = &prior;
        }

        if (cfg.restart_from_bc) current = bc;
        for (std::size_t i = 0; i < cfg.schedule.steps(); ++i) {
            TrainSettings ts;
            ts.batch_size = cfg.batch_size;
            ts.budget = cfg.improve_budget;
            ts.eval_interval = cfg.eval_interval;
            ts.patience = cfg.patience;
            ts.lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(i + 1));
            ts.seed = derive_seed(cfg.seed, detail::kImproveStream + static_cast<std::uint64_t>(g),
                                  static_cast<std::uint64_t>(i));
            ImproveOptions opts;
            opts.zero_tau_keeps_all = cfg.zero_tau_keeps_all;
            opts.improve_index = static_cast<int>(i + 1);
            ThresholdChoice choice = resolve_threshold(cfg.schedule, i, dg);
            try {
                auto [next, row] = improve_step(current, vocab, dg, choice, env, ts,
                                                reward_evaluator, opts);
                current = std::move(next);
                record.improve_rows.push_back(row);
                const double ev = full_eval(current);
                record.final_eval = ev;
                record.metrics.push_back(
                    {"improve", g, static_cast<int>(i + 1), choice.label, ev, row.steps});
                log << "improve " << g << "." << (i + 1) << ": tau=" << choice.label
                    << " kept=" << row.kept << " steps=" << row.steps
                    << " eval_reward=" << format_reward(ev) << "\n";
                if (!out_dir.empty()) {
                    save_checkpoint(current, out_dir + "/g" + std::to_string(g) + "_i" +
                                                 std::to_string(i + 1) + ".ckpt");
                }
            } catch (const std::exception& ex) {
                throw phase_error("improve " + std::to_string(g) + "." + std::to_string(i + 1),
                                  ex);
            }
        }
    }

    record.metrics.push_back(
        {"final", cfg.grow_steps, cfg.improve_steps(), "", record.final_eval, 0});
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << "final: eval_reward=" << format_reward(record.final_eval)
        << " wall_seconds=" << record.wall_seconds << "\n";

    if (!out_dir.empty()) {
        save_checkpoint(current, out_dir + "/final.ckpt");
        std::ofstream(out_dir + "/metrics.csv") << metrics_csv(record);
        std::ofstream(out_dir + "/improve_report.csv") << improve_report_csv(record.improve_rows);
        std::ofstream(out_dir + "/log.txt") << log.str();
        if (!config_snapshot.empty()) std::ofstream(out_dir + "/config.txt") << config_snapshot;
    }
    return {std::move(current), std::move(record)};
}

}  // namespace rest
