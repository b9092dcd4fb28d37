#pragma once

// The policy-improvement step: threshold filtering of the grown dataset,
// threshold schedules (a global increasing list, per-source percentiles, or
// per-source max/mean interpolation), minibatch training with eval-driven
// early stopping, and best-checkpoint selection. Filtering is strict
// (reward > tau); an opt-in flag relaxes tau = 0 to keep the full dataset.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/grow.hpp"
#include "rest/losses.hpp"
#include "rest/optim.hpp"
#include "rest/policy.hpp"

namespace rest {

enum class ScheduleKind { global, percentile, interpolation };

inline const char* schedule_kind_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::global: return "global";
        case ScheduleKind::percentile: return "percentile";
        case ScheduleKind::interpolation: return "interpolation";
    }
    return "?";
}

struct ThresholdSchedule {
    ScheduleKind kind = ScheduleKind::global;
    std::vector<double> values;  // taus, percentiles, or gammas

    static ThresholdSchedule global_taus(std::vector<double> taus) {
        ThresholdSchedule s;
        s.kind = ScheduleKind::global;
        s.values = std::move(taus);
        s.validate();
        return s;
    }
    static ThresholdSchedule percentiles(std::vector<double> ps) {
        ThresholdSchedule s;
        s.kind = ScheduleKind::percentile;
        s.values = std::move(ps);
        s.validate();
        return s;
    }
    static ThresholdSchedule interpolations(std::vector<double> gammas) {
        ThresholdSchedule s;
        s.kind = ScheduleKind::interpolation;
        s.values = std::move(gammas);
        s.validate();
        return s;
    }

    std::size_t steps() const { return values.size(); }

    void validate() const {
        if (values.empty()) throw std::invalid_argument("threshold schedule: empty");
        switch (kind) {
            case ScheduleKind::global:
                for (std::size_t i = 1; i < values.size(); ++i) {
                    if (!(values[i] > values[i - 1])) {
                        throw std::invalid_argument(
                            "threshold schedule: global tau list must be strictly increasing");
                    }
                }
                break;
            case ScheduleKind::percentile:
                for (double p : values) {
                    if (!(p >= 0.0 && p < 100.0)) {
                        throw std::invalid_argument(
                            "threshold schedule: percentiles must be in [0,100)");
                    }
                }
                break;
            case ScheduleKind::interpolation:
                for (double g : values) {
                    if (!(g >= 0.0 && g <= 1.0)) {
                        throw std::invalid_argument(
                            "threshold schedule: gammas must be in [0,1]");
                    }
                }
                break;
        }
    }
};

// The paper's six-step default; shorter runs skip the initial smaller
// thresholds and keep the top of the list.
inline std::vector<double> default_tau_ladder() { return {0.0, 0.7, 0.8, 0.9, 0.95, 0.99}; }

inline std::vector<double> tau_ladder_for_steps(std::size_t n) {
    auto full = default_tau_ladder();
    if (n == 0 || n > full.size()) {
        throw std::invalid_argument("tau ladder supports 1.." + std::to_string(full.size()) +
                                    " steps");
    }
    return {full.end() - static_cast<std::ptrdiff_t>(n), full.end()};
}

// ---- filtering -----------------------------------------------------------------

// Indices of records with reward strictly above tau. With zero_tau_keeps_all
// set and tau == 0, keeps everything (the full-dataset reading of tau = 0).
inline std::vector<std::size_t> filter(const GrowDataset& ds, double tau,
                                       bool zero_tau_keeps_all = false) {
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        const auto& e = ds.examples[i];
        if (!e.annotated()) {
            throw std::runtime_error("filter: unannotated record at index " + std::to_string(i));
        }
        if (e.reward > tau || (zero_tau_keeps_all && tau == 0.0)) kept.push_back(i);
    }
    return kept;
}

// Nearest-rank percentile of each source's rewards.
inline std::vector<double> percentile_thresholds(const GrowDataset& ds, double p) {
    if (!(p >= 0.0 && p < 100.0))
        throw std::invalid_argument("percentile_thresholds: p must be in [0,100)");
    const auto groups = ds.groups_by_source();
    std::vector<double> taus(groups.size());
    for (std::size_t s = 0; s < groups.size(); ++s) {
        if (groups[s].empty())
            throw std::runtime_error("percentile_thresholds: empty source group");
        std::vector<double> rewards;
        rewards.reserve(groups[s].size());
        for (std::size_t i : groups[s]) rewards.push_back(ds.examples[i].reward);
        std::sort(rewards.begin(), rewards.end());
        const std::size_t n = rewards.size();
        std::size_t rank = static_cast<std::size_t>(
            std::ceil(p / 100.0 * static_cast<double>(n)));
        if (rank < 1) rank = 1;
        taus[s] = rewards[rank - 1];
    }
    return taus;
}

// tau(source) = gamma * max + (1 - gamma) * mean of that source's rewards.
inline std::vector<double> interpolation_thresholds(const GrowDataset& ds, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0))
        throw std::invalid_argument("interpolation_thresholds: gamma must be in [0,1]");
    const auto groups = ds.groups_by_source();
    std::vector<double> taus(groups.size());
    for (std::size_t s = 0; s < groups.size(); ++s) {
        if (groups[s].empty())
            throw std::runtime_error("interpolation_thresholds: empty source group");
        double mx = 0, mean = 0;
        for (std::size_t i : groups[s]) {
            mx = std::max(mx, ds.examples[i].reward);
            mean += ds.examples[i].reward;
        }
        mean /= static_cast<double>(groups[s].size());
        taus[s] = gamma * mx + (1.0 - gamma) * mean;
    }
    return taus;
}

inline std::vector<std::size_t> filter_per_source(const GrowDataset& ds,
                                                  const std::vector<double>& taus) {
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        const auto& e = ds.examples[i];
        if (!e.annotated()) {
            throw std::runtime_error("filter: unannotated record at index " + std::to_string(i));
        }
        if (e.reward > taus.at(static_cast<std::size_t>(e.source_id))) kept.push_back(i);
    }
    return kept;
}

// A resolved per-step threshold: either one global tau or a per-source map.
struct ThresholdChoice {
    bool per_source = false;
    double tau = 0;                      // global
    std::vector<double> per_source_taus;
    std::string label;                   // for reports: "0.700000", "p90", "gamma0.50"
};

inline ThresholdChoice resolve_threshold(const ThresholdSchedule& schedule, std::size_t step,
                                         const GrowDataset& ds) {
    if (step >= schedule.steps()) throw std::invalid_argument("resolve_threshold: step out of range");
    ThresholdChoice c;
    std::ostringstream label;
    switch (schedule.kind) {
        case ScheduleKind::global:
            c.per_source = false;
            c.tau = schedule.values[step];
            label << format_reward(c.tau);
            break;
        case ScheduleKind::percentile:
            c.per_source = true;
            c.per_source_taus = percentile_thresholds(ds, schedule.values[step]);
            label << "p" << schedule.values[step];
            break;
        case ScheduleKind::interpolation:
            c.per_source = true;
            c.per_source_taus = interpolation_thresholds(ds, schedule.values[step]);
            label << "gamma" << schedule.values[step];
            break;
    }
    c.label = label.str();
    return c;
}

inline std::vector<std::size_t> apply_threshold(const GrowDataset& ds, const ThresholdChoice& c,
                                                bool zero_tau_keeps_all = false) {
    return c.per_source ? filter_per_source(ds, c.per_source_taus)
                        : filter(ds, c.tau, zero_tau_keeps_all);
}

// ---- training loop ---------------------------------------------------------------

// Higher is better; called on immutable checkpoint snapshots.
template <typename Real>
using Evaluator = std::function<double(const Checkpoint<Real>&)>;

struct TrainSettings {
    int batch_size = 32;
    int budget = 3000;
    int eval_interval = 200;
    int patience = 3;
    double lr = 0.005;
    std::uint64_t seed = 0;
    OptKind optimizer = OptKind::adam;
};

template <typename Real>
struct TrainResult {
    Checkpoint<Real> best;
    double best_eval = 0;
    int steps_run = 0;
    std::vector<double> eval_history;
};

// Minibatch training of the policy on a fixed set of records, evaluating
// every eval_interval steps and returning the checkpoint with the best eval
// score seen (the starting policy included). Stops early after `patience`
// consecutive evals without improvement.
template <typename Real>
TrainResult<Real> train_policy(const Checkpoint<Real>& initial, const Vocab& vocab,
                               const GrowDataset& ds, const std::vector<std::size_t>& indices,
                               LossEnv<Real> env, const TrainSettings& settings,
                               const Evaluator<Real>& evaluator) {
    if (indices.empty()) throw std::invalid_argument("train_policy: no training records");
    env.spec.validate();

    Checkpoint<Real> current = initial;
    TrainResult<Real> result;
    result.best = initial;
    result.best_eval = evaluator(initial);
    result.eval_history.push_back(result.best_eval);

    Optimizer<Real> opt;
    opt.kind = settings.optimizer;
    opt.lr = static_cast<Real>(settings.lr);

    Rng rng(derive_seed(settings.seed, 0x7121));
    std::vector<std::size_t> order = indices;
    rng.shuffle(order);
    std::size_t cursor = 0;
    int no_improve = 0;

    for (int step = 1; step <= settings.budget; ++step) {
        std::vector<AnnotatedExample> batch;
        batch.reserve(static_cast<std::size_t>(settings.batch_size));
        for (int b = 0; b < settings.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(ds.examples[order[cursor++]]);
        }
        env.lambda_current =
            bvmpo_lambda(step - 1, settings.budget, env.spec.lambda_start, env.spec.lambda_end);

        Tape<Real> tape;
        auto params = ModelParams<Real>::put(tape, current);
        auto loss = loss_graph(tape, params, vocab, batch, env);
        const double loss_val = static_cast<double>(tape.value(loss).item());
        if (std::isnan(loss_val)) {
            throw std::runtime_error("train_policy: loss diverged (NaN) at step " +
                                     std::to_string(step));
        }
        tape.backward(loss);
        std::vector<Tensor<Real>> grads;
        grads.reserve(current.params.size());
        for (auto id : params.leafs) grads.push_back(tape.grad(id));
        opt.step(current.params, grads);
        result.steps_run = step;

        if (step % settings.eval_interval == 0 || step == settings.budget) {
            const double ev = evaluator(current);
            result.eval_history.push_back(ev);
            if (ev > result.best_eval) {
                result.best_eval = ev;
                result.best = current;
                no_improve = 0;
            } else {
                ++no_improve;
            }
            if (no_improve >= settings.patience) break;
            if (step == settings.budget) break;
        }
    }
    return result;
}

// ---- improve step and schedule -----------------------------------------------------

struct ImproveRow {
    int grow = 0;
    int improve = 0;
    std::string tau_label;
    std::size_t kept = 0;
    int steps = 0;
    double best_eval_reward = 0;
};

inline std::string improve_report_csv(const std::vector<ImproveRow>& rows) {
    std::string out = "grow,improve,tau,kept,steps,best_eval_reward\n";
    for (const auto& r : rows) {
        out += std::to_string(r.grow) + "," + std::to_string(r.improve) + "," + r.tau_label + "," +
               std::to_string(r.kept) + "," + std::to_string(r.steps) + "," +
               format_reward(r.best_eval_reward) + "\n";
    }
    return out;
}

struct ImproveOptions {
    bool zero_tau_keeps_all = false;
    bool enforce_tau1 = true;   // refuse global schedules with tau_1 <= mean dataset reward
    double lr_decay = 0.5;      // per improve step
    int improve_index = 1;      // 1-based index of this step within the schedule
};

// One Improve step: filter, fine-tune on the kept subset with the chosen
// loss, return the best-eval checkpoint and a report row.
template <typename Real>
std::pair<Checkpoint<Real>, ImproveRow> improve_step(
    const Checkpoint<Real>& policy, const Vocab& vocab, const GrowDataset& ds,
    const ThresholdChoice& choice, const LossEnv<Real>& env, const TrainSettings& settings,
    const Evaluator<Real>& evaluator, const ImproveOptions& options = {}) {
    const std::vector<std::size_t> kept = apply_threshold(ds, choice, options.zero_tau_keeps_all);
    if (kept.empty()) {
        throw std::runtime_error("improve_step: threshold " + choice.label +
                                 " leaves an empty training set");
    }
    TrainResult<Real> tr = train_policy(policy, vocab, ds, kept, env, settings, evaluator);
    tr.best.lineage.grow = ds.grow_index;
    tr.best.lineage.improve = options.improve_index;
    tr.best.lineage.lr = settings.lr;

    ImproveRow row;
    row.grow = ds.grow_index;
    row.improve = options.improve_index;
    row.tau_label = choice.label;
    row.kept = kept.size();
    row.steps = tr.steps_run;
    row.best_eval_reward = tr.best_eval;
    return {std::move(tr.best), row};
}

// Runs one improve step per schedule entry, each initialized from the
// previous step's best checkpoint with a decayed learning rate.
template <typename Real>
std::pair<Checkpoint<Real>, std::vector<ImproveRow>> improve_schedule(
    const Checkpoint<Real>& policy, const Vocab& vocab, const GrowDataset& ds,
    const ThresholdSchedule& schedule, const LossEnv<Real>& env, TrainSettings settings,
    const Evaluator<Real>& evaluator, ImproveOptions options = {}) {
    schedule.validate();
    if (schedule.kind == ScheduleKind::global && options.enforce_tau1) {
        const double v_hat = ds.mean_reward();
        if (!(schedule.values.front() > v_hat)) {
            throw std::runtime_error(
                "improve_schedule: tau_1 = " + format_reward(schedule.values.front()) +
                " does not exceed the dataset mean reward " + format_reward(v_hat) +
                " (required for the improvement guarantee; override to proceed)");
        }
    }
    Checkpoint<Real> current = policy;
    std::vector<ImproveRow> rows;
    const double base_lr = settings.lr;
    for (std::size_t i = 0; i < schedule.steps(); ++i) {
        settings.lr = base_lr * std::pow(options.lr_decay, static_cast<double>(i + 1));
        settings.seed = derive_seed(settings.seed, 0x1A9 + i);
        options.improve_index = static_cast<int>(i + 1);
        ThresholdChoice choice = resolve_threshold(schedule, i, ds);
        try {
            auto [next, row] = improve_step(current, vocab, ds, choice, env, settings, evaluator,
                                            options);
            current = std::move(next);
            rows.push_back(row);
        } catch (const std::exception& ex) {
            throw std::runtime_error("improve step " + std::to_string(i + 1) + ": " + ex.what());
        }
    }
    return {std::move(current), std::move(rows)};
}

}  // namespace rest
