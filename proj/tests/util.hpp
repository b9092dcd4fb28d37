#pragma once

// Shared fixtures for the test suites: tiny model configs and a plain
// training loop wrapper.

#include <numeric>
#include <string>
#include <vector>

#include "rest/grow.hpp"
#include "rest/improve.hpp"
#include "rest/losses.hpp"
#include "rest/mdp.hpp"
#include "rest/policy.hpp"
#include "rest/task.hpp"

namespace testutil {

inline rest::ModelConfig tiny_config(int vocab, int max_src = 6, int max_out = 6) {
    rest::ModelConfig c;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab = vocab;
    c.max_src = max_src;
    c.max_out = max_out;
    c.out_dim = vocab;
    return c;
}

inline rest::ModelConfig micro_config(int vocab, int max_src = 4, int max_out = 4) {
    rest::ModelConfig c;
    c.d_model = 4;
    c.n_layers = 1;
    c.n_heads = 1;
    c.d_ff = 6;
    c.vocab = vocab;
    c.max_src = max_src;
    c.max_out = max_out;
    c.out_dim = vocab;
    return c;
}

inline rest::AnnotatedExample example(std::string source, std::string output, double reward,
                                      rest::Origin origin = rest::Origin::original,
                                      int grow_index = 0) {
    rest::AnnotatedExample e;
    e.source = std::move(source);
    e.output = std::move(output);
    e.reward = reward;
    e.origin = origin;
    e.grow_index = grow_index;
    return e;
}

inline rest::GrowDataset dataset_of(std::vector<rest::AnnotatedExample> examples,
                                    std::size_t max_out, int grow_index = 1) {
    rest::GrowDataset ds;
    ds.examples = std::move(examples);
    ds.max_out = max_out;
    ds.grow_index = grow_index;
    rest::assign_source_ids(ds.examples);
    return ds;
}

// Fixed-step BC training without early stopping; returns the final policy.
template <typename Real>
rest::Checkpoint<Real> train_bc_steps(const rest::Checkpoint<Real>& initial,
                                      const rest::Vocab& vocab, const rest::GrowDataset& ds,
                                      int steps, double lr, std::uint64_t seed,
                                      int batch_size = 8) {
    std::vector<std::size_t> all(ds.examples.size());
    std::iota(all.begin(), all.end(), 0);
    rest::TrainSettings ts;
    ts.batch_size = batch_size;
    ts.budget = steps;
    ts.eval_interval = steps + 1;  // never eval mid-run
    ts.patience = 1000;
    ts.lr = lr;
    ts.seed = seed;
    rest::LossEnv<Real> env;
    int calls = 0;
    rest::Evaluator<Real> last_wins = [&calls](const rest::Checkpoint<Real>&) {
        return static_cast<double>(calls++);  // strictly increasing: keep the last snapshot
    };
    auto result = rest::train_policy(initial, vocab, ds, all, env, ts, last_wins);
    return result.best;
}

}  // namespace testutil
