#pragma once

// Exact tabular implementation of the population view of the algorithm:
// alternate filtering of the data/policy mixture with a KL projection onto
// the (unconstrained) conditional family, where the projection is just the
// conditional of the filtered mixture. Everything is small enough to
// enumerate, so these routines serve as the brute-force oracle for the
// improvement guarantee and the gradient decomposition.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/grow.hpp"
#include "rest/losses.hpp"
#include "rest/policy.hpp"
#include "rest/rng.hpp"

namespace rest {

struct TabularDistribution {
    std::vector<double> px;                // [X]
    std::vector<std::vector<double>> pyx;  // [X][Y], rows sum to 1

    std::size_t n_x() const { return px.size(); }
    std::size_t n_y() const { return pyx.empty() ? 0 : pyx[0].size(); }

    void validate(double tol = 1e-12) const {
        if (px.size() != pyx.size()) throw std::invalid_argument("tabular: px/pyx size mismatch");
        double sx = 0;
        for (double p : px) {
            if (p < 0) throw std::invalid_argument("tabular: negative p(x)");
            sx += p;
        }
        if (std::abs(sx - 1.0) > tol) throw std::invalid_argument("tabular: p(x) does not sum to 1");
        for (const auto& row : pyx) {
            if (row.size() != n_y()) throw std::invalid_argument("tabular: ragged p(y|x)");
            double s = 0;
            for (double p : row) {
                if (p < 0) throw std::invalid_argument("tabular: negative p(y|x)");
                s += p;
            }
            if (std::abs(s - 1.0) > tol)
                throw std::invalid_argument("tabular: p(y|x) row does not sum to 1");
        }
    }
};

struct TabularPolicy {
    std::vector<std::vector<double>> pyx;  // [X][Y], rows sum to 1

    void validate(double tol = 1e-12) const {
        for (const auto& row : pyx) {
            double s = 0;
            for (double p : row) {
                if (p < 0) throw std::invalid_argument("tabular policy: negative entry");
                s += p;
            }
            if (std::abs(s - 1.0) > tol)
                throw std::invalid_argument("tabular policy: row does not sum to 1");
        }
    }
};

using RewardTable = std::vector<std::vector<double>>;  // [X][Y]

// The unconstrained KL(p || pi) minimizer is the data conditional itself.
inline TabularPolicy exact_bc_fit(const TabularDistribution& data) {
    data.validate();
    return TabularPolicy{data.pyx};
}

// KL(p(x,y) || p(x) pi(y|x)) = E_x KL(p(y|x) || pi(y|x)).
inline double kl_joint(const TabularDistribution& data, const TabularPolicy& pi) {
    double kl = 0;
    for (std::size_t x = 0; x < data.n_x(); ++x) {
        for (std::size_t y = 0; y < data.n_y(); ++y) {
            const double p = data.pyx[x][y];
            if (p == 0) continue;
            kl += data.px[x] * p * std::log(p / pi.pyx[x][y]);
        }
    }
    return kl;
}

struct FilteredMixture {
    std::vector<std::vector<double>> table;  // unnormalized joint [X][Y]
    double normalizer = 0;
};

// q(x,y) = [(1-lambda) p(x,y) + lambda p(x) pi(y|x)] * 1[R(x,y) > tau]
inline FilteredMixture filtered_mixture(const TabularDistribution& data, const TabularPolicy& pi,
                                        double lambda, double tau, const RewardTable& R) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("filtered_mixture: lambda must be in [0,1]");
    FilteredMixture out;
    out.table.assign(data.n_x(), std::vector<double>(data.n_y(), 0.0));
    for (std::size_t x = 0; x < data.n_x(); ++x) {
        for (std::size_t y = 0; y < data.n_y(); ++y) {
            if (!(R[x][y] > tau)) continue;
            const double m = (1.0 - lambda) * data.pyx[x][y] + lambda * pi.pyx[x][y];
            out.table[x][y] = data.px[x] * m;
            out.normalizer += out.table[x][y];
        }
    }
    if (out.normalizer <= 0) {
        throw std::runtime_error("filtered_mixture: threshold " + std::to_string(tau) +
                                 " removes all probability mass");
    }
    return out;
}

struct ExactImproveResult {
    TabularPolicy policy;
    std::vector<std::size_t> dropped_contexts;  // kept their previous conditional
};

// KL projection of the filtered mixture onto the conditional family: the
// per-context conditional of the filtered mixture. A context whose filtered
// mass vanishes is dropped from the projection (previous row retained).
inline ExactImproveResult exact_improve(const TabularPolicy& pi_k,
                                        const TabularDistribution& data, double lambda,
                                        double tau, const RewardTable& R) {
    ExactImproveResult out;
    out.policy = pi_k;
    bool any_alive = false;
    for (std::size_t x = 0; x < data.n_x(); ++x) {
        double mass = 0;
        for (std::size_t y = 0; y < data.n_y(); ++y) {
            if (R[x][y] > tau)
                mass += (1.0 - lambda) * data.pyx[x][y] + lambda * pi_k.pyx[x][y];
        }
        if (mass <= 0) {
            out.dropped_contexts.push_back(x);
            continue;
        }
        any_alive = true;
        for (std::size_t y = 0; y < data.n_y(); ++y) {
            const double m = (1.0 - lambda) * data.pyx[x][y] + lambda * pi_k.pyx[x][y];
            out.policy.pyx[x][y] = (R[x][y] > tau) ? m / mass : 0.0;
        }
    }
    if (!any_alive) {
        throw std::runtime_error("exact_improve: threshold kills every context");
    }
    return out;
}

inline double expected_reward(const TabularPolicy& pi, const std::vector<double>& px,
                              const RewardTable& R) {
    double v = 0;
    for (std::size_t x = 0; x < px.size(); ++x) {
        for (std::size_t y = 0; y < pi.pyx[x].size(); ++y) v += px[x] * pi.pyx[x][y] * R[x][y];
    }
    return v;
}

// ---- random instances and the improvement sweep ------------------------------------

struct TabularInstance {
    TabularDistribution data;
    RewardTable rewards;
};

inline TabularInstance random_tabular_instance(std::uint64_t seed, std::size_t n_x,
                                               std::size_t n_y) {
    Rng rng(derive_seed(seed, 0x7AB));
    TabularInstance inst;
    inst.data.px.resize(n_x);
    double sx = 0;
    for (double& p : inst.data.px) {
        p = 0.05 + rng.real();
        sx += p;
    }
    for (double& p : inst.data.px) p /= sx;
    inst.data.pyx.assign(n_x, std::vector<double>(n_y, 0.0));
    inst.rewards.assign(n_x, std::vector<double>(n_y, 0.0));
    for (std::size_t x = 0; x < n_x; ++x) {
        double s = 0;
        for (std::size_t y = 0; y < n_y; ++y) {
            inst.data.pyx[x][y] = 0.02 + rng.real();
            s += inst.data.pyx[x][y];
            inst.rewards[x][y] = rng.real();
        }
        for (std::size_t y = 0; y < n_y; ++y) inst.data.pyx[x][y] /= s;
    }
    return inst;
}

// Largest tau that keeps every context alive: just below the smallest
// per-context maximum reachable reward.
inline double max_viable_tau(const TabularInstance& inst, const TabularPolicy& pi,
                             double lambda) {
    double lo = 1.0;
    for (std::size_t x = 0; x < inst.data.n_x(); ++x) {
        double best = 0.0;
        for (std::size_t y = 0; y < inst.data.n_y(); ++y) {
            const double m =
                (1.0 - lambda) * inst.data.pyx[x][y] + lambda * pi.pyx[x][y];
            if (m > 0) best = std::max(best, inst.rewards[x][y]);
        }
        lo = std::min(lo, best);
    }
    return lo;
}

struct OracleSweepRow {
    std::uint64_t instance_seed = 0;
    int step = 0;
    double tau = 0;
    double value = 0;
};

// Repeated exact improve steps with increasing thresholds on random
// instances; records V after every step. tau_k is placed a fraction of the
// way from V_k to the largest viable threshold.
inline std::vector<OracleSweepRow> oracle_sweep(std::size_t n_instances, int steps,
                                                std::uint64_t seed, double lambda = 0.5,
                                                std::size_t n_x = 3, std::size_t n_y = 20) {
    std::vector<OracleSweepRow> rows;
    for (std::size_t i = 0; i < n_instances; ++i) {
        const std::uint64_t inst_seed = derive_seed(seed, i);
        TabularInstance inst = random_tabular_instance(inst_seed, n_x, n_y);
        TabularPolicy pi = exact_bc_fit(inst.data);
        rows.push_back({inst_seed, 0, 0.0, expected_reward(pi, inst.data.px, inst.rewards)});
        for (int k = 1; k <= steps; ++k) {
            const double v = expected_reward(pi, inst.data.px, inst.rewards);
            const double hi = max_viable_tau(inst, pi, lambda);
            if (!(hi > v)) break;  // no viable threshold above the current value
            const double tau = v + 0.5 * (hi - v);
            pi = exact_improve(pi, inst.data, lambda, tau, inst.rewards).policy;
            rows.push_back({inst_seed, k, tau, expected_reward(pi, inst.data.px, inst.rewards)});
        }
    }
    return rows;
}

inline std::string oracle_sweep_csv(const std::vector<OracleSweepRow>& rows) {
    std::string out = "instance_seed,step,tau,V\n";
    for (const auto& r : rows) {
        std::ostringstream line;
        line << r.instance_seed << "," << r.step << "," << format_reward(r.tau) << ","
             << format_reward(r.value) << "\n";
        out += line.str();
    }
    return out;
}

// ---- gradient decomposition check ---------------------------------------------------
//
// Autodiff gradient of J(theta) = mean_batch F(x,y;tau) * NLL(x,y;theta)
// against the two-term mixture estimator built from per-record gradients:
//   lambda_hat * mean_sampled[F grad NLL] + (1 - lambda_hat) * mean_orig[F grad NLL]
// with lambda_hat the batch's sampled fraction. Returns the max absolute
// elementwise deviation.

template <typename Real>
double gradient_equivalence_check(const Checkpoint<Real>& policy, const Vocab& vocab,
                                  const std::vector<AnnotatedExample>& batch, double tau) {
    if (batch.empty()) throw std::invalid_argument("gradient_equivalence_check: empty batch");

    // route (a): autodiff through the batch objective
    std::vector<Tensor<Real>> grad_a;
    {
        Tape<Real> tape;
        auto params = ModelParams<Real>::put(tape, policy);
        LossEnv<Real> env;  // BC
        auto j = weighted_objective_graph(tape, params, vocab, batch, tau, env);
        tape.backward(j);
        for (auto id : params.leafs) grad_a.push_back(tape.grad(id));
    }

    // route (b): per-record gradients combined by the mixture decomposition
    std::vector<Tensor<Real>> grad_b;
    for (const Tensor<Real>& p : policy.params) grad_b.push_back(Tensor<Real>::zeros(p.shape));
    std::size_t n_sampled = 0;
    for (const auto& e : batch) n_sampled += e.origin == Origin::sampled;
    const double lambda_hat = static_cast<double>(n_sampled) / static_cast<double>(batch.size());

    auto accumulate_group = [&](Origin origin, double weight, std::size_t group_size) {
        if (group_size == 0 || weight == 0.0) return;
        for (const auto& e : batch) {
            if (e.origin != origin) continue;
            if (!(e.reward > tau)) continue;  // F = 0: contributes nothing
            Tape<Real> tape;
            auto params = ModelParams<Real>::put(tape, policy);
            auto lp = detail::example_logprobs(tape, params, vocab, e);
            auto nll = tape.scale(tape.sum_all(lp), Real(-1));
            tape.backward(nll);
            const double c = weight / static_cast<double>(group_size);
            for (std::size_t t = 0; t < grad_b.size(); ++t) {
                const Tensor<Real>& g = tape.grad(params.leafs[t]);
                for (std::size_t k = 0; k < g.data.size(); ++k)
                    grad_b[t].data[k] += static_cast<Real>(c) * g.data[k];
            }
        }
    };
    accumulate_group(Origin::sampled, lambda_hat, n_sampled);
    accumulate_group(Origin::original, 1.0 - lambda_hat, batch.size() - n_sampled);

    double max_dev = 0;
    for (std::size_t t = 0; t < grad_a.size(); ++t) {
        for (std::size_t k = 0; k < grad_a[t].data.size(); ++k) {
            max_dev = std::max(max_dev, std::abs(static_cast<double>(grad_a[t].data[k]) -
                                                 static_cast<double>(grad_b[t].data[k])));
        }
    }
    return max_dev;
}

}  // namespace rest
