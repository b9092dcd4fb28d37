#pragma once

// Training objectives for the Improve step: behavioral-cloning NLL, the
// filtered reward-weighted wrapper, GOLD (truncated-return-weighted NLL with
// floored detached token probabilities), BVMPO (advantage-softmax-weighted
// NLL over the top-half records plus an annealed KL to the cloning prior),
// and an offline actor-critic loss on per-token advantages. Advantage and
// weight terms are computed from values on the tape and re-enter the graph
// as constants, so they never receive gradient.
//
// The value side is behavior value estimation: the same encoder-decoder
// with a scalar head, regressed per position onto Monte Carlo discounted
// returns.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/grow.hpp"
#include "rest/mdp.hpp"
#include "rest/model.hpp"
#include "rest/optim.hpp"
#include "rest/policy.hpp"
#include "rest/rng.hpp"
#include "rest/tape.hpp"

namespace rest {

struct LossSpec {
    enum class Kind { bc, gold, bvmpo, oac };
    Kind kind = Kind::bc;

    // gold
    int gold_k = 5;
    double gold_w_min = 0.1;
    // bvmpo
    double eta = 0.5;
    double lambda_start = 1.0;
    double lambda_end = 1e-5;
    // oac / value targets
    double discount = 1.0;

    void validate() const {
        if (gold_k < 1) throw std::invalid_argument("loss spec: gold k must be >= 1");
        if (!(gold_w_min > 0.0 && gold_w_min <= 1.0))
            throw std::invalid_argument("loss spec: gold w_min must be in (0,1]");
        if (eta <= 0.0) throw std::invalid_argument("loss spec: eta must be > 0");
        if (!(lambda_start >= lambda_end && lambda_end > 0.0))
            throw std::invalid_argument("loss spec: lambda anneal must satisfy start >= end > 0");
        if (!(discount > 0.0 && discount <= 1.0))
            throw std::invalid_argument("loss spec: discount must be in (0,1]");
    }

    static const char* name(Kind k) {
        switch (k) {
            case Kind::bc: return "bc";
            case Kind::gold: return "gold";
            case Kind::bvmpo: return "bvmpo";
            case Kind::oac: return "oac";
        }
        return "?";
    }

    static Kind parse(const std::string& s) {
        if (s == "bc") return Kind::bc;
        if (s == "gold") return Kind::gold;
        if (s == "bvmpo") return Kind::bvmpo;
        if (s == "oac") return Kind::oac;
        throw std::invalid_argument("loss spec: unknown loss " + s);
    }
};

template <typename Real>
using ValueNet = Checkpoint<Real>;

template <typename Real>
ValueNet<Real> init_value_net(ModelConfig cfg, std::uint64_t seed) {
    cfg.out_dim = 1;
    return init_model<Real>(cfg, seed);
}

// Everything a loss may need besides the policy parameters. The prior and
// value nets are frozen inputs; lambda_current is the annealed KL weight for
// the current training step.
template <typename Real>
struct LossEnv {
    LossSpec spec;
    const Checkpoint<Real>* bc_prior = nullptr;
    const ValueNet<Real>* value_net = nullptr;
    double lambda_current = 1.0;
    // GOLD token weights are detached probabilities; by default they come
    // from the live policy values at graph-build time. A fixed source pins
    // them instead, which is what a finite-difference check needs.
    const Checkpoint<Real>* gold_weight_source = nullptr;
};

// Top-half selection and softmax weighting of per-sequence advantages:
// records are ordered by advantage (ties keep batch order), the better half
// is kept, and weights psi ~ exp(A/eta) normalized over that half.
inline std::pair<std::vector<std::size_t>, std::vector<double>> bvmpo_weights(
    const std::vector<double>& advantage, double eta) {
    if (eta <= 0.0) throw std::invalid_argument("bvmpo_weights: eta must be > 0");
    const std::size_t n = advantage.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return advantage[a] > advantage[b]; });
    const std::size_t half = (n + 1) / 2;
    std::vector<double> psi(half);
    double mx = -1e300;
    for (std::size_t j = 0; j < half; ++j) mx = std::max(mx, advantage[order[j]] / eta);
    double z = 0;
    for (std::size_t j = 0; j < half; ++j) {
        psi[j] = std::exp(advantage[order[j]] / eta - mx);
        z += psi[j];
    }
    for (double& p : psi) p /= z;
    order.resize(half);
    return {std::move(order), std::move(psi)};
}

// Log-space linear anneal; lambda(0) = start, lambda(budget) = end exactly.
inline double bvmpo_lambda(int step, int budget, double lambda_start, double lambda_end) {
    if (budget <= 0) return lambda_end;
    if (step <= 0) return lambda_start;
    if (step >= budget) return lambda_end;
    const double f = static_cast<double>(step) / static_cast<double>(budget);
    return std::exp(std::log(lambda_start) + f * (std::log(lambda_end) - std::log(lambda_start)));
}

namespace detail {

template <typename Real>
typename Tape<Real>::NodeId example_logprobs(Tape<Real>& tape, const ModelParams<Real>& params,
                                             const Vocab& vocab, const AnnotatedExample& e) {
    auto enc = encode(tape, params, vocab.encode(e.source));
    return logprob_graph(tape, params, vocab, enc,
                         output_tokens(e, vocab, static_cast<std::size_t>(params.config->max_out)));
}

// Frozen-model forward pass used for priors and value nets: runs on its own
// tape with no backward, returns plain numbers.
template <typename Real>
class FrozenModel {
public:
    FrozenModel(const Checkpoint<Real>& ckpt, const Vocab& vocab) : ckpt_(&ckpt), vocab_(&vocab) {
        params_ = ModelParams<Real>::put(tape_, *ckpt_);
    }

    // [T] per-position scalar prediction (value head)
    std::vector<double> values(const AnnotatedExample& e) {
        auto out = forward(e);
        const Tensor<Real>& v = tape_.value(out);
        std::vector<double> r(v.shape[0]);
        for (std::size_t t = 0; t < r.size(); ++t) r[t] = static_cast<double>(v.at(t, 0));
        return r;
    }

    // [T,V] per-position log-distribution (policy head)
    Tensor<double> log_dist(const AnnotatedExample& e) {
        auto out = tape_.log_softmax_rows(forward(e));
        const Tensor<Real>& v = tape_.value(out);
        Tensor<double> r(v.shape);
        for (std::size_t i = 0; i < v.data.size(); ++i) r.data[i] = static_cast<double>(v.data[i]);
        return r;
    }

private:
    const Checkpoint<Real>* ckpt_;
    const Vocab* vocab_;
    Tape<Real> tape_;
    ModelParams<Real> params_;

    typename Tape<Real>::NodeId forward(const AnnotatedExample& e) {
        if (tape_.size() > 20000) {  // bound memory across many records
            tape_.clear();
            params_ = ModelParams<Real>::put(tape_, *ckpt_);
        }
        auto enc = encode(tape_, params_, vocab_->encode(e.source));
        TokenSeq y = output_tokens(e, *vocab_, static_cast<std::size_t>(params_.config->max_out));
        TokenSeq dec_in(y.size());
        dec_in[0] = vocab_->bos;
        for (std::size_t t = 1; t < y.size(); ++t) dec_in[t] = y[t - 1];
        return decode(tape_, params_, enc, dec_in);
    }
};

}  // namespace detail

// Mean over the batch of the per-sequence NLL.
template <typename Real>
typename Tape<Real>::NodeId bc_loss_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                          const Vocab& vocab,
                                          const std::vector<AnnotatedExample>& batch) {
    if (batch.empty()) throw std::invalid_argument("bc_loss: empty batch");
    typename Tape<Real>::NodeId total = 0;
    bool first = true;
    for (const auto& e : batch) {
        auto lp = detail::example_logprobs(tape, params, vocab, e);
        auto s = tape.sum_all(lp);
        total = first ? s : tape.add(total, s);
        first = false;
    }
    return tape.scale(total, Real(-1) / Real(batch.size()));
}

// GOLD: -sum_t max(pi(y_t), w_min) * Q_t * log pi(y_t), Q_t the return over
// the next k steps, probabilities detached and floored. weight_source, when
// given, supplies the detached probabilities from a fixed checkpoint.
template <typename Real>
typename Tape<Real>::NodeId gold_loss_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                            const Vocab& vocab,
                                            const std::vector<AnnotatedExample>& batch, int k,
                                            double w_min,
                                            const Checkpoint<Real>* weight_source = nullptr) {
    if (batch.empty()) throw std::invalid_argument("gold_loss: empty batch");
    if (k < 1) throw std::invalid_argument("gold_loss: k must be >= 1");
    std::unique_ptr<detail::FrozenModel<Real>> frozen;
    if (weight_source) frozen = std::make_unique<detail::FrozenModel<Real>>(*weight_source, vocab);
    const std::size_t max_out = static_cast<std::size_t>(params.config->max_out);
    typename Tape<Real>::NodeId total = 0;
    bool first = true;
    for (const auto& e : batch) {
        auto lp = detail::example_logprobs(tape, params, vocab, e);
        const Tensor<Real>& lpv = tape.value(lp);
        const std::size_t T = lpv.numel();
        std::vector<double> token_prob(T);
        if (frozen) {
            const Tensor<double> dist = frozen->log_dist(e);
            const TokenSeq y = output_tokens(e, vocab, max_out);
            for (std::size_t t = 0; t < T; ++t)
                token_prob[t] = std::exp(dist.at(t, static_cast<std::size_t>(y[t])));
        } else {
            for (std::size_t t = 0; t < T; ++t)
                token_prob[t] = std::exp(static_cast<double>(lpv.data[t]));
        }
        Tensor<Real> coeff(Shape{T});
        for (std::size_t t = 0; t < T; ++t) {
            const double q = (T - 1 - t < static_cast<std::size_t>(k)) ? e.reward : 0.0;
            coeff.data[t] = static_cast<Real>(std::max(token_prob[t], w_min) * q);
        }
        auto s = tape.sum_all(tape.mul(lp, tape.leaf(std::move(coeff))));
        total = first ? s : tape.add(total, s);
        first = false;
    }
    return tape.scale(total, Real(-1) / Real(batch.size()));
}

// Offline actor-critic: -mean over batch of sum_t A_t log pi(y_t) with
// A_t = G_t - V(s_t), advantages constant.
template <typename Real>
typename Tape<Real>::NodeId oac_loss_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                           const Vocab& vocab,
                                           const std::vector<AnnotatedExample>& batch,
                                           const ValueNet<Real>& value_net, double gamma) {
    if (batch.empty()) throw std::invalid_argument("oac_loss: empty batch");
    detail::FrozenModel<Real> vmodel(value_net, vocab);
    const std::size_t max_out = static_cast<std::size_t>(params.config->max_out);
    typename Tape<Real>::NodeId total = 0;
    bool first = true;
    for (const auto& e : batch) {
        auto lp = detail::example_logprobs(tape, params, vocab, e);
        const std::size_t T = tape.value(lp).numel();
        Episode ep{vocab.encode(e.source), output_tokens(e, vocab, max_out), e.reward};
        const std::vector<double> g = returns_to_go(ep, vocab, max_out, gamma);
        const std::vector<double> v = vmodel.values(e);
        Tensor<Real> adv(Shape{T});
        for (std::size_t t = 0; t < T; ++t) adv.data[t] = static_cast<Real>(g[t] - v[t]);
        auto s = tape.sum_all(tape.mul(lp, tape.leaf(std::move(adv))));
        total = first ? s : tape.add(total, s);
        first = false;
    }
    return tape.scale(total, Real(-1) / Real(batch.size()));
}

// BVMPO: softmax(A/eta)-weighted NLL over the top-half-advantage records
// (per-sequence advantage against the terminal-state value), plus
// lambda * KL(prior || policy) averaged per token.
template <typename Real>
typename Tape<Real>::NodeId bvmpo_loss_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                             const Vocab& vocab,
                                             const std::vector<AnnotatedExample>& batch,
                                             const Checkpoint<Real>& bc_prior,
                                             const ValueNet<Real>& value_net, double eta,
                                             double lambda) {
    if (batch.empty()) throw std::invalid_argument("bvmpo_loss: empty batch");
    if (eta <= 0.0) throw std::invalid_argument("bvmpo_loss: eta must be > 0");
    detail::FrozenModel<Real> vmodel(value_net, vocab);
    detail::FrozenModel<Real> prior(bc_prior, vocab);

    const std::size_t n = batch.size();
    std::vector<double> advantage(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> v = vmodel.values(batch[i]);
        advantage[i] = batch[i].reward - v.back();
    }
    auto [order, psi] = bvmpo_weights(advantage, eta);
    const std::size_t half = psi.size();

    typename Tape<Real>::NodeId policy_term = 0;
    bool first = true;
    for (std::size_t j = 0; j < half; ++j) {
        const auto& e = batch[order[j]];
        auto lp = detail::example_logprobs(tape, params, vocab, e);
        auto weighted = tape.scale(tape.sum_all(lp), static_cast<Real>(-psi[j]));
        policy_term = first ? weighted : tape.add(policy_term, weighted);
        first = false;
    }

    // per-token KL(prior || policy) over the whole batch
    typename Tape<Real>::NodeId kl_sum = 0;
    bool kl_first = true;
    std::size_t total_tokens = 0;
    const std::size_t max_out = static_cast<std::size_t>(params.config->max_out);
    for (const auto& e : batch) {
        auto enc = encode(tape, params, vocab.encode(e.source));
        TokenSeq y = output_tokens(e, vocab, max_out);
        TokenSeq dec_in(y.size());
        dec_in[0] = vocab.bos;
        for (std::size_t t = 1; t < y.size(); ++t) dec_in[t] = y[t - 1];
        auto logq = tape.log_softmax_rows(decode(tape, params, enc, dec_in));

        const Tensor<double> logp = prior.log_dist(e);
        Tensor<Real> pprob(logp.shape);
        double entropy_term = 0;  // sum p log p, a constant
        for (std::size_t i = 0; i < logp.data.size(); ++i) {
            const double p = std::exp(logp.data[i]);
            pprob.data[i] = static_cast<Real>(p);
            entropy_term += p * logp.data[i];
        }
        auto cross = tape.sum_all(tape.mul(tape.leaf(std::move(pprob)), logq));
        auto kl_e = tape.sub(tape.leaf(Tensor<Real>::scalar(static_cast<Real>(entropy_term))), cross);
        kl_sum = kl_first ? kl_e : tape.add(kl_sum, kl_e);
        kl_first = false;
        total_tokens += y.size();
    }
    auto kl_mean = tape.scale(kl_sum, Real(1) / Real(total_tokens));
    return tape.add(policy_term, tape.scale(kl_mean, static_cast<Real>(lambda)));
}

template <typename Real>
typename Tape<Real>::NodeId loss_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                       const Vocab& vocab,
                                       const std::vector<AnnotatedExample>& batch,
                                       const LossEnv<Real>& env);

// Reward-weighted wrapper: mean over the batch of F(x,y;tau) * L_i.
// Records failing the filter contribute exactly zero loss and zero gradient.
template <typename Real>
typename Tape<Real>::NodeId weighted_objective_graph(Tape<Real>& tape,
                                                     const ModelParams<Real>& params,
                                                     const Vocab& vocab,
                                                     const std::vector<AnnotatedExample>& batch,
                                                     double tau, const LossEnv<Real>& env) {
    if (batch.empty()) throw std::invalid_argument("weighted_objective: empty batch");
    std::vector<AnnotatedExample> passing;
    for (const auto& e : batch) {
        if (!e.annotated())
            throw std::invalid_argument("weighted_objective: unannotated record for source " +
                                        e.source);
        if (e.reward > tau) passing.push_back(e);
    }
    if (passing.empty()) return tape.leaf(Tensor<Real>::scalar(Real(0)));
    auto mean_passing = loss_graph(tape, params, vocab, passing, env);
    // rescale from mean-over-passing to mean-over-batch
    return tape.scale(mean_passing,
                      Real(passing.size()) / Real(batch.size()));
}

// Dispatch on the loss kind.
template <typename Real>
typename Tape<Real>::NodeId loss_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                       const Vocab& vocab,
                                       const std::vector<AnnotatedExample>& batch,
                                       const LossEnv<Real>& env) {
    env.spec.validate();
    switch (env.spec.kind) {
        case LossSpec::Kind::bc:
            return bc_loss_graph(tape, params, vocab, batch);
        case LossSpec::Kind::gold:
            return gold_loss_graph(tape, params, vocab, batch, env.spec.gold_k,
                                   env.spec.gold_w_min, env.gold_weight_source);
        case LossSpec::Kind::oac:
            if (!env.value_net) throw std::invalid_argument("oac loss requires a value net");
            return oac_loss_graph(tape, params, vocab, batch, *env.value_net, env.spec.discount);
        case LossSpec::Kind::bvmpo:
            if (!env.value_net || !env.bc_prior)
                throw std::invalid_argument("bvmpo loss requires a value net and a BC prior");
            return bvmpo_loss_graph(tape, params, vocab, batch, *env.bc_prior, *env.value_net,
                                    env.spec.eta, env.lambda_current);
    }
    throw std::invalid_argument("loss_graph: unknown loss kind");
}

// Scalar convenience for tests.
template <typename Real>
double loss_value(const Checkpoint<Real>& policy, const Vocab& vocab,
                  const std::vector<AnnotatedExample>& batch, const LossEnv<Real>& env) {
    Tape<Real> tape;
    auto params = ModelParams<Real>::put(tape, policy);
    return static_cast<double>(tape.value(loss_graph(tape, params, vocab, batch, env)).item());
}

template <typename Real>
double bc_loss(const Checkpoint<Real>& policy, const Vocab& vocab,
               const std::vector<AnnotatedExample>& batch) {
    LossEnv<Real> env;
    return loss_value(policy, vocab, batch, env);
}

template <typename Real>
double weighted_objective(const Checkpoint<Real>& policy, const Vocab& vocab,
                          const std::vector<AnnotatedExample>& batch, double tau,
                          const LossEnv<Real>& env) {
    Tape<Real> tape;
    auto params = ModelParams<Real>::put(tape, policy);
    return static_cast<double>(
        tape.value(weighted_objective_graph(tape, params, vocab, batch, tau, env)).item());
}

// ---- behavior value estimation -------------------------------------------------

template <typename Real>
struct BveReport {
    double initial_loss = 0;
    double final_loss = 0;
    int steps = 0;
};

// Per-position values of a frozen value net for one record.
template <typename Real>
std::vector<double> value_predictions(const ValueNet<Real>& vnet, const Vocab& vocab,
                                      const AnnotatedExample& e) {
    detail::FrozenModel<Real> m(vnet, vocab);
    return m.values(e);
}

// Squared-error regression of V(s_t) onto G_t = gamma^(T-t) r at every
// position, minibatch Adam over the whole dataset.
template <typename Real>
BveReport<Real> train_value_bve(ValueNet<Real>& vnet, const Vocab& vocab, const GrowDataset& ds,
                                double gamma, int budget, std::uint64_t seed,
                                int batch_size = 32, double lr = 0.005) {
    if (ds.examples.empty()) throw std::invalid_argument("train_value_bve: empty dataset");
    auto opt = Optimizer<Real>::adam(static_cast<Real>(lr));
    Rng rng(derive_seed(seed, 0xB7E));
    std::vector<std::size_t> order(ds.examples.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::size_t cursor = 0;

    BveReport<Real> report;
    for (int step = 0; step < budget; ++step) {
        std::vector<AnnotatedExample> batch;
        for (int b = 0; b < batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(ds.examples[order[cursor++]]);
        }
        Tape<Real> tape;
        auto params = ModelParams<Real>::put(tape, vnet);
        typename Tape<Real>::NodeId total = 0;
        bool first = true;
        std::size_t n_positions = 0;
        for (const auto& e : batch) {
            auto enc = encode(tape, params, vocab.encode(e.source));
            TokenSeq y = output_tokens(e, vocab, ds.max_out);
            TokenSeq dec_in(y.size());
            dec_in[0] = vocab.bos;
            for (std::size_t t = 1; t < y.size(); ++t) dec_in[t] = y[t - 1];
            auto v = decode(tape, params, enc, dec_in);  // [T,1]
            Episode ep{vocab.encode(e.source), y, e.reward};
            const std::vector<double> g = returns_to_go(ep, vocab, ds.max_out, gamma);
            Tensor<Real> target(Shape{y.size(), 1});
            for (std::size_t t = 0; t < y.size(); ++t) target.data[t] = static_cast<Real>(g[t]);
            auto diff = tape.sub(v, tape.leaf(std::move(target)));
            auto sq = tape.sum_all(tape.mul(diff, diff));
            total = first ? sq : tape.add(total, sq);
            first = false;
            n_positions += y.size();
        }
        auto loss = tape.scale(total, Real(1) / Real(n_positions));
        const double loss_val = static_cast<double>(tape.value(loss).item());
        if (step == 0) report.initial_loss = loss_val;
        report.final_loss = loss_val;
        if (std::isnan(loss_val)) throw std::runtime_error("train_value_bve: NaN loss at step " +
                                                           std::to_string(step));
        tape.backward(loss);
        std::vector<Tensor<Real>> grads;
        grads.reserve(vnet.params.size());
        for (auto id : params.leafs) grads.push_back(tape.grad(id));
        opt.step(vnet.params, grads);
        ++report.steps;
    }
    return report;
}

// ---- rank-correlation diagnostics ------------------------------------------------

struct ValueDiagnostics {
    double kendall_tau = 0;
    double spearman = 0;
    bool degenerate = false;  // constant predictions
    std::size_t n = 0;
};

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double num = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0 || vb == 0) return 0;
    return num / std::sqrt(va * vb);
}

// Kendall tau-b (tie-corrected), quadratic scan.
inline double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    long long concordant = 0, discordant = 0, tx = 0, ty = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0 && dy == 0) continue;
            if (dx == 0) { ++tx; continue; }
            if (dy == 0) { ++ty; continue; }
            if ((dx > 0) == (dy > 0)) ++concordant;
            else ++discordant;
        }
    }
    const double cd = static_cast<double>(concordant + discordant);
    const double denom = std::sqrt((cd + static_cast<double>(tx)) * (cd + static_cast<double>(ty)));
    if (denom == 0) return 0;
    return (static_cast<double>(concordant) - static_cast<double>(discordant)) / denom;
}

}  // namespace detail

inline ValueDiagnostics rank_correlations(const std::vector<double>& pred,
                                          const std::vector<double>& actual) {
    ValueDiagnostics d;
    d.n = pred.size();
    bool constant = true;
    for (std::size_t i = 1; i < pred.size(); ++i)
        if (pred[i] != pred[0]) constant = false;
    if (constant) {
        d.degenerate = true;
        return d;
    }
    d.kendall_tau = detail::kendall_tau_b(pred, actual);
    d.spearman = detail::pearson(detail::average_ranks(pred), detail::average_ranks(actual));
    return d;
}

// Rank correlations between V(terminal prefix state) and the annotated
// rewards. Quadratic Kendall scan, so datasets beyond 5000 records are
// strided down deterministically.
template <typename Real>
ValueDiagnostics value_diagnostics(const ValueNet<Real>& vnet, const Vocab& vocab,
                                   const GrowDataset& ds) {
    const std::size_t cap = 5000;
    const std::size_t stride = ds.examples.size() > cap ? (ds.examples.size() + cap - 1) / cap : 1;
    std::vector<double> pred, actual;
    detail::FrozenModel<Real> m(vnet, vocab);
    for (std::size_t i = 0; i < ds.examples.size(); i += stride) {
        pred.push_back(m.values(ds.examples[i]).back());
        actual.push_back(ds.examples[i].reward);
    }
    return rank_correlations(pred, actual);
}

}  // namespace rest
