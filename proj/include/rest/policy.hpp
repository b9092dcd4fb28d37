#pragma once

// Autoregressive policy built on the transformer core: teacher-forced
// log-probabilities, tempered-softmax ancestral sampling and greedy
// decoding. A PolicySession owns a tape and caches the encoder pass for the
// current source, so drawing many samples per context re-runs only the
// decoder; sessions are single-worker objects.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/mdp.hpp"
#include "rest/model.hpp"
#include "rest/rng.hpp"
#include "rest/tape.hpp"

namespace rest {

using PolicyConfig = ModelConfig;

template <typename Real>
using PolicyCheckpoint = Checkpoint<Real>;

template <typename Real>
PolicyCheckpoint<Real> init_policy(const PolicyConfig& cfg, std::uint64_t seed) {
    if (cfg.out_dim != cfg.vocab) {
        throw std::invalid_argument("init_policy: out_dim must equal vocab size");
    }
    return init_model<Real>(cfg, seed);
}

struct LogProbResult {
    std::vector<double> per_token;
    double total = 0;
};

namespace detail {

inline void check_output_form(const TokenSeq& y, const Vocab& vocab, std::size_t max_out,
                              int vocab_size) {
    if (y.empty()) throw std::invalid_argument("log_prob: output must contain at least EOS");
    if (y.size() > max_out) {
        throw std::invalid_argument("log_prob: output length " + std::to_string(y.size()) +
                                    " exceeds max " + std::to_string(max_out));
    }
    for (int t : y) {
        if (t < 0 || t >= vocab_size) {
            throw std::invalid_argument("log_prob: token id " + std::to_string(t) +
                                        " outside vocab of size " + std::to_string(vocab_size));
        }
    }
    if (y.back() != vocab.eos && y.size() != max_out) {
        throw std::invalid_argument("log_prob: output must end with EOS or have max length");
    }
}

}  // namespace detail

// Graph form of the teacher-forced per-token log-probabilities: a [|y|]
// vector node with entries log pi(y_t | y_{1:t-1}, x). Shared by the losses.
template <typename Real>
typename Tape<Real>::NodeId logprob_graph(Tape<Real>& tape, const ModelParams<Real>& params,
                                          const Vocab& vocab,
                                          typename Tape<Real>::NodeId enc_out,
                                          const TokenSeq& y) {
    detail::check_output_form(y, vocab, static_cast<std::size_t>(params.config->max_out),
                              params.config->vocab);
    TokenSeq dec_in(y.size());
    dec_in[0] = vocab.bos;
    for (std::size_t t = 1; t < y.size(); ++t) dec_in[t] = y[t - 1];
    auto logits = decode(tape, params, enc_out, dec_in);
    auto logp = tape.log_softmax_rows(logits);
    std::vector<std::pair<std::size_t, std::size_t>> entries(y.size());
    for (std::size_t t = 0; t < y.size(); ++t)
        entries[t] = {t, static_cast<std::size_t>(y[t])};
    return tape.pick(logp, std::move(entries));
}

template <typename Real>
class PolicySession {
public:
    using NodeId = typename Tape<Real>::NodeId;

    PolicySession(const PolicyCheckpoint<Real>& ckpt, const Vocab& vocab)
        : ckpt_(&ckpt), vocab_(&vocab) {
        reset();
    }

    const PolicyCheckpoint<Real>& checkpoint() const { return *ckpt_; }
    const Vocab& vocab() const { return *vocab_; }

    LogProbResult log_prob(const TokenSeq& x, const TokenSeq& y) {
        NodeId enc = encoder(x);
        NodeId lp = logprob_graph(tape_, params_, *vocab_, enc, y);
        const Tensor<Real>& v = tape_.value(lp);
        LogProbResult out;
        out.per_token.reserve(v.numel());
        for (Real t : v.data) {
            out.per_token.push_back(static_cast<double>(t));
            out.total += static_cast<double>(t);
        }
        return out;
    }

    TokenSeq sample(const TokenSeq& x, double temperature, std::size_t max_len, Rng& rng) {
        if (temperature <= 0) throw std::invalid_argument("sample: temperature must be > 0");
        return generate(x, max_len, [&](const std::vector<double>& logits) {
            return draw_tempered(logits, temperature, rng);
        });
    }

    TokenSeq greedy(const TokenSeq& x, std::size_t max_len) {
        return generate(x, max_len, [&](const std::vector<double>& logits) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < logits.size(); ++j)
                if (logits[j] > logits[best]) best = j;  // ties keep the lowest id
            return static_cast<int>(best);
        });
    }

    // Next-token distribution at the current prefix (tempered), for tests.
    std::vector<double> step_distribution(const TokenSeq& x, const TokenSeq& prefix,
                                          double temperature) {
        NodeId enc = encoder(x);
        TokenSeq dec_in;
        dec_in.push_back(vocab_->bos);
        dec_in.insert(dec_in.end(), prefix.begin(), prefix.end());
        auto logits = last_logits(enc, dec_in);
        return tempered_probs(logits, temperature);
    }

private:
    const PolicyCheckpoint<Real>* ckpt_;
    const Vocab* vocab_;
    Tape<Real> tape_;
    ModelParams<Real> params_;
    TokenSeq cached_src_;
    NodeId enc_out_ = 0;
    bool has_enc_ = false;

    void reset() {
        tape_.clear();
        params_ = ModelParams<Real>::put(tape_, *ckpt_);
        has_enc_ = false;
    }

    NodeId encoder(const TokenSeq& x) {
        if (has_enc_ && x == cached_src_) return enc_out_;
        if (tape_.size() > 20000) reset();  // bound session memory
        enc_out_ = encode(tape_, params_, x);
        cached_src_ = x;
        has_enc_ = true;
        return enc_out_;
    }

    std::vector<double> last_logits(NodeId enc, const TokenSeq& dec_in) {
        auto logits = decode(tape_, params_, enc, dec_in);
        const Tensor<Real>& v = tape_.value(logits);
        const std::size_t t = v.shape[0] - 1;
        std::vector<double> row(v.shape[1]);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<double>(v.at(t, j));
        return row;
    }

    template <typename Chooser>
    TokenSeq generate(const TokenSeq& x, std::size_t max_len, Chooser&& choose) {
        NodeId enc = encoder(x);
        TokenSeq y;
        TokenSeq dec_in;
        dec_in.push_back(vocab_->bos);
        while (y.size() < max_len) {
            const int tok = choose(last_logits(enc, dec_in));
            y.push_back(tok);
            if (tok == vocab_->eos) break;
            dec_in.push_back(tok);
        }
        return y;
    }

    static std::vector<double> tempered_probs(const std::vector<double>& logits,
                                              double temperature) {
        std::vector<double> p(logits.size());
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double sum = 0;
        for (std::size_t j = 0; j < logits.size(); ++j) {
            p[j] = std::exp((logits[j] - mx) / temperature);
            sum += p[j];
        }
        for (double& v : p) v /= sum;
        return p;
    }

    static int draw_tempered(const std::vector<double>& logits, double temperature, Rng& rng) {
        const std::vector<double> p = tempered_probs(logits, temperature);
        const double u = rng.real();
        double acc = 0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            acc += p[j];
            if (u < acc) return static_cast<int>(j);
        }
        return static_cast<int>(p.size() - 1);
    }
};

// One-shot conveniences; tests and small callers use these, hot loops hold a
// session.

template <typename Real>
LogProbResult log_prob(const PolicyCheckpoint<Real>& policy, const Vocab& vocab,
                       const TokenSeq& x, const TokenSeq& y) {
    PolicySession<Real> s(policy, vocab);
    return s.log_prob(x, y);
}

template <typename Real>
TokenSeq sample(const PolicyCheckpoint<Real>& policy, const Vocab& vocab, const TokenSeq& x,
                double temperature, std::size_t max_len, Rng& rng) {
    PolicySession<Real> s(policy, vocab);
    return s.sample(x, temperature, max_len, rng);
}

template <typename Real>
TokenSeq decode_greedy(const PolicyCheckpoint<Real>& policy, const Vocab& vocab,
                       const TokenSeq& x, std::size_t max_len) {
    PolicySession<Real> s(policy, vocab);
    return s.greedy(x, max_len);
}

}  // namespace rest
