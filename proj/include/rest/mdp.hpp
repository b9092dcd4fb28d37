#pragma once

// MDP view of conditional generation: states are (source, partial output),
// actions are tokens, the transition appends the chosen token, and the
// reward arrives only at end-of-sequence. All types are immutable values.

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rest/tensor.hpp"

namespace rest {

using TokenSeq = std::vector<int>;

struct MdpError : std::runtime_error {
    explicit MdpError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token table: PAD, BOS, EOS first, then the task letters, ids dense from 0.
struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;
    int pad = 0;
    int bos = 1;
    int eos = 2;

    static Vocab letters(const std::string& alphabet) {
        Vocab v;
        v.tokens = {"<pad>", "<bos>", "<eos>"};
        for (char c : alphabet) v.tokens.push_back(std::string(1, c));
        for (std::size_t i = 0; i < v.tokens.size(); ++i) v.ids[v.tokens[i]] = static_cast<int>(i);
        return v;
    }

    int size() const { return static_cast<int>(tokens.size()); }
    int first_letter() const { return 3; }
    int num_letters() const { return size() - 3; }

    int letter_id(char c) const {
        auto it = ids.find(std::string(1, c));
        if (it == ids.end()) throw MdpError(std::string("vocab: unknown token '") + c + "'");
        return it->second;
    }

    TokenSeq encode(const std::string& s) const {
        TokenSeq out;
        out.reserve(s.size());
        for (char c : s) out.push_back(letter_id(c));
        return out;
    }

    // Letters only; PAD/BOS/EOS are dropped.
    std::string decode(const TokenSeq& ts) const {
        std::string out;
        for (int t : ts) {
            if (t >= first_letter() && t < size()) out += tokens[static_cast<std::size_t>(t)];
        }
        return out;
    }
};

struct State {
    TokenSeq source;
    TokenSeq output;  // partial; never extends past an EOS
};

struct Episode {
    TokenSeq source;
    TokenSeq output;  // complete: ends with EOS or has max length
    double reward = 0;
};

inline bool is_terminal(const State& s, const Vocab& vocab, std::size_t max_len) {
    if (!s.output.empty() && s.output.back() == vocab.eos) return true;
    return s.output.size() >= max_len;
}

inline State transition(const State& s, int action, const Vocab& vocab, std::size_t max_len) {
    if (is_terminal(s, vocab, max_len)) {
        throw MdpError("transition: state is terminal (output length " +
                       std::to_string(s.output.size()) + ")");
    }
    State next = s;
    next.output.push_back(action);
    return next;
}

// Zero everywhere except the final step, which carries the terminal reward.
inline std::vector<double> step_rewards(const Episode& e, const Vocab& vocab,
                                        std::size_t max_len) {
    State s{e.source, e.output};
    if (!is_terminal(s, vocab, max_len)) {
        throw MdpError("step_rewards: episode is not terminal");
    }
    std::vector<double> r(e.output.size(), 0.0);
    if (!r.empty()) r.back() = e.reward;
    return r;
}

// Discounted return-to-go at each step: G_t = gamma^(T-t) * r for the
// end-of-sequence reward, matching step_rewards summation.
inline std::vector<double> returns_to_go(const Episode& e, const Vocab& vocab,
                                         std::size_t max_len, double gamma) {
    std::vector<double> r = step_rewards(e, vocab, max_len);
    std::vector<double> g(r.size(), 0.0);
    double acc = 0;
    for (std::size_t i = r.size(); i-- > 0;) {
        acc = r[i] + gamma * acc;
        g[i] = acc;
    }
    return g;
}

}  // namespace rest
