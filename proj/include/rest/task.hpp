#pragma once

// The synthetic cipher-reverse task standing in for translation: the gold
// output reverses the source and shifts every letter one step through the
// alphabet (cyclic). The reward is a normalized edit-distance similarity in
// [0,1], so it penalizes repetitions and permutations, and the reference
// generator can inject substitution noise so references are imperfect.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/mdp.hpp"
#include "rest/rng.hpp"

namespace rest {

struct TaskSpec {
    std::string alphabet = "abcdefghij";
    int shift = 1;              // cyclic letter shift applied after reversal
    std::size_t min_len = 3;
    std::size_t max_len = 12;   // source length range, inclusive
    double p_noise = 0.1;       // per-token reference corruption probability

    void validate() const {
        for (std::size_t i = 0; i < alphabet.size(); ++i)
            for (std::size_t j = i + 1; j < alphabet.size(); ++j)
                if (alphabet[i] == alphabet[j])
                    throw std::invalid_argument("task: alphabet letters must be distinct");
        if (p_noise < 0.0 || p_noise >= 1.0)
            throw std::invalid_argument("task: p_noise must be in [0,1)");
        if (min_len < 1 || min_len > max_len)
            throw std::invalid_argument("task: bad length range");
    }

    Vocab vocab() const { return Vocab::letters(alphabet); }
};

inline std::string gold_target(const std::string& x, const TaskSpec& spec = TaskSpec{}) {
    const std::size_t n = spec.alphabet.size();
    std::string y;
    y.reserve(x.size());
    for (std::size_t i = x.size(); i-- > 0;) {
        const std::size_t pos = spec.alphabet.find(x[i]);
        if (pos == std::string::npos) {
            throw std::invalid_argument(std::string("gold_target: token '") + x[i] +
                                        "' outside task alphabet");
        }
        y += spec.alphabet[(pos + static_cast<std::size_t>(spec.shift)) % n];
    }
    return y;
}

inline std::string gold_source(const std::string& y, const TaskSpec& spec = TaskSpec{}) {
    const std::size_t n = spec.alphabet.size();
    std::string x;
    x.reserve(y.size());
    for (std::size_t i = y.size(); i-- > 0;) {
        const std::size_t pos = spec.alphabet.find(y[i]);
        if (pos == std::string::npos) {
            throw std::invalid_argument(std::string("gold_source: token '") + y[i] +
                                        "' outside task alphabet");
        }
        x += spec.alphabet[(pos + n - static_cast<std::size_t>(spec.shift)) % n];
    }
    return x;
}

inline std::size_t levenshtein(const std::string& a, const std::string& b) {
    const std::size_t m = a.size(), n = b.size();
    std::vector<std::size_t> dp(n + 1);
    for (std::size_t j = 0; j <= n; ++j) dp[j] = j;
    for (std::size_t i = 1; i <= m; ++i) {
        std::size_t prev = dp[0];
        dp[0] = i;
        for (std::size_t j = 1; j <= n; ++j) {
            const std::size_t cur = dp[j];
            dp[j] = std::min({dp[j] + 1, dp[j - 1] + 1, prev + (a[i - 1] != b[j - 1] ? 1u : 0u)});
            prev = cur;
        }
    }
    return dp[n];
}

// score = 1 - lev(y, y*) / max(|y|, |y*|), clamped to [0,1]; equals 1 iff y = y*.
inline double reward(const std::string& x, const std::string& y, const TaskSpec& spec = TaskSpec{}) {
    const std::string gold = gold_target(x, spec);
    const std::size_t denom = std::max(y.size(), gold.size());
    if (denom == 0) return 1.0;  // empty source, empty output
    double r = 1.0 - static_cast<double>(levenshtein(y, gold)) / static_cast<double>(denom);
    return std::clamp(r, 0.0, 1.0);
}

using RewardFn = std::function<double(const std::string& x, const std::string& y)>;

inline RewardFn make_reward_fn(const TaskSpec& spec) {
    return [spec](const std::string& x, const std::string& y) { return reward(x, y, spec); };
}

struct SourceReference {
    std::string source;
    std::string reference;
};

// References are gold targets with independent per-token substitution noise:
// with probability p_noise a letter is replaced by a uniformly chosen
// different letter. Deterministic for a fixed seed; each example draws from
// its own derived stream so generation parallelizes cleanly.
inline std::vector<SourceReference> make_dataset(std::size_t n, const TaskSpec& spec,
                                                 std::uint64_t seed) {
    spec.validate();
    if (n < 1) throw std::invalid_argument("make_dataset: n must be >= 1");
    const std::size_t letters = spec.alphabet.size();
    std::vector<SourceReference> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        const std::size_t len =
            spec.min_len + rng.index(spec.max_len - spec.min_len + 1);
        std::string x;
        x.reserve(len);
        for (std::size_t k = 0; k < len; ++k) x += spec.alphabet[rng.index(letters)];
        std::string ref = gold_target(x, spec);
        for (char& c : ref) {
            if (rng.real() < spec.p_noise) {
                const std::size_t pos = spec.alphabet.find(c);
                std::size_t repl = rng.index(letters - 1);
                if (repl >= pos) ++repl;  // uniform over the other letters
                c = spec.alphabet[repl];
            }
        }
        out[i] = {std::move(x), std::move(ref)};
    }
    return out;
}

// Hand-crafted behavioral checks on a reward function: repetition must hurt,
// permutations of a correct output must never score as high as the original,
// and scores must stay inside [0,1].
struct RewardSanityReport {
    bool repetition_pass = false;
    bool permutation_pass = false;
    bool bounds_pass = false;
    std::vector<std::string> failures;

    bool all_pass() const { return repetition_pass && permutation_pass && bounds_pass; }
};

inline RewardSanityReport reward_sanity_suite(const RewardFn& fn,
                                              const TaskSpec& spec = TaskSpec{},
                                              std::uint64_t seed = 0x5eed) {
    RewardSanityReport report;
    Rng rng(seed);
    const std::size_t letters = spec.alphabet.size();
    auto random_string = [&](std::size_t lo, std::size_t hi) {
        std::size_t len = lo + rng.index(hi - lo + 1);
        std::string s;
        for (std::size_t k = 0; k < len; ++k) s += spec.alphabet[rng.index(letters)];
        return s;
    };

    // (a) repetition: doubling a correct output must strictly lower its score
    report.repetition_pass = true;
    for (int trial = 0; trial < 50; ++trial) {
        const std::string x = random_string(spec.min_len, spec.max_len);
        const std::string gold = gold_target(x, spec);
        if (!(fn(x, gold + gold) < fn(x, gold))) {
            report.repetition_pass = false;
            report.failures.push_back("repetition: reward(x, y*y*) >= reward(x, y*) for x=" + x);
            break;
        }
    }

    // (b) permutation: shuffling a correct output of length >= 3 never raises the score
    report.permutation_pass = true;
    for (int trial = 0; trial < 50 && report.permutation_pass; ++trial) {
        const std::string x = random_string(std::max<std::size_t>(3, spec.min_len), spec.max_len);
        const std::string gold = gold_target(x, spec);
        const double base = fn(x, gold);
        std::string perm = gold;
        for (int shuffle = 0; shuffle < 6; ++shuffle) {
            rng.shuffle(perm);
            if (perm == gold) continue;
            if (fn(x, perm) >= base) {
                report.permutation_pass = false;
                report.failures.push_back("permutation: reward(x, perm) >= reward(x, y*) for x=" +
                                          x + " perm=" + perm);
                break;
            }
        }
    }

    // (c) bounds on 1000 random pairs
    report.bounds_pass = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::string x = random_string(spec.min_len, spec.max_len);
        const std::string y = random_string(0, spec.max_len + 2);
        const double r = fn(x, y);
        if (!(r >= 0.0 && r <= 1.0)) {
            report.bounds_pass = false;
            report.failures.push_back("bounds: reward outside [0,1] for x=" + x + " y=" + y);
            break;
        }
    }
    return report;
}

}  // namespace rest
