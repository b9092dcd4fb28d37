#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "rest/task.hpp"

using rest::TaskSpec;

namespace {

// Independent edit-distance oracle: plain recursive definition with
// memoization, distinct from the rolling-array DP in the library.
std::size_t lev_oracle(const std::string& a, const std::string& b) {
    std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
    std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i,
                                                                  std::size_t j) -> std::size_t {
        if (i == 0) return j;
        if (j == 0) return i;
        int& m = memo[i][j];
        if (m >= 0) return static_cast<std::size_t>(m);
        std::size_t best = std::min(go(i - 1, j), go(i, j - 1)) + 1;
        best = std::min(best, go(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1));
        m = static_cast<int>(best);
        return best;
    };
    return go(a.size(), b.size());
}

}  // namespace

TEST_CASE("gold target reverses then shifts cyclically") {
    REQUIRE(rest::gold_target("abc") == "dcb");
    REQUIRE(rest::gold_target("j") == "a");
    REQUIRE_THROWS_AS(rest::gold_target("ax?"), std::invalid_argument);
}

TEST_CASE("gold target and gold source are inverse bijections") {
    rest::Rng rng(11);
    const TaskSpec spec;
    for (int trial = 0; trial < 200; ++trial) {
        std::string y;
        const std::size_t len = 1 + rng.index(12);
        for (std::size_t i = 0; i < len; ++i) y += spec.alphabet[rng.index(10)];
        REQUIRE(rest::gold_target(rest::gold_source(y)) == y);
    }
}

TEST_CASE("reward arithmetic on hand-checked cases") {
    REQUIRE(rest::reward("abc", "dcb") == 1.0);
    REQUIRE(rest::reward("abc", "") == 0.0);
    REQUIRE(rest::reward("abc", "dcc") == Catch::Approx(1.0 - 1.0 / 3.0));
}

TEST_CASE("library edit distance agrees with the recursive oracle") {
    rest::Rng rng(12);
    const std::string letters = "abcde";
    for (int trial = 0; trial < 300; ++trial) {
        std::string a, b;
        for (std::size_t i = rng.index(9); i-- > 0;) a += letters[rng.index(5)];
        for (std::size_t i = rng.index(9); i-- > 0;) b += letters[rng.index(5)];
        REQUIRE(rest::levenshtein(a, b) == lev_oracle(a, b));
    }
}

TEST_CASE("noise-free datasets have perfect references") {
    TaskSpec spec;
    spec.p_noise = 0.0;
    auto data = rest::make_dataset(200, spec, 7);
    REQUIRE(data.size() == 200);
    for (const auto& d : data) {
        REQUIRE(rest::reward(d.source, d.reference, spec) == 1.0);
        REQUIRE(d.source.size() >= spec.min_len);
        REQUIRE(d.source.size() <= spec.max_len);
    }
}

TEST_CASE("mean reference reward matches the Monte Carlo expectation") {
    // expectation 0.9000 frozen from a 10^6-sample Monte Carlo run of the
    // corruption process (uniform lengths 3..12, p_noise 0.1, substitution
    // with a uniformly chosen different letter)
    TaskSpec spec;
    auto data = rest::make_dataset(2000, spec, 99);
    double mean = 0;
    for (const auto& d : data) mean += rest::reward(d.source, d.reference, spec);
    mean /= static_cast<double>(data.size());
    REQUIRE(mean == Catch::Approx(0.9000).margin(0.02));
}

TEST_CASE("dataset generation is deterministic in the seed") {
    TaskSpec spec;
    auto a = rest::make_dataset(100, spec, 5);
    auto b = rest::make_dataset(100, spec, 5);
    auto c = rest::make_dataset(100, spec, 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].source == b[i].source);
        REQUIRE(a[i].reference == b[i].reference);
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].source != c[i].source) any_diff = true;
    REQUIRE(any_diff);
}

TEST_CASE("reward sanity suite passes for the edit-distance reward") {
    TaskSpec spec;
    auto report = rest::reward_sanity_suite(rest::make_reward_fn(spec), spec);
    REQUIRE(report.repetition_pass);
    REQUIRE(report.permutation_pass);
    REQUIRE(report.bounds_pass);
    REQUIRE(report.all_pass());
}

TEST_CASE("repetition arithmetic: doubled output scores exactly one half") {
    REQUIRE(rest::reward("abc", "dcbdcb") == Catch::Approx(0.5));
}

TEST_CASE("all permutations of a correct output score strictly below one") {
    std::string perm = "bcd";
    std::sort(perm.begin(), perm.end());
    do {
        if (perm == "dcb") continue;
        REQUIRE(rest::reward("abc", perm) < 1.0);
    } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST_CASE("constant reward fails the repetition check") {
    auto fake = [](const std::string&, const std::string&) { return 1.0; };
    auto report = rest::reward_sanity_suite(fake);
    REQUIRE_FALSE(report.repetition_pass);
    REQUIRE_FALSE(report.all_pass());
    REQUIRE_FALSE(report.failures.empty());
}

TEST_CASE("reward is uniquely maximized by the gold target (exhaustive small alphabet)") {
    TaskSpec spec;
    spec.alphabet = "abc";
    spec.min_len = 1;
    spec.max_len = 4;
    // all sources up to length 4, all outputs up to length 5
    std::vector<std::string> sources{""};
    std::vector<std::string> outputs{""};
    for (int len = 0; len < 5; ++len) {
        std::size_t start = 0, end = outputs.size();
        for (std::size_t i = start; i < end; ++i) {
            if (outputs[i].size() == static_cast<std::size_t>(len)) {
                for (char c : spec.alphabet) outputs.push_back(outputs[i] + c);
            }
        }
    }
    for (int len = 0; len < 4; ++len) {
        std::size_t end = sources.size();
        for (std::size_t i = 0; i < end; ++i) {
            if (sources[i].size() == static_cast<std::size_t>(len)) {
                for (char c : spec.alphabet) sources.push_back(sources[i] + c);
            }
        }
    }
    for (const std::string& x : sources) {
        if (x.empty()) continue;
        const std::string gold = rest::gold_target(x, spec);
        for (const std::string& y : outputs) {
            if (y == gold) {
                REQUIRE(rest::reward(x, y, spec) == 1.0);
            } else {
                REQUIRE(rest::reward(x, y, spec) < 1.0);
            }
        }
    }
}
