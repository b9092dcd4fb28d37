#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <map>

#include "rest/driver.hpp"
#include "rest/mdp.hpp"
#include "rest/policy.hpp"
#include "util.hpp"

using rest::Checkpoint;
using rest::Rng;
using rest::TokenSeq;
using rest::Vocab;

namespace {
const Vocab kAb = Vocab::letters("ab");  // 5 tokens: pad, bos, eos, a, b
}

TEST_CASE("policy initialization is seed-deterministic") {
    auto cfg = testutil::tiny_config(kAb.size());
    auto a = rest::init_policy<double>(cfg, 42);
    auto b = rest::init_policy<double>(cfg, 42);
    auto c = rest::init_policy<double>(cfg, 43);
    REQUIRE(a.same_values(b));
    REQUIRE_FALSE(a.same_values(c));
    for (const auto& t : a.params) REQUIRE(t.finite());
}

TEST_CASE("untrained per-step distribution is a valid probability vector") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 5);
    rest::PolicySession<double> session(policy, kAb);
    auto p = session.step_distribution(kAb.encode("ab"), {}, 1.0);
    double sum = 0;
    for (double v : p) {
        REQUIRE(v >= 0.0);
        sum += v;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("log_prob per-token terms sum to the total and are nonpositive") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 6);
    TokenSeq x = kAb.encode("ab");
    TokenSeq y = kAb.encode("ba");
    y.push_back(kAb.eos);
    auto lp = rest::log_prob(policy, kAb, x, y);
    double s = 0;
    for (double t : lp.per_token) {
        REQUIRE(t <= 0.0);
        s += t;
    }
    REQUIRE(s == Catch::Approx(lp.total).margin(1e-9));
    REQUIRE(lp.per_token.size() == y.size());
}

TEST_CASE("log_prob rejects out-of-vocab tokens") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 6);
    TokenSeq y{99, kAb.eos};
    REQUIRE_THROWS_WITH(rest::log_prob(policy, kAb, kAb.encode("a"), y),
                        Catch::Matchers::ContainsSubstring("vocab"));
}

TEST_CASE("sequence probabilities form a partition over complete outputs") {
    // enumerate every complete output with the cap at 3 tokens: shorter ones
    // end in EOS, cap-length ones may be truncated
    auto cfg = testutil::tiny_config(kAb.size(), 4, 3);
    auto policy = rest::init_policy<double>(cfg, 7);
    rest::PolicySession<double> session(policy, kAb);
    const TokenSeq x = kAb.encode("ab");

    double mass_len1 = 0, mass_len2 = 0, mass_len3 = 0;
    const int V = kAb.size();
    // length 1: just [EOS]
    mass_len1 = std::exp(session.log_prob(x, {kAb.eos}).total);
    // length 2: [t, EOS], t != EOS
    for (int t = 0; t < V; ++t) {
        if (t == kAb.eos) continue;
        mass_len2 += std::exp(session.log_prob(x, {t, kAb.eos}).total);
    }
    // length 3 (the cap): EOS nowhere except possibly last
    for (int t1 = 0; t1 < V; ++t1) {
        if (t1 == kAb.eos) continue;
        for (int t2 = 0; t2 < V; ++t2) {
            if (t2 == kAb.eos) continue;
            for (int t3 = 0; t3 < V; ++t3) {
                mass_len3 += std::exp(session.log_prob(x, {t1, t2, t3}).total);
            }
        }
    }
    REQUIRE(mass_len1 <= 1.0);
    REQUIRE(mass_len1 + mass_len2 <= 1.0 + 1e-12);
    REQUIRE(mass_len1 + mass_len2 + mass_len3 == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("near-zero temperature sampling equals greedy decoding") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 8);
    rest::PolicySession<double> session(policy, kAb);
    Rng rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        std::string src;
        for (int i = 0; i < 1 + static_cast<int>(rng.index(4)); ++i)
            src += (rng.index(2) ? 'a' : 'b');
        const TokenSeq x = kAb.encode(src);
        REQUIRE(session.sample(x, 1e-6, 6, rng) == session.greedy(x, 6));
    }
}

TEST_CASE("greedy decoding is deterministic") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 9);
    const TokenSeq x = kAb.encode("ba");
    REQUIRE(rest::decode_greedy(policy, kAb, x, 6) == rest::decode_greedy(policy, kAb, x, 6));
}

TEST_CASE("a hand-built policy that forces EOS always emits the empty output") {
    auto cfg = testutil::tiny_config(kAb.size());
    auto policy = rest::init_policy<double>(cfg, 10);
    // zero every parameter, then steer position 0 onto a large EOS logit
    for (auto& t : policy.params)
        for (double& v : t.data) v = 0.0;
    for (std::size_t i = 0; i < policy.names.size(); ++i) {
        if (policy.names[i].find("norm") != std::string::npos ||
            policy.names[i] == "final.norm") {
            for (double& v : policy.params[i].data) v = 1.0;  // keep norms as identity gains
        }
    }
    policy.params[policy.index_of("dec.pos")].at(0, 0) = 1.0;
    policy.params[policy.index_of("final.proj")].at(0, static_cast<std::size_t>(kAb.eos)) = 50.0;

    rest::PolicySession<double> session(policy, kAb);
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const TokenSeq y = session.sample(kAb.encode("ab"), 0.8, 6, rng);
        REQUIRE(y == TokenSeq{kAb.eos});
        REQUIRE(kAb.decode(y).empty());
    }
}

TEST_CASE("empirical first-step frequencies match the tempered distribution") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 11);
    rest::PolicySession<double> session(policy, kAb);
    const TokenSeq x = kAb.encode("ba");
    const double temperature = 0.8;
    const auto exact = session.step_distribution(x, {}, temperature);

    std::vector<double> freq(exact.size(), 0.0);
    Rng rng(2024);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const TokenSeq y = session.sample(x, temperature, 1, rng);
        REQUIRE(y.size() == 1);
        freq[static_cast<std::size_t>(y[0])] += 1.0;
    }
    for (std::size_t j = 0; j < exact.size(); ++j) {
        REQUIRE(freq[j] / n == Catch::Approx(exact[j]).margin(0.01));
    }
}

TEST_CASE("sampled outputs are finite under log_prob and replay through the MDP") {
    auto policy = rest::init_policy<double>(testutil::tiny_config(kAb.size()), 12);
    rest::PolicySession<double> session(policy, kAb);
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const TokenSeq x = kAb.encode(trial % 2 ? "ab" : "bba");
        const TokenSeq y = session.sample(x, 0.8, 6, rng);
        REQUIRE(std::isfinite(session.log_prob(x, y).total));

        rest::State s{x, {}};
        for (int tok : y) s = rest::transition(s, tok, kAb, 6);
        REQUIRE(rest::is_terminal(s, kAb, 6));
        REQUIRE(s.output == y);
    }
}

TEST_CASE("training on a single pair drives its log-probability to zero") {
    const Vocab vocab = Vocab::letters("abcdefghij");
    auto cfg = testutil::tiny_config(vocab.size());
    auto policy = rest::init_policy<double>(cfg, 13);
    auto ds = testutil::dataset_of({testutil::example("abc", "dcb", 1.0)}, 6);
    auto trained = testutil::train_bc_steps(policy, vocab, ds, 2000, 0.01, 21, 1);

    TokenSeq x = vocab.encode("abc");
    TokenSeq y = vocab.encode("dcb");
    y.push_back(vocab.eos);
    REQUIRE(rest::log_prob(trained, vocab, x, y).total > -0.05);
    REQUIRE(rest::bc_loss(trained, vocab, ds.examples) < 0.05);
    REQUIRE(rest::decode_greedy(trained, vocab, x, 6) == y);
}

TEST_CASE("checkpoint serialization round-trips bit-exactly") {
    auto cfg = testutil::tiny_config(kAb.size());
    auto policy = rest::init_policy<double>(cfg, 14);
    policy.lineage = {2, 3, 0.00125};
    const std::string path = "test_policy_roundtrip.ckpt";
    rest::save_checkpoint(policy, path);
    auto loaded = rest::load_checkpoint<double>(path);
    REQUIRE(policy.same_values(loaded));
    std::remove(path.c_str());
}
