#pragma once

// The dataset-growth step: draw candidates per source context from the
// current policy, annotate everything (originals included) with rewards, and
// persist the union dataset. Records hold letter strings; the token form
// (with EOS) is recovered from the stored max output length, since an output
// shorter than the cap can only have stopped at EOS.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "rest/mdp.hpp"
#include "rest/rng.hpp"
#include "rest/task.hpp"

namespace rest {

enum class Origin { original, sampled };

inline const char* origin_tag(Origin o) { return o == Origin::original ? "original" : "sampled"; }

struct AnnotatedExample {
    std::string source;
    std::string output;
    double reward = std::numeric_limits<double>::quiet_NaN();  // NaN = unannotated
    Origin origin = Origin::original;
    int grow_index = 0;   // grow step that produced a sampled record; 0 for originals
    int source_id = -1;   // same source string <=> same id

    bool annotated() const { return !std::isnan(reward); }
};

// Token form of the output: shorter-than-cap outputs carry an EOS, a
// cap-length output was truncated.
inline TokenSeq output_tokens(const AnnotatedExample& e, const Vocab& vocab,
                              std::size_t max_out) {
    TokenSeq y = vocab.encode(e.output);
    if (y.size() < max_out) y.push_back(vocab.eos);
    return y;
}

struct GrowDataset {
    std::vector<AnnotatedExample> examples;
    int grow_index = 0;
    std::size_t max_out = 16;

    std::size_t n_original() const {
        std::size_t n = 0;
        for (const auto& e : examples) n += e.origin == Origin::original;
        return n;
    }
    std::size_t n_sampled() const { return examples.size() - n_original(); }

    // Mixture proportion of policy samples in the dataset.
    double lambda_mixture() const {
        return examples.empty() ? 0.0
                                : static_cast<double>(n_sampled()) /
                                      static_cast<double>(examples.size());
    }

    std::size_t n_sources() const {
        int mx = -1;
        for (const auto& e : examples) mx = std::max(mx, e.source_id);
        return static_cast<std::size_t>(mx + 1);
    }

    // Group record indices by source id; every group is non-empty.
    std::vector<std::vector<std::size_t>> groups_by_source() const {
        std::vector<std::vector<std::size_t>> groups(n_sources());
        for (std::size_t i = 0; i < examples.size(); ++i) {
            groups[static_cast<std::size_t>(examples[i].source_id)].push_back(i);
        }
        return groups;
    }

    double mean_reward() const {
        double s = 0;
        for (const auto& e : examples) s += e.reward;
        return examples.empty() ? 0.0 : s / static_cast<double>(examples.size());
    }

    double mean_sampled_reward() const {
        double s = 0;
        std::size_t n = 0;
        for (const auto& e : examples) {
            if (e.origin == Origin::sampled) {
                s += e.reward;
                ++n;
            }
        }
        return n == 0 ? 0.0 : s / static_cast<double>(n);
    }
};

inline void assign_source_ids(std::vector<AnnotatedExample>& examples) {
    std::unordered_map<std::string, int> ids;
    for (auto& e : examples) {
        auto [it, inserted] = ids.try_emplace(e.source, static_cast<int>(ids.size()));
        e.source_id = it->second;
    }
}

// Rewrites rewards from the given reward function; idempotent. Throws if the
// function violates the [0,1] normalization contract.
inline void annotate(std::vector<AnnotatedExample>& records, const RewardFn& reward_fn) {
    for (auto& e : records) {
        const double r = reward_fn(e.source, e.output);
        if (!(r >= 0.0 && r <= 1.0)) {
            throw std::runtime_error("annotate: reward " + std::to_string(r) +
                                     " outside [0,1] for source " + e.source);
        }
        e.reward = r;
    }
}

// Sampling interface used by grow(): a factory produces one sampler per
// worker, and the sampler maps (source letters, rng) to output letters. A
// cap-length output is interpreted as truncated (no EOS).
using SampleFn = std::function<std::string(const std::string& source, Rng& rng)>;
using SampleFnFactory = std::function<SampleFn()>;

namespace detail {

inline void run_chunked(std::size_t n, int workers, const std::function<void(std::size_t, std::size_t)>& chunk_fn) {
    if (workers <= 1 || n < 2) {
        chunk_fn(0, n);
        return;
    }
    const std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    std::vector<std::thread> threads;
    threads.reserve(nw);
    for (std::size_t w = 0; w < nw; ++w) {
        const std::size_t begin = n * w / nw;
        const std::size_t end = n * (w + 1) / nw;
        threads.emplace_back([=]() { chunk_fn(begin, end); });
    }
    for (auto& t : threads) t.join();
}

}  // namespace detail

// The dataset-growth step. Each context gets its own rng stream derived from
// (seed, context index), so the result does not depend on worker count.
// Records are laid out originals-first, then the per-context sample blocks.
inline GrowDataset grow(const SampleFnFactory& sampler_factory,
                        const std::vector<SourceReference>& data, int n_per_context,
                        const RewardFn& reward_fn, std::uint64_t seed, int grow_index,
                        std::size_t max_out, int workers = 1) {
    if (n_per_context < 1) throw std::invalid_argument("grow: n_per_context must be >= 1");
    GrowDataset out;
    out.grow_index = grow_index;
    out.max_out = max_out;
    out.examples.resize(data.size() * (1 + static_cast<std::size_t>(n_per_context)));

    const std::size_t n_ctx = data.size();
    const std::size_t n_per = static_cast<std::size_t>(n_per_context);
    for (std::size_t i = 0; i < n_ctx; ++i) {
        AnnotatedExample& ref = out.examples[i];
        ref.source = data[i].source;
        ref.output = data[i].reference;
        ref.origin = Origin::original;
        ref.grow_index = 0;
    }
    detail::run_chunked(n_ctx, workers, [&](std::size_t begin, std::size_t end) {
        SampleFn sampler = sampler_factory();
        for (std::size_t i = begin; i < end; ++i) {
            Rng rng(derive_seed(seed, i));
            for (std::size_t k = 0; k < n_per; ++k) {
                AnnotatedExample& e = out.examples[n_ctx + i * n_per + k];
                e.source = data[i].source;
                e.output = sampler(data[i].source, rng);
                e.origin = Origin::sampled;
                e.grow_index = grow_index;
            }
        }
    });
    annotate(out.examples, reward_fn);
    assign_source_ids(out.examples);
    return out;
}

// ---- dataset file format ------------------------------------------------------
//
//   restds v1 grow=<g> maxout=<m>
//   source \t output \t reward(6 places) \t origin \t grow_index
//
// Rewards reload bit-exactly at the stated 6-decimal precision.

struct DatasetIoError : std::runtime_error {
    explicit DatasetIoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string format_reward(double r) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", r);
    return buf;
}

inline void save_dataset(const GrowDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DatasetIoError("cannot write dataset file " + path);
    out << "restds v1 grow=" << ds.grow_index << " maxout=" << ds.max_out << "\n";
    for (const auto& e : ds.examples) {
        out << e.source << "\t" << e.output << "\t" << format_reward(e.reward) << "\t"
            << origin_tag(e.origin) << "\t" << e.grow_index << "\n";
    }
    if (!out) throw DatasetIoError("write failed for dataset file " + path);
}

inline GrowDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetIoError("cannot read dataset file " + path);
    std::string line;
    if (!std::getline(in, line)) throw DatasetIoError(path + ": empty file");
    GrowDataset ds;
    {
        std::istringstream head(line);
        std::string magic, version, kv;
        head >> magic >> version;
        if (magic != "restds" || version != "v1")
            throw DatasetIoError(path + ":1: not a restds v1 file");
        while (head >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw DatasetIoError(path + ":1: bad header field " + kv);
            const std::string key = kv.substr(0, eq);
            const std::string value = kv.substr(eq + 1);
            if (key == "grow") ds.grow_index = std::stoi(value);
            else if (key == "maxout") ds.max_out = static_cast<std::size_t>(std::stoul(value));
            else throw DatasetIoError(path + ":1: unknown header field " + key);
        }
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 5) {
            throw DatasetIoError(path + ":" + std::to_string(lineno) + ": expected 5 fields, got " +
                                 std::to_string(fields.size()));
        }
        AnnotatedExample e;
        e.source = fields[0];
        e.output = fields[1];
        try {
            e.reward = std::stod(fields[2]);
            e.grow_index = std::stoi(fields[4]);
        } catch (const std::exception&) {
            throw DatasetIoError(path + ":" + std::to_string(lineno) + ": malformed number");
        }
        if (!(e.reward >= 0.0 && e.reward <= 1.0)) {
            throw DatasetIoError(path + ":" + std::to_string(lineno) + ": reward " + fields[2] +
                                 " outside [0,1]");
        }
        if (fields[3] == "original") e.origin = Origin::original;
        else if (fields[3] == "sampled") e.origin = Origin::sampled;
        else throw DatasetIoError(path + ":" + std::to_string(lineno) + ": unknown origin tag " + fields[3]);
        ds.examples.push_back(std::move(e));
    }
    assign_source_ids(ds.examples);
    return ds;
}

// Structural equality at file precision: rewards compare by their 6-decimal form.
inline bool dataset_equal(const GrowDataset& a, const GrowDataset& b) {
    if (a.grow_index != b.grow_index || a.max_out != b.max_out ||
        a.examples.size() != b.examples.size())
        return false;
    for (std::size_t i = 0; i < a.examples.size(); ++i) {
        const auto& x = a.examples[i];
        const auto& y = b.examples[i];
        if (x.source != y.source || x.output != y.output || x.origin != y.origin ||
            x.grow_index != y.grow_index || x.source_id != y.source_id ||
            format_reward(x.reward) != format_reward(y.reward))
            return false;
    }
    return true;
}

}  // namespace rest
