#pragma once

// Tiny encoder-decoder transformer expressed as tape graphs, used both for
// the policy head (logits over the vocab) and the value head (one scalar per
// output position). Pre-norm blocks with RMS norms, learned positional
// embeddings, multi-head attention without biases. Checkpoints are plain
// lists of named tensors and serialize to a hexfloat text container so
// 64-bit round trips are bit-exact.

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rest/mdp.hpp"
#include "rest/rng.hpp"
#include "rest/tape.hpp"
#include "rest/tensor.hpp"

namespace rest {

struct ModelConfig {
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 64;
    int vocab = 13;
    int max_src = 12;   // max source length
    int max_out = 16;   // max output length including EOS
    int out_dim = 13;   // vocab for a policy head, 1 for a value head

    void validate() const {
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || vocab < 1 ||
            max_src < 1 || max_out < 1 || out_dim < 1) {
            throw std::invalid_argument("model config: all extents must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("model config: d_model must be divisible by n_heads");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

struct Lineage {
    int grow = 0;
    int improve = 0;
    double lr = 0.0;

    bool operator==(const Lineage&) const = default;
};

// Immutable snapshot of model parameters plus lineage metadata.
template <typename Real>
struct Checkpoint {
    ModelConfig config;
    Lineage lineage;
    std::vector<std::string> names;
    std::vector<Tensor<Real>> params;

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::invalid_argument("checkpoint: no parameter named " + name);
    }

    bool same_values(const Checkpoint& o) const {
        if (!(config == o.config) || !(lineage == o.lineage) || names != o.names) return false;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].shape != o.params[i].shape || params[i].data != o.params[i].data)
                return false;
        }
        return true;
    }
};

namespace detail {

template <typename Real>
void add_param(Checkpoint<Real>& c, const std::string& name, Shape shape, Rng& rng, Real std_dev) {
    Tensor<Real> t(std::move(shape));
    if (std_dev > Real(0)) {
        for (Real& x : t.data) x = static_cast<Real>(rng.normal()) * std_dev;
    }
    c.names.push_back(name);
    c.params.push_back(std::move(t));
}

template <typename Real>
void add_gain(Checkpoint<Real>& c, const std::string& name, std::size_t n) {
    c.names.push_back(name);
    c.params.push_back(Tensor<Real>::full(Shape{n}, Real(1)));
}

}  // namespace detail

template <typename Real>
Checkpoint<Real> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Checkpoint<Real> c;
    c.config = cfg;
    Rng rng(derive_seed(seed, 0xC0DE));
    const Real sd = Real(0.08);
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
    const std::size_t v = static_cast<std::size_t>(cfg.vocab);

    detail::add_param(c, "enc.embed", {v, d}, rng, sd);
    detail::add_param(c, "enc.pos", {static_cast<std::size_t>(cfg.max_src), d}, rng, sd);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "enc.l" + std::to_string(l) + ".";
        detail::add_gain(c, p + "norm1", d);
        for (const char* w : {"wq", "wk", "wv", "wo"}) detail::add_param(c, p + w, {d, d}, rng, sd);
        detail::add_gain(c, p + "norm2", d);
        detail::add_param(c, p + "w1", {d, ff}, rng, sd);
        detail::add_param(c, p + "b1", {ff}, rng, Real(0));
        detail::add_param(c, p + "w2", {ff, d}, rng, sd);
        detail::add_param(c, p + "b2", {d}, rng, Real(0));
    }
    detail::add_param(c, "dec.embed", {v, d}, rng, sd);
    detail::add_param(c, "dec.pos", {static_cast<std::size_t>(cfg.max_out), d}, rng, sd);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "dec.l" + std::to_string(l) + ".";
        detail::add_gain(c, p + "norm1", d);
        for (const char* w : {"wq", "wk", "wv", "wo"}) detail::add_param(c, p + w, {d, d}, rng, sd);
        detail::add_gain(c, p + "norm2", d);
        for (const char* w : {"cq", "ck", "cv", "co"}) detail::add_param(c, p + w, {d, d}, rng, sd);
        detail::add_gain(c, p + "norm3", d);
        detail::add_param(c, p + "w1", {d, ff}, rng, sd);
        detail::add_param(c, p + "b1", {ff}, rng, Real(0));
        detail::add_param(c, p + "w2", {ff, d}, rng, sd);
        detail::add_param(c, p + "b2", {d}, rng, Real(0));
    }
    detail::add_gain(c, "final.norm", d);
    detail::add_param(c, "final.proj", {d, static_cast<std::size_t>(cfg.out_dim)}, rng, sd);
    detail::add_param(c, "final.bias", {static_cast<std::size_t>(cfg.out_dim)}, rng, Real(0));
    return c;
}

// Parameters placed on a tape as leaves, with name lookup. One instance per
// (tape, checkpoint) pair; the graph builders below resolve weights by name.
template <typename Real>
struct ModelParams {
    using NodeId = typename Tape<Real>::NodeId;

    const ModelConfig* config = nullptr;
    std::vector<NodeId> leafs;
    const std::vector<std::string>* names = nullptr;

    static ModelParams put(Tape<Real>& tape, const Checkpoint<Real>& ckpt) {
        ModelParams p;
        p.config = &ckpt.config;
        p.names = &ckpt.names;
        p.leafs.reserve(ckpt.params.size());
        for (const Tensor<Real>& t : ckpt.params) p.leafs.push_back(tape.leaf(t));
        return p;
    }

    NodeId operator()(const std::string& name) const {
        for (std::size_t i = 0; i < names->size(); ++i)
            if ((*names)[i] == name) return leafs[i];
        throw std::invalid_argument("model params: no parameter named " + name);
    }
};

namespace detail {

template <typename Real>
typename Tape<Real>::NodeId attention(Tape<Real>& tape, const ModelParams<Real>& p,
                                      const std::string& prefix, const char* qn, const char* kn,
                                      const char* vn, const char* on,
                                      typename Tape<Real>::NodeId q_in,
                                      typename Tape<Real>::NodeId kv_in, bool causal) {
    const int heads = p.config->n_heads;
    const std::size_t d = static_cast<std::size_t>(p.config->d_model);
    const std::size_t hd = d / static_cast<std::size_t>(heads);
    auto q = tape.matmul(q_in, p(prefix + qn));
    auto k = tape.matmul(kv_in, p(prefix + kn));
    auto v = tape.matmul(kv_in, p(prefix + vn));

    typename Tape<Real>::NodeId mask = 0;
    if (causal) {
        const std::size_t t = tape.value(q).shape[0];
        Tensor<Real> m(Shape{t, t});
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = i + 1; j < t; ++j) m.at(i, j) = Real(-1e30);
        mask = tape.leaf(std::move(m));
    }

    typename Tape<Real>::NodeId merged = 0;
    for (int h = 0; h < heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * hd;
        auto qh = tape.slice_cols(q, c0, c0 + hd);
        auto kh = tape.slice_cols(k, c0, c0 + hd);
        auto vh = tape.slice_cols(v, c0, c0 + hd);
        auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                                 Real(1) / std::sqrt(Real(hd)));
        if (causal) scores = tape.add(scores, mask);
        auto att = tape.matmul(tape.softmax_rows(scores), vh);
        merged = h == 0 ? att : tape.concat_cols(merged, att);
    }
    return tape.matmul(merged, p(prefix + on));
}

template <typename Real>
typename Tape<Real>::NodeId ffn(Tape<Real>& tape, const ModelParams<Real>& p,
                                const std::string& prefix, typename Tape<Real>::NodeId x) {
    auto h = tape.relu(tape.add_row(tape.matmul(x, p(prefix + "w1")), p(prefix + "b1")));
    return tape.add_row(tape.matmul(h, p(prefix + "w2")), p(prefix + "b2"));
}

}  // namespace detail

// Encoder over source tokens: [L, d_model] hidden states.
template <typename Real>
typename Tape<Real>::NodeId encode(Tape<Real>& tape, const ModelParams<Real>& p,
                                   const TokenSeq& src) {
    if (src.empty()) throw std::invalid_argument("encode: empty source");
    if (src.size() > static_cast<std::size_t>(p.config->max_src)) {
        throw std::invalid_argument("encode: source length " + std::to_string(src.size()) +
                                    " exceeds max " + std::to_string(p.config->max_src));
    }
    std::vector<int> pos(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) pos[i] = static_cast<int>(i);
    auto x = tape.add(tape.gather_rows(p("enc.embed"), src),
                      tape.gather_rows(p("enc.pos"), pos));
    for (int l = 0; l < p.config->n_layers; ++l) {
        const std::string pre = "enc.l" + std::to_string(l) + ".";
        auto normed = tape.rmsnorm_rows(x, p(pre + "norm1"));
        x = tape.add(x, detail::attention(tape, p, pre, "wq", "wk", "wv", "wo", normed, normed,
                                          /*causal=*/false));
        auto normed2 = tape.rmsnorm_rows(x, p(pre + "norm2"));
        x = tape.add(x, detail::ffn(tape, p, pre, normed2));
    }
    return x;
}

// Decoder over dec_in (BOS-shifted outputs): [T, out_dim] head outputs.
// Position t attends causally to dec_in[0..t] and fully to the encoder.
template <typename Real>
typename Tape<Real>::NodeId decode(Tape<Real>& tape, const ModelParams<Real>& p,
                                   typename Tape<Real>::NodeId enc_out,
                                   const TokenSeq& dec_in) {
    if (dec_in.empty()) throw std::invalid_argument("decode: empty decoder input");
    if (dec_in.size() > static_cast<std::size_t>(p.config->max_out)) {
        throw std::invalid_argument("decode: output length " + std::to_string(dec_in.size()) +
                                    " exceeds max " + std::to_string(p.config->max_out));
    }
    std::vector<int> pos(dec_in.size());
    for (std::size_t i = 0; i < dec_in.size(); ++i) pos[i] = static_cast<int>(i);
    auto x = tape.add(tape.gather_rows(p("dec.embed"), dec_in),
                      tape.gather_rows(p("dec.pos"), pos));
    for (int l = 0; l < p.config->n_layers; ++l) {
        const std::string pre = "dec.l" + std::to_string(l) + ".";
        auto n1 = tape.rmsnorm_rows(x, p(pre + "norm1"));
        x = tape.add(x, detail::attention(tape, p, pre, "wq", "wk", "wv", "wo", n1, n1,
                                          /*causal=*/true));
        auto n2 = tape.rmsnorm_rows(x, p(pre + "norm2"));
        x = tape.add(x, detail::attention(tape, p, pre, "cq", "ck", "cv", "co", n2, enc_out,
                                          /*causal=*/false));
        auto n3 = tape.rmsnorm_rows(x, p(pre + "norm3"));
        x = tape.add(x, detail::ffn(tape, p, pre, n3));
    }
    return tape.add_row(tape.matmul(tape.rmsnorm_rows(x, p("final.norm")), p("final.proj")),
                        p("final.bias"));
}

// ---- checkpoint serialization ------------------------------------------------

struct CheckpointIoError : std::runtime_error {
    explicit CheckpointIoError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename Real>
void save_checkpoint(const Checkpoint<Real>& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw CheckpointIoError("cannot write checkpoint file " + path);
    out << "restckpt v1\n";
    out << "precision " << (sizeof(Real) == 8 ? 64 : 32) << "\n";
    const ModelConfig& m = c.config;
    out << "config " << m.d_model << " " << m.n_layers << " " << m.n_heads << " " << m.d_ff << " "
        << m.vocab << " " << m.max_src << " " << m.max_out << " " << m.out_dim << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%a", c.lineage.lr);
    out << "lineage " << c.lineage.grow << " " << c.lineage.improve << " " << buf << "\n";
    out << "tensors " << c.params.size() << "\n";
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        const Tensor<Real>& t = c.params[i];
        out << "tensor " << c.names[i];
        for (std::size_t e : t.shape) out << " " << e;
        out << "\n";
        for (std::size_t k = 0; k < t.data.size(); ++k) {
            std::snprintf(buf, sizeof(buf), "%a", static_cast<double>(t.data[k]));
            out << buf << (k + 1 == t.data.size() ? "" : " ");
        }
        out << "\n";
    }
    out << "end\n";
    if (!out) throw CheckpointIoError("write failed for checkpoint file " + path);
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointIoError("cannot read checkpoint file " + path);
    std::string line;
    auto next = [&](const char* what) {
        if (!std::getline(in, line)) throw CheckpointIoError(std::string(path) + ": missing " + what);
        return std::istringstream(line);
    };
    {
        auto s = next("header");
        std::string magic, version;
        s >> magic >> version;
        if (magic != "restckpt" || version != "v1")
            throw CheckpointIoError(path + ": not a restckpt v1 file");
    }
    Checkpoint<Real> c;
    {
        auto s = next("precision");
        std::string key;
        int bits = 0;
        s >> key >> bits;
        if (key != "precision" || (bits != 32 && bits != 64))
            throw CheckpointIoError(path + ": bad precision line");
        if (bits != (sizeof(Real) == 8 ? 64 : 32))
            throw CheckpointIoError(path + ": checkpoint precision " + std::to_string(bits) +
                                    " does not match requested mode");
    }
    {
        auto s = next("config");
        std::string key;
        ModelConfig& m = c.config;
        s >> key >> m.d_model >> m.n_layers >> m.n_heads >> m.d_ff >> m.vocab >> m.max_src >>
            m.max_out >> m.out_dim;
        if (key != "config" || !s) throw CheckpointIoError(path + ": bad config line");
        m.validate();
    }
    {
        auto s = next("lineage");
        std::string key, lr;
        s >> key >> c.lineage.grow >> c.lineage.improve >> lr;
        if (key != "lineage" || !s) throw CheckpointIoError(path + ": bad lineage line");
        c.lineage.lr = std::strtod(lr.c_str(), nullptr);
    }
    std::size_t count = 0;
    {
        auto s = next("tensors");
        std::string key;
        s >> key >> count;
        if (key != "tensors" || !s) throw CheckpointIoError(path + ": bad tensors line");
    }
    for (std::size_t i = 0; i < count; ++i) {
        auto s = next("tensor header");
        std::string key, name;
        s >> key >> name;
        if (key != "tensor" || name.empty())
            throw CheckpointIoError(path + ": bad tensor header at index " + std::to_string(i));
        Shape shape;
        std::size_t e;
        while (s >> e) shape.push_back(e);
        Tensor<Real> t(shape);
        if (!std::getline(in, line))
            throw CheckpointIoError(path + ": missing data for tensor " + name);
        const char* ptr = line.c_str();
        char* end = nullptr;
        for (std::size_t k = 0; k < t.data.size(); ++k) {
            const double v = std::strtod(ptr, &end);
            if (end == ptr)
                throw CheckpointIoError(path + ": short data row for tensor " + name);
            t.data[k] = static_cast<Real>(v);
            ptr = end;
        }
        c.names.push_back(name);
        c.params.push_back(std::move(t));
    }
    {
        auto s = next("end marker");
        std::string key;
        s >> key;
        if (key != "end") throw CheckpointIoError(path + ": missing end marker");
    }
    return c;
}

}  // namespace rest
