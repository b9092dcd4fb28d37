#pragma once

// Reverse-mode autodiff on a flat tape. Ops evaluate eagerly as they are
// recorded, so the record order is the forward pass and is already
// topological; backward() walks it once in reverse. A tape is confined to
// one worker and node values are immutable once written.
//
// Primitive set: matmul, transpose, add/sub/mul, row-broadcast add, scale,
// relu, exp, log, row softmax / log-softmax, row rmsnorm, gather_rows,
// slice_cols, concat_cols, pick entries, sum/mean reductions.

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rest/tensor.hpp"

namespace rest {

struct TapeError : std::runtime_error {
    explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename Real>
class Tape {
public:
    using NodeId = std::size_t;

    enum class Op {
        leaf,
        matmul,
        transpose,
        add,
        sub,
        mul,
        add_row,
        scale,
        relu,
        exp,
        log,
        softmax_rows,
        log_softmax_rows,
        rmsnorm_rows,
        gather_rows,
        slice_cols,
        concat_cols,
        pick,
        sum_all,
        mean_all,
    };

    // ---- graph construction -------------------------------------------------

    NodeId leaf(Tensor<Real> value) {
        return push(Op::leaf, std::move(value), npos, npos);
    }

    // C[m,n] = A[m,k] * B[k,n]
    NodeId matmul(NodeId a, NodeId b) {
        const Tensor<Real>& A = val(a);
        const Tensor<Real>& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) {
            fail("matmul", A, B);
        }
        Tensor<Real> out(Shape{A.shape[0], B.shape[1]});
        matmul_into(A, B, out, false, false);
        return push(Op::matmul, std::move(out), a, b);
    }

    NodeId transpose(NodeId a) {
        const Tensor<Real>& A = val(a);
        if (A.rank() != 2) fail("transpose", A);
        Tensor<Real> out(Shape{A.shape[1], A.shape[0]});
        for (std::size_t i = 0; i < A.shape[0]; ++i)
            for (std::size_t j = 0; j < A.shape[1]; ++j) out.at(j, i) = A.at(i, j);
        return push(Op::transpose, std::move(out), a);
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::add, "add", a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, "sub", a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, "mul", a, b); }

    // [m,n] + row[n], broadcast over rows
    NodeId add_row(NodeId a, NodeId row) {
        const Tensor<Real>& A = val(a);
        const Tensor<Real>& R = val(row);
        if (A.rank() != 2 || R.rank() != 1 || R.shape[0] != A.shape[1]) {
            fail("add_row", A, R);
        }
        Tensor<Real> out = A;
        for (std::size_t i = 0; i < A.shape[0]; ++i)
            for (std::size_t j = 0; j < A.shape[1]; ++j) out.at(i, j) += R[j];
        return push(Op::add_row, std::move(out), a, row);
    }

    NodeId scale(NodeId a, Real c) {
        Tensor<Real> out = val(a);
        for (Real& x : out.data) x *= c;
        NodeId id = push(Op::scale, std::move(out), a);
        nodes_[id].cval = c;
        return id;
    }

    NodeId relu(NodeId a) {
        Tensor<Real> out = val(a);
        for (Real& x : out.data) x = x > Real(0) ? x : Real(0);
        return push(Op::relu, std::move(out), a);
    }

    NodeId exp(NodeId a) {
        Tensor<Real> out = val(a);
        for (Real& x : out.data) x = std::exp(x);
        return push(Op::exp, std::move(out), a);
    }

    NodeId log(NodeId a) {
        Tensor<Real> out = val(a);
        for (Real& x : out.data) x = std::log(x);
        return push(Op::log, std::move(out), a);
    }

    // Numerically stable row-wise softmax; rank-1 input treated as one row.
    NodeId softmax_rows(NodeId a) {
        Tensor<Real> out = val(a);
        for_each_row(out, [](Real* r, std::size_t n) {
            Real mx = r[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
            Real sum = 0;
            for (std::size_t j = 0; j < n; ++j) {
                r[j] = std::exp(r[j] - mx);
                sum += r[j];
            }
            for (std::size_t j = 0; j < n; ++j) r[j] /= sum;
        });
        return push(Op::softmax_rows, std::move(out), a);
    }

    NodeId log_softmax_rows(NodeId a) {
        Tensor<Real> out = val(a);
        for_each_row(out, [](Real* r, std::size_t n) {
            Real mx = r[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
            Real sum = 0;
            for (std::size_t j = 0; j < n; ++j) sum += std::exp(r[j] - mx);
            Real lse = mx + std::log(sum);
            for (std::size_t j = 0; j < n; ++j) r[j] -= lse;
        });
        return push(Op::log_softmax_rows, std::move(out), a);
    }

    // y[i,:] = x[i,:] * gain / sqrt(mean(x[i,:]^2) + eps)
    NodeId rmsnorm_rows(NodeId a, NodeId gain, Real eps = Real(1e-8)) {
        const Tensor<Real>& A = val(a);
        const Tensor<Real>& G = val(gain);
        if (A.rank() != 2 || G.rank() != 1 || G.shape[0] != A.shape[1]) {
            fail("rmsnorm_rows", A, G);
        }
        Tensor<Real> out(A.shape);
        const std::size_t n = A.shape[1];
        for (std::size_t i = 0; i < A.shape[0]; ++i) {
            Real ms = 0;
            for (std::size_t j = 0; j < n; ++j) ms += A.at(i, j) * A.at(i, j);
            Real inv = Real(1) / std::sqrt(ms / Real(n) + eps);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) = A.at(i, j) * G[j] * inv;
        }
        NodeId id = push(Op::rmsnorm_rows, std::move(out), a, gain);
        nodes_[id].cval = eps;
        return id;
    }

    // out[i,:] = table[ids[i],:]
    NodeId gather_rows(NodeId table, std::vector<int> ids) {
        const Tensor<Real>& T = val(table);
        if (T.rank() != 2) fail("gather_rows", T);
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= T.shape[0]) {
                throw TapeError("gather_rows: index " + std::to_string(id) +
                                " out of range for table " + shape_str(T.shape));
            }
        }
        Tensor<Real> out(Shape{ids.size(), T.shape[1]});
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < T.shape[1]; ++j)
                out.at(i, j) = T.at(static_cast<std::size_t>(ids[i]), j);
        NodeId id = push(Op::gather_rows, std::move(out), table);
        nodes_[id].indices = std::move(ids);
        return id;
    }

    // columns [c0, c1)
    NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
        const Tensor<Real>& A = val(a);
        if (A.rank() != 2 || c0 >= c1 || c1 > A.shape[1]) fail("slice_cols", A);
        Tensor<Real> out(Shape{A.shape[0], c1 - c0});
        for (std::size_t i = 0; i < A.shape[0]; ++i)
            for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
        NodeId id = push(Op::slice_cols, std::move(out), a);
        nodes_[id].c0 = c0;
        nodes_[id].c1 = c1;
        return id;
    }

    NodeId concat_cols(NodeId a, NodeId b) {
        const Tensor<Real>& A = val(a);
        const Tensor<Real>& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[0] != B.shape[0]) {
            fail("concat_cols", A, B);
        }
        const std::size_t split = A.shape[1];
        Tensor<Real> out(Shape{A.shape[0], split + B.shape[1]});
        for (std::size_t i = 0; i < A.shape[0]; ++i) {
            for (std::size_t j = 0; j < split; ++j) out.at(i, j) = A.at(i, j);
            for (std::size_t j = 0; j < B.shape[1]; ++j) out.at(i, split + j) = B.at(i, j);
        }
        NodeId id = push(Op::concat_cols, std::move(out), a, b);
        nodes_[id].c0 = split;
        return id;
    }

    // out[k] = a[entries[k].first, entries[k].second]
    NodeId pick(NodeId a, std::vector<std::pair<std::size_t, std::size_t>> entries) {
        const Tensor<Real>& A = val(a);
        if (A.rank() != 2) fail("pick", A);
        Tensor<Real> out(Shape{entries.size()});
        for (std::size_t k = 0; k < entries.size(); ++k) {
            auto [i, j] = entries[k];
            if (i >= A.shape[0] || j >= A.shape[1]) {
                throw TapeError("pick: entry (" + std::to_string(i) + "," + std::to_string(j) +
                                ") out of range for " + shape_str(A.shape));
            }
            out[k] = A.at(i, j);
        }
        NodeId id = push(Op::pick, std::move(out), a);
        nodes_[id].entries = std::move(entries);
        return id;
    }

    NodeId sum_all(NodeId a) {
        Real s = 0;
        for (Real x : val(a).data) s += x;
        return push(Op::sum_all, Tensor<Real>::scalar(s), a);
    }

    NodeId mean_all(NodeId a) {
        const Tensor<Real>& A = val(a);
        if (A.numel() == 0) fail("mean_all", A);
        Real s = 0;
        for (Real x : A.data) s += x;
        return push(Op::mean_all, Tensor<Real>::scalar(s / Real(A.numel())), a);
    }

    // ---- access -------------------------------------------------------------

    const Tensor<Real>& value(NodeId id) const { return nodes_.at(id).val; }

    // Gradient of the last backward() output w.r.t. node id. A node the
    // output does not depend on reports a zero gradient, not an error.
    const Tensor<Real>& grad(NodeId id) {
        Node& n = nodes_.at(id);
        if (n.grad.numel() == 0) n.grad = Tensor<Real>::zeros(n.val.shape);
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // ---- reverse pass ---------------------------------------------------------

    void backward(NodeId out) {
        Node& o = nodes_.at(out);
        if (o.val.numel() != 1) {
            throw TapeError("backward: output must be scalar, got " + shape_str(o.val.shape));
        }
        for (Node& n : nodes_) n.grad = Tensor<Real>();
        o.grad = Tensor<Real>(o.val.shape);
        o.grad.data[0] = Real(1);
        for (std::size_t idx = out + 1; idx-- > 0;) {
            Node& n = nodes_[idx];
            if (n.grad.numel() == 0) continue;  // output does not depend on this node
            propagate(n);
        }
    }

private:
    static constexpr NodeId npos = static_cast<NodeId>(-1);

    struct Node {
        Op op;
        Tensor<Real> val;
        Tensor<Real> grad;
        NodeId a = npos;
        NodeId b = npos;
        Real cval = 0;
        std::size_t c0 = 0, c1 = 0;
        std::vector<int> indices;
        std::vector<std::pair<std::size_t, std::size_t>> entries;
    };

    std::vector<Node> nodes_;

    const Tensor<Real>& val(NodeId id) const { return nodes_.at(id).val; }

    NodeId push(Op op, Tensor<Real> v, NodeId a, NodeId b = npos) {
        Node n;
        n.op = op;
        n.val = std::move(v);
        n.a = a;
        n.b = b;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    NodeId binary(Op op, const char* name, NodeId a, NodeId b) {
        const Tensor<Real>& A = val(a);
        const Tensor<Real>& B = val(b);
        if (!A.same_shape(B)) fail(name, A, B);
        Tensor<Real> out = A;
        switch (op) {
            case Op::add:
                for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
                break;
            case Op::sub:
                for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= B.data[i];
                break;
            case Op::mul:
                for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
                break;
            default:
                throw TapeError("internal: not a binary op");
        }
        return push(op, std::move(out), a, b);
    }

    Tensor<Real>& grad_buf(NodeId id) {
        Node& n = nodes_[id];
        if (n.grad.numel() == 0) n.grad = Tensor<Real>(n.val.shape);
        return n.grad;
    }

    static void matmul_into(const Tensor<Real>& A, const Tensor<Real>& B, Tensor<Real>& C,
                            bool at, bool bt) {
        // C (+)= op(A) * op(B); C must be pre-sized and zeroed
        const std::size_t m = at ? A.shape[1] : A.shape[0];
        const std::size_t k = at ? A.shape[0] : A.shape[1];
        const std::size_t n = bt ? B.shape[0] : B.shape[1];
        for (std::size_t i = 0; i < m; ++i) {
            Real* crow = &C.data[i * n];
            for (std::size_t p = 0; p < k; ++p) {
                const Real av = at ? A.at(p, i) : A.at(i, p);
                if (av == Real(0)) continue;
                if (!bt) {
                    const Real* brow = &B.data[p * n];
                    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                } else {
                    for (std::size_t j = 0; j < n; ++j) crow[j] += av * B.at(j, p);
                }
            }
        }
    }

    template <typename Fn>
    static void for_each_row(Tensor<Real>& t, Fn fn) {
        if (t.rank() == 1) {
            fn(t.data.data(), t.shape[0]);
            return;
        }
        if (t.rank() != 2) throw TapeError("row op: rank-1 or rank-2 input required, got " + shape_str(t.shape));
        for (std::size_t i = 0; i < t.shape[0]; ++i) fn(&t.data[i * t.shape[1]], t.shape[1]);
    }

    void propagate(Node& n) {
        const Tensor<Real>& g = n.grad;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul: {
                const Tensor<Real>& A = val(n.a);
                const Tensor<Real>& B = val(n.b);
                matmul_into(g, B, grad_buf(n.a), false, true);  // gA += g * B^T
                matmul_into(A, g, grad_buf(n.b), true, false);  // gB += A^T * g
                break;
            }
            case Op::transpose: {
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t i = 0; i < g.shape[0]; ++i)
                    for (std::size_t j = 0; j < g.shape[1]; ++j) ga.at(j, i) += g.at(i, j);
                break;
            }
            case Op::add: {
                accumulate(n.a, g);
                accumulate(n.b, g);
                break;
            }
            case Op::sub: {
                accumulate(n.a, g);
                Tensor<Real>& gb = grad_buf(n.b);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
                break;
            }
            case Op::mul: {
                const Tensor<Real>& A = val(n.a);
                const Tensor<Real>& B = val(n.b);
                Tensor<Real>& ga = grad_buf(n.a);
                Tensor<Real>& gb = grad_buf(n.b);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += g.data[i] * B.data[i];
                    gb.data[i] += g.data[i] * A.data[i];
                }
                break;
            }
            case Op::add_row: {
                accumulate(n.a, g);
                Tensor<Real>& gr = grad_buf(n.b);
                for (std::size_t i = 0; i < g.shape[0]; ++i)
                    for (std::size_t j = 0; j < g.shape[1]; ++j) gr[j] += g.at(i, j);
                break;
            }
            case Op::scale: {
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += n.cval * g.data[i];
                break;
            }
            case Op::relu: {
                const Tensor<Real>& A = val(n.a);
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    if (A.data[i] > Real(0)) ga.data[i] += g.data[i];
                break;
            }
            case Op::exp: {
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += g.data[i] * n.val.data[i];
                break;
            }
            case Op::log: {
                const Tensor<Real>& A = val(n.a);
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t i = 0; i < g.data.size(); ++i)
                    ga.data[i] += g.data[i] / A.data[i];
                break;
            }
            case Op::softmax_rows: {
                // gx = s * (g - <g, s>) per row
                Tensor<Real>& ga = grad_buf(n.a);
                const std::size_t cols = n.val.rank() == 2 ? n.val.shape[1] : n.val.shape[0];
                const std::size_t rows = n.val.numel() / cols;
                for (std::size_t i = 0; i < rows; ++i) {
                    const Real* s = &n.val.data[i * cols];
                    const Real* gr = &g.data[i * cols];
                    Real dot = 0;
                    for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * s[j];
                    Real* out = &ga.data[i * cols];
                    for (std::size_t j = 0; j < cols; ++j) out[j] += s[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::log_softmax_rows: {
                // gx = g - softmax(x) * sum(g) per row
                Tensor<Real>& ga = grad_buf(n.a);
                const std::size_t cols = n.val.rank() == 2 ? n.val.shape[1] : n.val.shape[0];
                const std::size_t rows = n.val.numel() / cols;
                for (std::size_t i = 0; i < rows; ++i) {
                    const Real* ls = &n.val.data[i * cols];
                    const Real* gr = &g.data[i * cols];
                    Real gsum = 0;
                    for (std::size_t j = 0; j < cols; ++j) gsum += gr[j];
                    Real* out = &ga.data[i * cols];
                    for (std::size_t j = 0; j < cols; ++j) out[j] += gr[j] - std::exp(ls[j]) * gsum;
                }
                break;
            }
            case Op::rmsnorm_rows: {
                const Tensor<Real>& A = val(n.a);
                const Tensor<Real>& G = val(n.b);
                Tensor<Real>& ga = grad_buf(n.a);
                Tensor<Real>& gg = grad_buf(n.b);
                const std::size_t cols = A.shape[1];
                const Real eps = n.cval;
                for (std::size_t i = 0; i < A.shape[0]; ++i) {
                    const Real* x = &A.data[i * cols];
                    const Real* gr = &g.data[i * cols];
                    Real ms = 0;
                    for (std::size_t j = 0; j < cols; ++j) ms += x[j] * x[j];
                    const Real inv = Real(1) / std::sqrt(ms / Real(cols) + eps);
                    Real dot = 0;  // sum_j g_j * gain_j * x_j
                    for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * G[j] * x[j];
                    const Real coef = dot * inv * inv * inv / Real(cols);
                    Real* out = &ga.data[i * cols];
                    for (std::size_t j = 0; j < cols; ++j) {
                        out[j] += gr[j] * G[j] * inv - coef * x[j];
                        gg[j] += gr[j] * x[j] * inv;
                    }
                }
                break;
            }
            case Op::gather_rows: {
                Tensor<Real>& gt = grad_buf(n.a);
                const std::size_t cols = n.val.shape[1];
                for (std::size_t i = 0; i < n.indices.size(); ++i) {
                    const std::size_t r = static_cast<std::size_t>(n.indices[i]);
                    for (std::size_t j = 0; j < cols; ++j) gt.at(r, j) += g.at(i, j);
                }
                break;
            }
            case Op::slice_cols: {
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t i = 0; i < g.shape[0]; ++i)
                    for (std::size_t j = 0; j < g.shape[1]; ++j) ga.at(i, n.c0 + j) += g.at(i, j);
                break;
            }
            case Op::concat_cols: {
                Tensor<Real>& ga = grad_buf(n.a);
                Tensor<Real>& gb = grad_buf(n.b);
                const std::size_t split = n.c0;
                for (std::size_t i = 0; i < g.shape[0]; ++i) {
                    for (std::size_t j = 0; j < split; ++j) ga.at(i, j) += g.at(i, j);
                    for (std::size_t j = split; j < g.shape[1]; ++j)
                        gb.at(i, j - split) += g.at(i, j);
                }
                break;
            }
            case Op::pick: {
                Tensor<Real>& ga = grad_buf(n.a);
                for (std::size_t k = 0; k < n.entries.size(); ++k)
                    ga.at(n.entries[k].first, n.entries[k].second) += g[k];
                break;
            }
            case Op::sum_all: {
                Tensor<Real>& ga = grad_buf(n.a);
                for (Real& x : ga.data) x += g.data[0];
                break;
            }
            case Op::mean_all: {
                Tensor<Real>& ga = grad_buf(n.a);
                const Real c = g.data[0] / Real(ga.numel());
                for (Real& x : ga.data) x += c;
                break;
            }
        }
    }

    void accumulate(NodeId id, const Tensor<Real>& g) {
        Tensor<Real>& dst = grad_buf(id);
        for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
    }

    [[noreturn]] static void fail(const char* op, const Tensor<Real>& a) {
        throw TapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape));
    }

    [[noreturn]] static void fail(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
        throw TapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                        shape_str(b.shape));
    }
};

}  // namespace rest
