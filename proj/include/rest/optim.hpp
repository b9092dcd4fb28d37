#pragma once

// First-order optimizers over lists of parameter tensors. Adam is the
// default for desk-scale convergence; plain SGD is available. Moment
// buffers are sized lazily on the first step.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/tensor.hpp"

namespace rest {

enum class OptKind { sgd, adam };

struct OptimError : std::runtime_error {
    explicit OptimError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename Real>
struct Optimizer {
    OptKind kind = OptKind::adam;
    Real lr = Real(0.005);
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real eps = Real(1e-8);
    Real weight_decay = Real(0);

    long step_count = 0;
    std::vector<Tensor<Real>> m;  // first moments (adam only)
    std::vector<Tensor<Real>> v;  // second moments (adam only)

    static Optimizer sgd(Real lr) {
        Optimizer o;
        o.kind = OptKind::sgd;
        o.lr = lr;
        return o;
    }

    static Optimizer adam(Real lr) {
        Optimizer o;
        o.kind = OptKind::adam;
        o.lr = lr;
        return o;
    }

    void step(std::vector<Tensor<Real>>& params, const std::vector<Tensor<Real>>& grads) {
        if (params.size() != grads.size()) {
            throw OptimError("optimizer: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
            if (!params[i].same_shape(grads[i])) {
                throw OptimError("optimizer: param/grad shape mismatch at tensor " +
                                 std::to_string(i));
            }
            if (!grads[i].finite()) {
                throw OptimError("optimizer: non-finite gradient at tensor " + std::to_string(i) +
                                 ", step " + std::to_string(step_count + 1));
            }
        }
        ++step_count;
        if (kind == OptKind::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                for (std::size_t k = 0; k < params[i].data.size(); ++k) {
                    Real g = grads[i].data[k] + weight_decay * params[i].data[k];
                    params[i].data[k] -= lr * g;
                }
            }
            return;
        }
        if (m.empty()) {
            for (const Tensor<Real>& p : params) {
                m.push_back(Tensor<Real>::zeros(p.shape));
                v.push_back(Tensor<Real>::zeros(p.shape));
            }
        }
        const Real bc1 = Real(1) - std::pow(beta1, Real(step_count));
        const Real bc2 = Real(1) - std::pow(beta2, Real(step_count));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Real* p = params[i].data.data();
            const Real* g0 = grads[i].data.data();
            Real* mi = m[i].data.data();
            Real* vi = v[i].data.data();
            for (std::size_t k = 0; k < params[i].data.size(); ++k) {
                Real g = g0[k] + weight_decay * p[k];
                mi[k] = beta1 * mi[k] + (Real(1) - beta1) * g;
                vi[k] = beta2 * vi[k] + (Real(1) - beta2) * g * g;
                const Real mhat = mi[k] / bc1;
                const Real vhat = vi[k] / bc2;
                p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

}  // namespace rest
