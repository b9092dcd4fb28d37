#pragma once

// Central finite-difference check of tape gradients. The builder callback
// constructs the same scalar graph for both the analytic pass and each
// perturbed re-evaluation, so the check exercises exactly the path that
// training uses.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "rest/tape.hpp"
#include "rest/tensor.hpp"

namespace rest {

template <typename Real>
struct GradCheckReport {
    Real max_rel_error = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_coord = 0;
    bool nan_seen = false;        // fn produced NaN at some perturbation
    std::size_t nan_tensor = 0;
    std::size_t nan_coord = 0;
};

// build: (tape, leaf ids, one per point tensor) -> scalar output node
template <typename Real, typename BuildFn>
GradCheckReport<Real> grad_check(BuildFn&& build, const std::vector<Tensor<Real>>& point,
                                 Real eps) {
    // analytic gradients
    Tape<Real> tape;
    std::vector<typename Tape<Real>::NodeId> leafs;
    leafs.reserve(point.size());
    for (const Tensor<Real>& t : point) leafs.push_back(tape.leaf(t));
    auto out = build(tape, leafs);
    tape.backward(out);
    std::vector<Tensor<Real>> analytic;
    analytic.reserve(point.size());
    for (auto id : leafs) analytic.push_back(tape.grad(id));

    auto eval_at = [&](const std::vector<Tensor<Real>>& p) {
        Tape<Real> t;
        std::vector<typename Tape<Real>::NodeId> ls;
        ls.reserve(p.size());
        for (const Tensor<Real>& x : p) ls.push_back(t.leaf(x));
        return t.value(build(t, ls)).item();
    };

    GradCheckReport<Real> report;
    std::vector<Tensor<Real>> work = point;
    for (std::size_t ti = 0; ti < point.size(); ++ti) {
        for (std::size_t ci = 0; ci < point[ti].numel(); ++ci) {
            const Real orig = work[ti].data[ci];
            work[ti].data[ci] = orig + eps;
            const Real fp = eval_at(work);
            work[ti].data[ci] = orig - eps;
            const Real fm = eval_at(work);
            work[ti].data[ci] = orig;
            if (!std::isfinite(static_cast<double>(fp)) ||
                !std::isfinite(static_cast<double>(fm))) {
                report.nan_seen = true;
                report.nan_tensor = ti;
                report.nan_coord = ci;
                continue;
            }
            const Real numeric = (fp - fm) / (Real(2) * eps);
            const Real a = analytic[ti].data[ci];
            const Real rel = std::abs(a - numeric) / std::max(Real(1), std::abs(a));
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_tensor = ti;
                report.worst_coord = ci;
            }
        }
    }
    return report;
}

}  // namespace rest
