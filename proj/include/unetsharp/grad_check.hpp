#pragma once

#include "unetsharp/tape.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace unetsharp {

/// Builds a scalar on `tape` from leaves holding the inputs. Must be a pure
/// function of the leaf values (reseed any dropout inside).
using GradCheckFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Max over every input element of |analytic - numeric| / max(1, |numeric|),
/// with the numeric gradient from central differences of step eps.
inline double grad_check(const GradCheckFn& fn, const std::vector<Tensor<double>>& inputs, double eps = 1e-5)
{
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in, true));
    Var<double> loss = fn(tape, leaves);
    tape.backward(loss);

    const auto evaluate = [&](const std::vector<Tensor<double>>& values) {
        Tape<double> probe(false);
        std::vector<Var<double>> xs;
        for (const auto& v : values) xs.push_back(probe.leaf(v));
        return fn(probe, xs).value()[0];
    };

    double worst = 0.0;
    std::vector<Tensor<double>> work = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor<double>& analytic = leaves[k].grad();
        for (Index i = 0; i < inputs[k].size(); ++i) {
            const double x0 = work[k][i];
            work[k][i] = x0 + eps;
            const double fp = evaluate(work);
            work[k][i] = x0 - eps;
            const double fm = evaluate(work);
            work[k][i] = x0;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
        }
    }
    return worst;
}

} // namespace unetsharp
