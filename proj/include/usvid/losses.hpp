#pragma once

#include <cmath>
#include <vector>

#include "usvid/autodiff.hpp"
#include "usvid/ops.hpp"

namespace usvid {

/// Mean binary cross-entropy on logits, evaluated as max(z,0) - z*y + log1p(exp(-|z|)).
template <class S>
Var<S> bce_with_logits(const Var<S>& logits, const std::vector<S>& labels) {
    const std::size_t N = logits.size();
    if (labels.size() != N) throw Error("bce_with_logits: label count mismatch");
    if (N == 0) throw Error("bce_with_logits: empty input");
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        const S y = labels[i];
        if (y != S(0) && y != S(1)) throw Error("bce_with_logits: labels must be 0 or 1");
        const S z = logits.value()[i];
        acc += double(std::max(z, S(0)) - z * y + std::log1p(std::exp(-std::abs(z))));
    }
    return make_op<S>("bce_with_logits", Tensor<S>::scalar(static_cast<S>(acc / double(N))), {logits},
                      [logits, labels, N](const Tensor<S>& g) {
                          auto& d = logits.node().grad_buffer();
                          const S s = g[0] / static_cast<S>(N);
                          for (std::size_t i = 0; i < N; ++i)
                              d[i] += s * (detail::sigmoid(logits.value()[i]) - labels[i]);
                      });
}

/// Mean squared error.
template <class S>
Var<S> mse(const Var<S>& preds, const std::vector<S>& targets) {
    const std::size_t N = preds.size();
    if (N == 0) throw Error("mse: empty input");
    if (targets.size() != N) throw Error("mse: length mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        const double r = double(preds.value()[i]) - double(targets[i]);
        acc += r * r;
    }
    return make_op<S>("mse", Tensor<S>::scalar(static_cast<S>(acc / double(N))), {preds},
                      [preds, targets, N](const Tensor<S>& g) {
                          auto& d = preds.node().grad_buffer();
                          const S s = S(2) * g[0] / static_cast<S>(N);
                          for (std::size_t i = 0; i < N; ++i) d[i] += s * (preds.value()[i] - targets[i]);
                      });
}

}  // namespace usvid
