#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "usvid/pooling.hpp"
#include "usvid/tensor.hpp"

namespace usvid {

/// Average ranks (1-based); tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && values[order[j]] == values[order[i]]) ++j;
        // ranks i+1 .. j averaged
        const double r = 0.5 * double(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
        i = j;
    }
    return ranks;
}

/// ROC AUC as the Mann-Whitney statistic P(s+ > s-) + 0.5 P(s+ = s-), via rank sums.
inline double roc_auc(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw Error("roc_auc: scores and labels differ in length");
    double n_pos = 0, n_neg = 0;
    for (double y : labels) {
        if (y == 1) ++n_pos;
        else if (y == 0) ++n_neg;
        else throw Error("roc_auc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0) throw Error("roc_auc: both classes must be present");
    for (double s : scores)
        if (std::isnan(s)) throw Error("roc_auc: NaN score");
    const auto ranks = average_ranks(scores);
    double rank_sum = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == 1) rank_sum += ranks[i];
    const double u = rank_sum - n_pos * (n_pos + 1) / 2;
    return u / (n_pos * n_neg);
}

/// 1 - SS_res / SS_tot about the target mean.
inline double r_squared(std::span<const double> preds, std::span<const double> targets) {
    if (preds.size() != targets.size()) throw Error("r_squared: length mismatch");
    if (targets.size() < 2) throw Error("r_squared: need at least two targets");
    const double mu = std::accumulate(targets.begin(), targets.end(), 0.0) / double(targets.size());
    double ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        ss_res += (targets[i] - preds[i]) * (targets[i] - preds[i]);
        ss_tot += (targets[i] - mu) * (targets[i] - mu);
    }
    if (ss_tot == 0) throw Error("r_squared: targets have zero variance");
    return 1.0 - ss_res / ss_tot;
}

/// Shannon entropy (natural log) of each head's attention over valid frames, 0·log 0 = 0.
inline std::vector<double> attention_entropy(const AttentionRecord& record) {
    std::vector<double> out(record.num_heads, 0.0);
    for (std::size_t h = 0; h < record.num_heads; ++h) {
        double total = 0, ent = 0;
        for (std::size_t t = 0; t < record.num_frames; ++t) {
            if (!record.mask[t]) continue;
            const double a = record.weight(h, t);
            if (a < 0) throw Error("attention_entropy: negative attention weight");
            total += a;
            if (a > 0) ent -= a * std::log(a);
        }
        if (std::abs(total - 1.0) > 1e-4)
            throw Error("attention_entropy: head " + std::to_string(h) + " weights sum to " + std::to_string(total));
        out[h] = ent;
    }
    return out;
}

}  // namespace usvid
