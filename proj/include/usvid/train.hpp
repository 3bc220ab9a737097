#pragma once

// Optimizer, plateau schedule with early stopping, evaluation and the fit loop.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "usvid/autodiff.hpp"
#include "usvid/dataio.hpp"
#include "usvid/losses.hpp"
#include "usvid/metrics.hpp"
#include "usvid/model.hpp"
#include "usvid/random.hpp"

namespace usvid {

struct TrainConfig {
    std::optional<double> lr;  // unset: 3e-5 for binary heads, 1e-3 for regression heads
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.001;
    std::size_t batch_size = 20;
    std::size_t eval_batch_size = 20;
    std::size_t frames_per_clip = 32;
    std::size_t plateau_patience = 3;
    double plateau_factor = 0.1;
    std::size_t early_stop_patience = 10;
    std::size_t max_epochs = 100;
    // 0 keeps one pass per epoch. Otherwise the training set is cycled (fresh frame
    // draws each pass) until an epoch holds at least this many optimizer steps.
    std::size_t min_steps_per_epoch = 0;
    std::uint64_t seed = 0;

    double initial_lr(HeadKind head) const {
        if (lr) return *lr;
        return head == HeadKind::binary_logit ? 3e-5 : 1e-3;
    }

    void validate() const {
        if (lr && !(*lr > 0)) throw Error("train: learning rate must be positive");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw Error("train: betas must be in [0,1)");
        if (!(eps > 0) || weight_decay < 0) throw Error("train: eps must be positive, weight decay non-negative");
        if (batch_size == 0 || eval_batch_size == 0 || frames_per_clip == 0) throw Error("train: sizes must be positive");
        if (plateau_patience == 0 || early_stop_patience == 0) throw Error("train: patience values must be >= 1");
        if (!(plateau_factor > 0 && plateau_factor < 1)) throw Error("train: plateau factor must be in (0,1)");
        if (max_epochs == 0) throw Error("train: max_epochs must be positive");
    }
};

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
    j = nlohmann::ordered_json{};
    if (c.lr) j["lr"] = *c.lr;
    else j["lr"] = nullptr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
    j["weight_decay"] = c.weight_decay;
    j["batch_size"] = c.batch_size;
    j["eval_batch_size"] = c.eval_batch_size;
    j["frames_per_clip"] = c.frames_per_clip;
    j["plateau_patience"] = c.plateau_patience;
    j["plateau_factor"] = c.plateau_factor;
    j["early_stop_patience"] = c.early_stop_patience;
    j["max_epochs"] = c.max_epochs;
    j["min_steps_per_epoch"] = c.min_steps_per_epoch;
}

inline void from_json(const nlohmann::ordered_json& j, TrainConfig& c) {
    if (j.contains("lr") && !j.at("lr").is_null()) c.lr = j.at("lr").get<double>();
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
    c.frames_per_clip = j.value("frames_per_clip", c.frames_per_clip);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.min_steps_per_epoch = j.value("min_steps_per_epoch", c.min_steps_per_epoch);
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double metric = 0;
    double lr = 0;
};

struct TrainState {
    std::map<std::string, Tensor<float>> first_moment;
    std::map<std::string, Tensor<float>> second_moment;
    std::size_t step = 0;
    double lr = 0;
    std::size_t epochs_since_improvement = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<EpochRecord> history;

    explicit TrainState(double initial_lr = 0) : lr(initial_lr) {}
};

/// One Adam step with decoupled weight decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g²
///   w <- w - lr*wd*w - lr * m̂ / (sqrt(v̂) + eps)
/// with bias-corrected m̂, v̂.
inline void adamw_step(ParamMap<float>& params, const Gradients<float>& grads, TrainState& state,
                       const TrainConfig& cfg) {
    for (const auto& [name, g] : grads) {
        if (!g.all_finite()) throw Error("adamw_step: non-finite gradient for parameter " + name);
        if (!params.count(name)) throw Error("adamw_step: gradient for unknown parameter " + name);
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (auto& [name, w] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw Error("adamw_step: missing gradient for parameter " + name);
        const auto& g = git->second;
        if (g.shape() != w.shape()) throw Error("adamw_step: gradient shape mismatch for " + name);
        auto& m = state.first_moment.try_emplace(name, w.shape()).first->second;
        auto& v = state.second_moment.try_emplace(name, w.shape()).first->second;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double wi = w[i];
            const double update = state.lr * cfg.weight_decay * wi + state.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
            w[i] = static_cast<float>(wi - update);
        }
    }
}

struct ScheduleDecision {
    double lr = 0;
    bool stop = false;
    bool improved = false;
    bool reduced = false;
};

/// Plateau policy: a strictly lower validation loss resets the counter; otherwise the
/// counter grows, the learning rate is multiplied by plateau_factor every
/// plateau_patience consecutive non-improving epochs, and training stops once the
/// counter reaches early_stop_patience. Reductions never reset the counter.
inline ScheduleDecision plateau_schedule_update(TrainState& state, double val_loss, const TrainConfig& cfg) {
    ScheduleDecision d;
    if (std::isfinite(val_loss) && val_loss < state.best_val_loss) {
        state.best_val_loss = val_loss;
        state.epochs_since_improvement = 0;
        d.improved = true;
    } else {
        ++state.epochs_since_improvement;
        if (state.epochs_since_improvement % cfg.plateau_patience == 0) {
            state.lr *= cfg.plateau_factor;
            d.reduced = true;
        }
    }
    d.stop = state.epochs_since_improvement >= cfg.early_stop_patience;
    d.lr = state.lr;
    return d;
}

// ---------------------------------------------------------------------------
// Loss and evaluation

template <class S>
Var<S> model_loss(HeadKind head, const ForwardOutput<S>& out, const std::vector<float>& labels) {
    std::vector<S> y(labels.begin(), labels.end());
    return head == HeadKind::binary_logit ? bce_with_logits(out.prediction, y) : mse(out.prediction, y);
}

inline std::string metric_name(HeadKind head) { return head == HeadKind::binary_logit ? "roc_auc" : "r2"; }

/// Task metric; NaN when undefined (single-class labels, constant targets).
inline double task_metric(HeadKind head, const std::vector<double>& preds, const std::vector<double>& labels) {
    try {
        return head == HeadKind::binary_logit ? roc_auc(preds, labels) : r_squared(preds, labels);
    } catch (const Error&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

struct ClipPrediction {
    std::string clip_id;
    double label = 0;
    double prediction = 0;
    std::optional<double> esv, edv;
};

struct EvalResult {
    double loss = 0;
    double metric = 0;
    std::string metric_name;
    std::vector<ClipPrediction> predictions;
    std::vector<AttentionRecord> records;  // attention pooling only, in clip order
};

/// Evaluation-mode pass over every frame of every clip (uniformly resampled for the
/// temporal baseline), in the given clip order.
inline EvalResult evaluate(const ModelConfig& cfg, const ParamMap<float>& params, const std::vector<VideoClip>& clips,
                           std::size_t batch_size = 20) {
    if (clips.empty()) throw Error("evaluate: no clips");
    EvalResult res;
    res.metric_name = metric_name(cfg.head);
    const auto vars = make_leaves(params, false);
    double loss_sum = 0;
    std::vector<double> preds, labels;
    for (std::size_t start = 0; start < clips.size(); start += batch_size) {
        const std::size_t end = std::min(clips.size(), start + batch_size);
        std::vector<BatchItem> items;
        for (std::size_t i = start; i < end; ++i) items.push_back({eval_frames(cfg, clips[i]), clips[i].label, clips[i].clip_id});
        const ClipBatch batch = collate(items);
        const auto out = forward(cfg, vars, batch, ForwardMode::eval());
        loss_sum += double(model_loss(cfg.head, out, batch.labels).value()[0]) * double(end - start);
        for (std::size_t b = 0; b < end - start; ++b) {
            ClipPrediction p;
            p.clip_id = batch.clip_ids[b];
            p.label = batch.labels[b];
            p.prediction = out.prediction.value()[b];
            if (cfg.head == HeadKind::ef_volumes) {
                p.esv = out.esv.value()[b];
                p.edv = out.edv.value()[b];
            }
            preds.push_back(p.prediction);
            labels.push_back(p.label);
            res.predictions.push_back(std::move(p));
        }
        for (auto& r : out.records) res.records.push_back(std::move(r));
    }
    res.loss = loss_sum / double(clips.size());
    res.metric = task_metric(cfg.head, preds, labels);
    return res;
}

/// Mean per-head entropy over a set of attention records.
inline std::vector<double> mean_head_entropy(const std::vector<AttentionRecord>& records) {
    if (records.empty()) return {};
    std::vector<double> acc(records[0].num_heads, 0.0);
    for (const auto& r : records) {
        if (r.num_heads != acc.size()) throw Error("mean_head_entropy: inconsistent head counts");
        const auto e = attention_entropy(r);
        for (std::size_t h = 0; h < acc.size(); ++h) acc[h] += e[h];
    }
    for (auto& v : acc) v /= double(records.size());
    return acc;
}

/// Serialized evaluation report with a fixed key order.
inline nlohmann::ordered_json make_eval_report(const ModelConfig& cfg, const EvalResult& res, const std::string& split) {
    nlohmann::ordered_json j;
    j["task_kind"] = cfg.head == HeadKind::binary_logit ? "binary" : "regression";
    j["split"] = split;
    j["evaluated_on_train_split"] = split == "train";
    j["metric_name"] = res.metric_name;
    j["metric"] = res.metric;
    j["loss"] = res.loss;
    j["num_clips"] = res.predictions.size();
    j["entropy_log_base"] = "e";
    j["head_mean_entropy"] = mean_head_entropy(res.records);
    auto rows = nlohmann::ordered_json::array();
    for (const auto& p : res.predictions) {
        nlohmann::ordered_json r;
        r["clip_id"] = p.clip_id;
        r["label"] = p.label;
        r["prediction"] = p.prediction;
        if (p.esv) {
            r["esv"] = *p.esv;
            r["edv"] = *p.edv;
        }
        rows.push_back(std::move(r));
    }
    j["predictions"] = std::move(rows);
    return j;
}

// ---------------------------------------------------------------------------
// Fit loop

struct FitOptions {
    std::optional<std::filesystem::path> checkpoint_path;
    nlohmann::ordered_json config_echo;  // stored in the checkpoint
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
    ParamMap<float> best_params;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    bool diverged = false;
    std::string divergence_message;
};

/// Training-time input for one clip: a random frame subset for pooled models, uniform
/// resampling for the temporal baseline.
template <class Rng>
FrameSet train_frames(const ModelConfig& cfg, const TrainConfig& tc, const VideoClip& clip, Rng& rng) {
    return cfg.architecture == Architecture::usvn ? sample_frames(clip, tc.frames_per_clip, rng)
                                                  : resample_uniform(clip, cfg.temporal.clip_length);
}

inline FitResult fit(const ModelConfig& cfg, const TrainConfig& tc, const std::vector<VideoClip>& train,
                     const std::vector<VideoClip>& val, const FitOptions& opts = {}) {
    cfg.validate();
    tc.validate();
    if (train.empty()) throw Error("fit: empty training set");
    if (val.empty()) throw Error("fit: empty validation set");

    ParamMap<float> params = init_params(cfg, tc.seed);
    TrainState state(tc.initial_lr(cfg.head));
    FitResult res;
    res.best_params = params;

    auto save = [&]() {
        if (!opts.checkpoint_path) return;
        Checkpoint ck;
        ck.config = opts.config_echo.is_null() ? nlohmann::ordered_json{{"model", cfg}} : opts.config_echo;
        ck.params = params;
        write_checkpoint(ck, *opts.checkpoint_path);
    };

    std::vector<std::size_t> order(train.size());
    const std::size_t steps_per_pass = (train.size() + tc.batch_size - 1) / tc.batch_size;
    const std::size_t passes =
        std::max<std::size_t>(1, (tc.min_steps_per_epoch + steps_per_pass - 1) / steps_per_pass);
    for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        const double epoch_lr = state.lr;
        double loss_sum = 0;
        try {
            for (std::size_t pass = 0, bi = 0; pass < passes; ++pass) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                auto shuffle_rng = pass == 0 ? make_rng(tc.seed, {tag(Stream::shuffle), epoch})
                                             : make_rng(tc.seed, {tag(Stream::shuffle), epoch, pass});
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++bi) {
                    const std::size_t end = std::min(order.size(), start + tc.batch_size);
                    std::vector<BatchItem> items;
                    for (std::size_t k = start; k < end; ++k) {
                        const auto& clip = train[order[k]];
                        auto rng = pass == 0 ? make_rng(tc.seed, {tag(Stream::sample), epoch, order[k]})
                                             : make_rng(tc.seed, {tag(Stream::sample), epoch, order[k], pass});
                        items.push_back({train_frames(cfg, tc, clip, rng), clip.label, clip.clip_id});
                    }
                    const ClipBatch batch = collate(items);
                    auto vars = make_leaves(params, true);
                    const auto out = forward(cfg, vars, batch,
                                             ForwardMode::train(derive_seed(tc.seed, {tag(Stream::dropout), epoch, bi})));
                    const auto loss = model_loss(cfg.head, out, batch.labels);
                    backward(loss);
                    Gradients<float> grads;
                    for (const auto& [name, v] : vars) grads.emplace(name, v.grad());
                    adamw_step(params, grads, state, tc);
                    loss_sum += double(loss.value()[0]) * double(end - start);
                }
            }
        } catch (const Error& e) {
            res.diverged = true;
            res.divergence_message = "epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(train.size() * passes);
        rec.lr = epoch_lr;
        try {
            const auto ev = evaluate(cfg, params, val, tc.eval_batch_size);
            rec.val_loss = ev.loss;
            rec.metric = ev.metric;
        } catch (const Error& e) {
            res.diverged = true;
            res.divergence_message = "epoch " + std::to_string(epoch) + " validation: " + e.what();
            break;
        }
        const auto decision = plateau_schedule_update(state, rec.val_loss, tc);
        state.history.push_back(rec);
        if (opts.on_epoch) opts.on_epoch(rec);
        if (decision.improved) {
            res.best_params = params;
            res.best_epoch = epoch;
            save();
        }
        if (decision.stop) break;
    }
    res.history = state.history;
    return res;
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,metric,lr\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss, r.metric, r.lr);
        os << buf;
    }
    return os.str();
}

}  // namespace usvid
