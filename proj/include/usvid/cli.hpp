#pragma once

// Command implementations behind the `usvid` tool. Each command takes a plain options
// struct, writes its artifacts plus a run.json provenance record, and throws usvid::Error
// on failure. Argument parsing lives in tools/usvid.cpp.

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "usvid/dataio.hpp"
#include "usvid/inspect.hpp"
#include "usvid/model.hpp"
#include "usvid/synthdata.hpp"
#include "usvid/train.hpp"

namespace usvid::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Hashing

inline std::string sha1_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("sha1 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

/// Hash of the bytes as git would name them ("blob <size>\0" prefix).
inline std::string git_blob_sha1(std::string_view bytes) {
    std::string buf = "blob " + std::to_string(bytes.size());
    buf.push_back('\0');
    buf.append(bytes);
    return sha1_hex(buf);
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("write failed: " + p.string());
}

inline std::string file_hash(const fs::path& p) { return git_blob_sha1(read_file(p)); }

/// Hash over a manifest and every clip file it references, in manifest order.
inline json manifest_inputs(const fs::path& manifest_path, const Manifest& m) {
    std::string tree;
    for (const auto& r : m.rows) tree += file_hash(m.base_dir / r.path) + " " + r.path + "\n";
    return json{{"manifest", fs::absolute(manifest_path).lexically_normal().string()},
                {"manifest_sha1", file_hash(manifest_path)},
                {"clips_sha1", sha1_hex(tree)},
                {"num_clips", m.rows.size()}};
}

/// Writes dir/run.json. content_hash covers the resolved config and the input hashes.
inline json write_run_json(const fs::path& dir, const std::string& command, const json& config, const json& inputs,
                           const json& outputs, const json& extra = json::object()) {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["inputs"] = inputs;
    j["content_hash"] = sha1_hex(config.dump() + "\n" + inputs.dump());
    j["outputs"] = outputs;
    for (const auto& [k, v] : extra.items()) j[k] = v;
    write_text(dir / "run.json", j.dump(2) + "\n");
    return j;
}

// ---------------------------------------------------------------------------
// Run configuration

struct DataConfig {
    std::string manifest;
    std::optional<std::size_t> train_groups;  // keep this many training groups
};

inline void to_json(json& j, const DataConfig& d) {
    j = json{{"manifest", d.manifest}};
    if (d.train_groups) j["train_groups"] = *d.train_groups;
    else j["train_groups"] = nullptr;
}

inline void from_json(const json& j, DataConfig& d) {
    d.manifest = j.value("manifest", d.manifest);
    if (j.contains("train_groups") && !j.at("train_groups").is_null())
        d.train_groups = j.at("train_groups").get<std::size_t>();
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    std::string output_dir;
    std::uint64_t seed = 0;

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = seed;
        return t;
    }
};

/// Every key a run config may contain, with default values.
inline json run_config_template() {
    RunConfig rc;
    return json{{"model", rc.model}, {"train", rc.train}, {"data", rc.data}, {"output_dir", ""}, {"seed", 0}};
}

/// Resolved form: every field explicit, paths absolute, learning rate filled in.
inline json resolved_json(const RunConfig& rc) {
    TrainConfig t = rc.train;
    t.lr = t.initial_lr(rc.model.head);
    DataConfig d = rc.data;
    if (!d.manifest.empty()) d.manifest = fs::absolute(d.manifest).lexically_normal().string();
    return json{{"model", rc.model},
                {"train", t},
                {"data", d},
                {"output_dir", rc.output_dir.empty() ? "" : fs::absolute(rc.output_dir).lexically_normal().string()},
                {"seed", rc.seed}};
}

/// The configuration stored inside checkpoints: everything that determines the weights,
/// nothing that depends on where files live.
inline json checkpoint_echo(const RunConfig& rc) {
    TrainConfig t = rc.train;
    t.lr = t.initial_lr(rc.model.head);
    return json{{"model", rc.model}, {"train", t}, {"seed", rc.seed}};
}

class ConfigError : public Error {
public:
    ConfigError(const std::string& what, std::vector<std::string> keys) : Error(what), keys_(std::move(keys)) {}
    const std::vector<std::string>& keys() const { return keys_; }

private:
    std::vector<std::string> keys_;
};

namespace detail {

inline void collect_unknown(const json& j, const json& tmpl, const std::string& prefix, std::vector<std::string>& bad) {
    for (const auto& [k, v] : j.items()) {
        const std::string path = prefix.empty() ? k : prefix + "." + k;
        if (!tmpl.contains(k)) {
            bad.push_back(path);
            continue;
        }
        const auto& t = tmpl.at(k);
        if (t.is_object()) {
            if (!v.is_object()) bad.push_back(path);
            else collect_unknown(v, t, path, bad);
        }
    }
}

}  // namespace detail

/// Parses a run config. A run.json written by `train` is accepted as well; its embedded
/// resolved config is used.
inline RunConfig parse_run_config(const json& input) {
    const json* j = &input;
    if (input.is_object() && input.contains("command") && input.contains("config")) {
        if (input.at("command") != "train") throw Error("config: run.json was written by '" +
                                                        input.at("command").get<std::string>() + "', not 'train'");
        j = &input.at("config");
    }
    if (!j->is_object()) throw Error("config: expected a JSON object");
    std::vector<std::string> bad;
    detail::collect_unknown(*j, run_config_template(), "", bad);
    if (!bad.empty()) {
        std::string msg = "config: unknown keys:";
        for (const auto& b : bad) msg += " " + b;
        throw ConfigError(msg, bad);
    }
    RunConfig rc;
    try {
        if (j->contains("model")) j->at("model").get_to(rc.model);
        if (j->contains("train")) j->at("train").get_to(rc.train);
        if (j->contains("data")) j->at("data").get_to(rc.data);
        rc.output_dir = j->value("output_dir", rc.output_dir);
        rc.seed = j->value("seed", rc.seed);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    rc.model.validate();
    rc.train.validate();
    return rc;
}

inline RunConfig load_run_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Worker pool for sweeps

/// USVID_THREADS if set and positive, otherwise the hardware concurrency.
inline std::size_t worker_count() {
    if (const char* env = std::getenv("USVID_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
        throw Error("USVID_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(0..n-1) on up to `threads` workers; rethrows the first failure.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < n;) {
            {
                std::lock_guard lock(mu);
                if (failure) return;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// gen

inline json gen_config_json(TaskKind task, const GenConfig& g, std::uint64_t seed) {
    json j{{"task", task_name(task)},
           {"seed", seed},
           {"n_clips", g.n_clips},
           {"channels", g.channels},
           {"image_size", g.image_size},
           {"t_min", g.t_min},
           {"t_max", g.t_max},
           {"noise_std", g.noise_std},
           {"n_groups", g.groups()}};
    switch (task) {
        case TaskKind::keyframe:
            j["blob_radius"] = g.blob_radius;
            j["bright_intensity"] = g.bright_intensity;
            j["dim_intensity"] = g.dim_intensity;
            j["k_min"] = g.k_min;
            j["k_max"] = g.k_max;
            break;
        case TaskKind::area_ratio:
            j["disk_radius"] = g.disk_radius;
            j["amp_min"] = g.amp_min;
            j["amp_max"] = g.amp_max;
            j["freq_min"] = g.freq_min;
            j["freq_max"] = g.freq_max;
            j["disk_intensity"] = g.disk_intensity;
            break;
        case TaskKind::motion:
            j["blob_radius"] = g.blob_radius;
            j["orbit_radius"] = g.orbit_radius;
            j["angular_speed"] = g.angular_speed;
            j["motion_intensity"] = g.motion_intensity;
            break;
    }
    return j;
}

struct GenOptions {
    TaskKind task = TaskKind::keyframe;
    GenConfig cfg;
    std::uint64_t seed = 0;
    fs::path out;
    bool force = false;
};

inline Manifest cmd_gen(const GenOptions& o) {
    if (o.out.empty()) throw Error("gen: --out is required");
    o.cfg.validate(o.task);
    if (fs::exists(o.out)) {
        if (!fs::is_directory(o.out)) throw Error("gen: " + o.out.string() + " exists and is not a directory");
        if (!fs::is_empty(o.out)) {
            if (!o.force) throw Error("gen: output directory " + o.out.string() + " is not empty (use --force)");
            fs::remove_all(o.out / "clips");
        }
    }
    auto clips = generate_task(o.task, o.cfg, o.seed);
    assign_group_splits(clips, o.seed);
    const Manifest m = write_dataset(clips, o.task, o.out);

    const Manifest back = read_manifest(o.out / "manifest.csv");
    validate_manifest_files(back);
    if (back.rows.size() != o.cfg.n_clips) throw Error("gen: manifest row count mismatch after write");
    const json inputs = json::object();
    write_run_json(o.out, "gen", gen_config_json(o.task, o.cfg, o.seed), inputs, manifest_inputs(o.out / "manifest.csv", back));
    return m;
}

// ---------------------------------------------------------------------------
// train

struct TrainData {
    Manifest manifest;
    std::vector<VideoClip> train, val;
};

inline TrainData load_train_data(const RunConfig& rc) {
    if (rc.data.manifest.empty()) throw Error("config: data.manifest is required");
    TrainData d;
    d.manifest = read_manifest(rc.data.manifest);
    if (rc.data.train_groups) d.manifest = subsample_train_groups(d.manifest, *rc.data.train_groups, rc.seed);
    d.train = load_clips(d.manifest, "train");
    d.val = load_clips(d.manifest, "val");
    if (d.train.empty()) throw Error("train: manifest has no training clips");
    if (d.val.empty()) throw Error("train: manifest has no validation clips");
    return d;
}

struct TrainOutcome {
    FitResult fit;
    fs::path dir;
    json run;
};

/// Trains from a run config and writes checkpoint.usvm, history.csv, config.json and
/// run.json into output_dir. `quiet` suppresses per-epoch progress lines.
inline TrainOutcome cmd_train(const RunConfig& rc, bool quiet = false) {
    if (rc.output_dir.empty()) throw Error("config: output_dir is required");
    const fs::path dir = rc.output_dir;
    fs::create_directories(dir);
    const TrainData data = load_train_data(rc);

    const fs::path ck_path = dir / "checkpoint.usvm";
    FitOptions fo;
    fo.checkpoint_path = ck_path;
    fo.config_echo = checkpoint_echo(rc);
    if (!quiet)
        fo.on_epoch = [](const EpochRecord& e) {
            std::fprintf(stderr, "epoch %zu  train_loss %.5f  val_loss %.5f  metric %.4f  lr %.3g\n", e.epoch,
                         e.train_loss, e.val_loss, e.metric, e.lr);
        };
    TrainOutcome out;
    out.dir = dir;
    out.fit = fit(rc.model, rc.train_config(), data.train, data.val, fo);

    Checkpoint ck;
    ck.config = fo.config_echo;
    ck.params = out.fit.best_params;
    write_checkpoint(ck, ck_path);
    write_text(dir / "history.csv", history_csv(out.fit.history));
    const json resolved = resolved_json(rc);
    write_text(dir / "config.json", resolved.dump(2) + "\n");

    if (read_checkpoint(ck_path).params != ck.params) throw Error("train: checkpoint did not read back identically");
    const json outputs{{"checkpoint.usvm", file_hash(ck_path)}, {"history.csv", file_hash(dir / "history.csv")}};
    json extra{{"best_epoch", out.fit.best_epoch}, {"epochs_run", out.fit.history.size()}, {"diverged", out.fit.diverged}};
    if (out.fit.diverged) extra["divergence"] = out.fit.divergence_message;
    if (rc.data.train_groups) extra["train_groups_kept"] = data.manifest.groups("train");
    out.run = write_run_json(dir, "train", resolved, manifest_inputs(rc.data.manifest, read_manifest(rc.data.manifest)),
                             outputs, extra);
    if (out.fit.diverged) throw Error("train: training diverged (" + out.fit.divergence_message + ")");
    return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    fs::path checkpoint;
    fs::path manifest;
    std::string split = "test";
    std::size_t batch_size = 20;
    fs::path out;  // default: <checkpoint dir>/eval_<split>
};

inline ModelConfig checkpoint_model(const Checkpoint& ck) {
    ModelConfig cfg = ck.model_config();
    cfg.validate();
    return cfg;
}

inline json cmd_eval(const EvalOptions& o) {
    if (!fs::exists(o.checkpoint)) throw Error("eval: checkpoint " + o.checkpoint.string() + " does not exist");
    if (o.split != "train" && o.split != "val" && o.split != "test") throw Error("eval: unknown split " + o.split);
    const Checkpoint ck = read_checkpoint(o.checkpoint);
    const ModelConfig cfg = checkpoint_model(ck);
    const Manifest m = read_manifest(o.manifest);
    const auto clips = load_clips(m, o.split);
    if (clips.empty()) throw Error("eval: split '" + o.split + "' has no clips");
    const auto res = evaluate(cfg, ck.params, clips, o.batch_size);
    const json report = make_eval_report(cfg, res, o.split);

    const fs::path dir = o.out.empty() ? o.checkpoint.parent_path() / ("eval_" + o.split) : o.out;
    write_text(dir / "report.json", report.dump(2) + "\n");
    json config{{"checkpoint", fs::absolute(o.checkpoint).lexically_normal().string()},
                {"split", o.split},
                {"batch_size", o.batch_size}};
    json inputs = manifest_inputs(o.manifest, m);
    inputs["checkpoint_sha1"] = file_hash(o.checkpoint);
    write_run_json(dir, "eval", config, inputs, json{{"report.json", file_hash(dir / "report.json")}});
    return report;
}

// ---------------------------------------------------------------------------
// sweeps

/// Metric of the epoch whose weights were kept (lowest validation loss).
inline double best_val_metric(const FitResult& r) {
    if (r.best_epoch == 0 || r.best_epoch > r.history.size()) return std::numeric_limits<double>::quiet_NaN();
    return r.history[r.best_epoch - 1].metric;
}

struct HeadSweepRun {
    std::size_t num_heads = 0;
    std::uint64_t seed = 0;
    double val_metric = 0;
};

struct HeadSweepOptions {
    RunConfig base;
    std::vector<std::size_t> heads;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t threads = 1;
};

struct HeadSweepResult {
    std::vector<HeadSweepRun> runs;  // heads-major, seeds-minor
    std::vector<std::pair<std::size_t, double>> mean_by_heads;
};

inline HeadSweepResult cmd_sweep_heads(const HeadSweepOptions& o) {
    if (o.heads.empty()) throw Error("sweep-heads: no head counts given");
    if (o.seeds.empty()) throw Error("sweep-heads: no seeds given");
    if (o.base.output_dir.empty()) throw Error("config: output_dir is required");
    if (o.base.model.architecture != Architecture::usvn || o.base.model.pooling != PoolingKind::attention)
        throw Error("sweep-heads: the base model must use attention pooling");
    for (auto h : o.heads) head_width(o.base.model.encoder.embed_dim, h);  // reject before training anything

    const fs::path root = o.base.output_dir;
    HeadSweepResult res;
    res.runs.resize(o.heads.size() * o.seeds.size());
    parallel_for(res.runs.size(), o.threads, [&](std::size_t i) {
        const std::size_t h = o.heads[i / o.seeds.size()];
        const std::uint64_t s = o.seeds[i % o.seeds.size()];
        RunConfig rc = o.base;
        rc.model.num_heads = h;
        rc.seed = s;
        rc.output_dir = (root / ("heads" + std::to_string(h) + "_seed" + std::to_string(s))).string();
        const auto out = cmd_train(rc, true);
        res.runs[i] = {h, s, best_val_metric(out.fit)};
    });

    std::ostringstream mean_csv, run_csv;
    mean_csv << "n_heads,val_metric\n";
    run_csv << "n_heads,seed,val_metric\n";
    char buf[128];
    for (std::size_t a = 0; a < o.heads.size(); ++a) {
        double acc = 0;
        for (std::size_t b = 0; b < o.seeds.size(); ++b) {
            const auto& r = res.runs[a * o.seeds.size() + b];
            acc += r.val_metric;
            std::snprintf(buf, sizeof buf, "%zu,%llu,%.9g\n", r.num_heads, static_cast<unsigned long long>(r.seed),
                          r.val_metric);
            run_csv << buf;
        }
        const double mean = acc / double(o.seeds.size());
        res.mean_by_heads.emplace_back(o.heads[a], mean);
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", o.heads[a], mean);
        mean_csv << buf;
    }
    write_text(root / "sweep_heads.csv", mean_csv.str());
    write_text(root / "sweep_heads_runs.csv", run_csv.str());
    json config = resolved_json(o.base);
    config["heads"] = o.heads;
    config["seeds"] = o.seeds;
    write_run_json(root, "sweep-heads", config,
                   manifest_inputs(o.base.data.manifest, read_manifest(o.base.data.manifest)),
                   json{{"sweep_heads.csv", file_hash(root / "sweep_heads.csv")},
                        {"sweep_heads_runs.csv", file_hash(root / "sweep_heads_runs.csv")}});
    return res;
}

/// Applies a model name from the sample sweep (usvn, avg, max, temporal) to a base config.
inline ModelConfig model_variant(ModelConfig base, const std::string& name) {
    if (name == "usvn") {
        base.architecture = Architecture::usvn;
        base.pooling = PoolingKind::attention;
    } else if (name == "avg") {
        base.architecture = Architecture::usvn;
        base.pooling = PoolingKind::average;
    } else if (name == "max") {
        base.architecture = Architecture::usvn;
        base.pooling = PoolingKind::max;
    } else if (name == "temporal") {
        base.architecture = Architecture::temporal;
    } else {
        throw Error("unknown model '" + name + "' (expected usvn, avg, max or temporal)");
    }
    return base;
}

struct SampleSweepRow {
    std::string model;
    std::size_t n_groups = 0;
    double test_metric = 0;
    std::uint64_t seed = 0;
};

struct SampleSweepOptions {
    RunConfig base;
    std::vector<std::optional<std::size_t>> group_counts;  // nullopt = every training group
    std::vector<std::string> models{"usvn", "avg", "max", "temporal"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t threads = 1;
};

inline std::string sample_sweep_csv(const std::vector<SampleSweepRow>& rows) {
    std::ostringstream os;
    os << "model,n_groups,test_metric,seed\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, ",%zu,%.9g,%llu\n", r.n_groups, r.test_metric,
                      static_cast<unsigned long long>(r.seed));
        os << r.model << buf;
    }
    return os.str();
}

inline std::vector<SampleSweepRow> cmd_sweep_samples(const SampleSweepOptions& o) {
    if (o.group_counts.empty() || o.models.empty() || o.seeds.empty())
        throw Error("sweep-samples: counts, models and seeds must be non-empty");
    if (o.base.output_dir.empty()) throw Error("config: output_dir is required");
    for (const auto& m : o.models) model_variant(o.base.model, m).validate();
    const Manifest full = read_manifest(o.base.data.manifest);
    const std::size_t available = full.groups("train").size();
    for (const auto& c : o.group_counts)
        if (c && (*c == 0 || *c > available))
            throw Error("sweep-samples: group count " + std::to_string(*c) + " outside [1, " +
                        std::to_string(available) + "]");
    const auto test = load_clips(full, "test");
    if (test.empty()) throw Error("sweep-samples: manifest has no test clips");

    const fs::path root = o.base.output_dir;
    const std::size_t nc = o.group_counts.size(), ns = o.seeds.size();
    std::vector<SampleSweepRow> rows(o.models.size() * nc * ns);
    parallel_for(rows.size(), o.threads, [&](std::size_t i) {
        const auto& model = o.models[i / (nc * ns)];
        const auto& count = o.group_counts[(i / ns) % nc];
        const std::uint64_t s = o.seeds[i % ns];
        RunConfig rc = o.base;
        rc.model = model_variant(o.base.model, model);
        rc.seed = s;
        rc.data.train_groups = count ? *count : available;
        rc.output_dir =
            (root / (model + "_g" + std::to_string(*rc.data.train_groups) + "_seed" + std::to_string(s))).string();
        const auto out = cmd_train(rc, true);
        const auto ev = evaluate(rc.model, out.fit.best_params, test, rc.train.eval_batch_size);
        rows[i] = {model, *rc.data.train_groups, ev.metric, s};
    });

    write_text(root / "sweep_samples.csv", sample_sweep_csv(rows));
    json config = resolved_json(o.base);
    auto counts = json::array();
    for (const auto& c : o.group_counts) counts.push_back(c ? json(*c) : json("full"));
    config["group_counts"] = counts;
    config["models"] = o.models;
    config["seeds"] = o.seeds;
    write_run_json(root, "sweep-samples", config, manifest_inputs(o.base.data.manifest, full),
                   json{{"sweep_samples.csv", file_hash(root / "sweep_samples.csv")}});
    return rows;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectOptions {
    fs::path checkpoint;
    fs::path manifest;
    std::string split = "val";
    std::size_t batch = 80;
    std::size_t heads = 4;
    std::size_t topk = 10;
    std::uint64_t seed = 0;
    fs::path out;  // default: <checkpoint dir>/inspect
};

/// Seeded choice of up to `batch` clips of a split, kept in manifest order.
inline std::vector<VideoClip> inspection_batch(const Manifest& m, const std::string& split, std::size_t batch,
                                               std::uint64_t seed) {
    auto rows = m.split_rows(split);
    if (rows.empty()) throw Error("inspect: split '" + split + "' has no clips");
    if (rows.size() > batch) {
        std::vector<ManifestRow> chosen;
        auto rng = make_rng(seed, {tag(Stream::inspect)});
        std::sample(rows.begin(), rows.end(), std::back_inserter(chosen), batch, rng);
        rows = std::move(chosen);
    }
    Manifest sub;
    sub.base_dir = m.base_dir;
    sub.rows = std::move(rows);
    return load_clips(sub);
}

inline PrototypeReport cmd_inspect(const InspectOptions& o, std::ostream& warn = std::cerr) {
    if (!fs::exists(o.checkpoint)) throw Error("inspect: checkpoint " + o.checkpoint.string() + " does not exist");
    if (o.batch == 0 || o.heads == 0 || o.topk == 0) throw Error("inspect: batch, heads and topk must be positive");
    const Checkpoint ck = read_checkpoint(o.checkpoint);
    const ModelConfig cfg = checkpoint_model(ck);
    if (cfg.architecture != Architecture::usvn || cfg.pooling != PoolingKind::attention)
        throw Error("inspect: no attention records (checkpoint does not use attention pooling)");
    const Manifest m = read_manifest(o.manifest);
    const auto clips = inspection_batch(m, o.split, o.batch, o.seed);
    const auto res = evaluate(cfg, ck.params, clips);
    if (res.records.empty()) throw Error("inspect: no attention records");

    std::vector<std::string> ids;
    std::size_t total_frames = 0;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        ids.push_back(res.predictions[i].clip_id);
        total_frames += res.records[i].num_valid();
    }
    if (o.topk > total_frames)
        warn << "inspect: requested top " << o.topk << " frames but the batch holds only " << total_frames
             << "; reporting all of them\n";
    if (o.heads > cfg.num_heads)
        warn << "inspect: requested " << o.heads << " heads but the model has " << cfg.num_heads << "\n";
    const auto rep = prototype_report(res.records, ids, o.heads, o.topk);

    const fs::path dir = o.out.empty() ? o.checkpoint.parent_path() / "inspect" : o.out;
    fs::create_directories(dir);
    if (fs::exists(dir / "frames")) fs::remove_all(dir / "frames");
    write_text(dir / "prototypes.csv", prototype_csv(rep));
    export_prototype_frames(rep, clips, dir / "frames");
    for (const auto& r : rep.rows)
        if (read_clip_shape(dir / "frames" / prototype_frame_name(r))[0] != 1)
            throw Error("inspect: exported frame failed validation");

    json config{{"checkpoint", fs::absolute(o.checkpoint).lexically_normal().string()},
                {"split", o.split},
                {"batch", o.batch},
                {"heads", o.heads},
                {"topk", o.topk},
                {"seed", o.seed}};
    json inputs = manifest_inputs(o.manifest, m);
    inputs["checkpoint_sha1"] = file_hash(o.checkpoint);
    auto heads = json::array();
    for (const auto& h : rep.heads) heads.push_back(json{{"head", h.head}, {"mean_entropy", h.mean_entropy}});
    write_run_json(dir, "inspect", config, inputs, json{{"prototypes.csv", file_hash(dir / "prototypes.csv")}},
                   json{{"selected_heads", heads}});
    return rep;
}

}  // namespace usvid::cli
