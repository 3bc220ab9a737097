// usvid: generate synthetic video datasets, train and evaluate video models, run sweeps
// and inspect attention heads.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "usvid/cli.hpp"

namespace {

using namespace usvid;
using namespace usvid::cli;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::size_t parse_count(const std::string& s, const char* what) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty() || s[0] == '-') throw Error(std::string(what) + ": '" + s + "' is not a count");
    return static_cast<std::size_t>(v);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& t : split_list(s)) out.push_back(parse_count(t, "--seeds"));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ultrasound-style video recognition toolkit"};
    app.require_subcommand(1);

    // gen
    GenOptions gen;
    std::string gen_task = "keyframe", gen_out;
    std::optional<std::size_t> gen_groups;
    double angular_period = 0;
    auto* g = app.add_subcommand("gen", "Generate a synthetic dataset (clip files + manifest.csv)");
    g->add_option("--task", gen_task, "keyframe | area_ratio | motion")->required();
    g->add_option("--clips", gen.cfg.n_clips, "Number of clips")->capture_default_str();
    g->add_option("--out", gen_out, "Output directory")->required();
    g->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
    g->add_flag("--force", gen.force, "Allow writing into a non-empty directory");
    g->add_option("--channels", gen.cfg.channels)->capture_default_str();
    g->add_option("--image-size", gen.cfg.image_size)->capture_default_str();
    g->add_option("--t-min", gen.cfg.t_min)->capture_default_str();
    g->add_option("--t-max", gen.cfg.t_max)->capture_default_str();
    g->add_option("--noise", gen.cfg.noise_std)->capture_default_str();
    g->add_option("--groups", gen_groups, "Group count (default clips/5)");
    g->add_option("--blob-radius", gen.cfg.blob_radius, "Fraction of image size")->capture_default_str();
    g->add_option("--bright", gen.cfg.bright_intensity)->capture_default_str();
    g->add_option("--dim", gen.cfg.dim_intensity)->capture_default_str();
    g->add_option("--k-min", gen.cfg.k_min)->capture_default_str();
    g->add_option("--k-max", gen.cfg.k_max)->capture_default_str();
    g->add_option("--disk-radius", gen.cfg.disk_radius)->capture_default_str();
    g->add_option("--amp-min", gen.cfg.amp_min)->capture_default_str();
    g->add_option("--amp-max", gen.cfg.amp_max)->capture_default_str();
    g->add_option("--freq-min", gen.cfg.freq_min)->capture_default_str();
    g->add_option("--freq-max", gen.cfg.freq_max)->capture_default_str();
    g->add_option("--orbit-radius", gen.cfg.orbit_radius)->capture_default_str();
    g->add_option("--orbit-period", angular_period, "Frames per revolution (default 16)");

    // train
    std::string train_config, train_out;
    auto* t = app.add_subcommand("train", "Train a model from a JSON run config (or a previous run.json)");
    t->add_option("--config", train_config, "Run config")->required();
    t->add_option("--output-dir", train_out, "Override output_dir");

    // eval
    EvalOptions ev;
    std::string ev_ck, ev_manifest, ev_out;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    e->add_option("--checkpoint", ev_ck)->required();
    e->add_option("--manifest", ev_manifest)->required();
    e->add_option("--split", ev.split)->capture_default_str();
    e->add_option("--batch", ev.batch_size)->capture_default_str();
    e->add_option("--out", ev_out, "Output directory (default <checkpoint dir>/eval_<split>)");

    // sweep-heads
    std::string sh_config, sh_heads, sh_seeds = "0,1,2";
    auto* sh = app.add_subcommand("sweep-heads", "Train one model per attention-head count");
    sh->add_option("--config", sh_config)->required();
    sh->add_option("--heads", sh_heads, "Comma-separated head counts")->required();
    sh->add_option("--seeds", sh_seeds)->capture_default_str();

    // sweep-samples
    std::string ss_config, ss_counts, ss_models = "usvn,avg,max,temporal", ss_seeds = "0,1,2";
    auto* ss = app.add_subcommand("sweep-samples", "Train models on nested subsets of training groups");
    ss->add_option("--config", ss_config)->required();
    ss->add_option("--group-counts", ss_counts, "Comma-separated counts; 'full' keeps every group")->required();
    ss->add_option("--models", ss_models)->capture_default_str();
    ss->add_option("--seeds", ss_seeds)->capture_default_str();

    // inspect
    InspectOptions in;
    std::string in_ck, in_manifest, in_out;
    auto* is = app.add_subcommand("inspect", "Rank attention heads by entropy and export prototype frames");
    is->add_option("--checkpoint", in_ck)->required();
    is->add_option("--manifest", in_manifest)->required();
    is->add_option("--split", in.split)->capture_default_str();
    is->add_option("--batch", in.batch)->capture_default_str();
    is->add_option("--heads", in.heads)->capture_default_str();
    is->add_option("--topk", in.topk)->capture_default_str();
    is->add_option("--seed", in.seed)->capture_default_str();
    is->add_option("--out", in_out, "Output directory (default <checkpoint dir>/inspect)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (g->parsed()) {
            gen.task = parse_task(gen_task);
            gen.out = gen_out;
            gen.cfg.n_groups = gen_groups;
            if (angular_period != 0) {
                if (!(angular_period > 0)) throw Error("gen: --orbit-period must be positive");
                gen.cfg.angular_speed = 2 * std::numbers::pi / angular_period;
            }
            const auto m = cmd_gen(gen);
            std::printf("wrote %zu clips to %s\n", m.rows.size(), gen_out.c_str());
        } else if (t->parsed()) {
            RunConfig rc = load_run_config(train_config);
            if (!train_out.empty()) rc.output_dir = train_out;
            const auto out = cmd_train(rc);
            std::printf("best epoch %zu of %zu; outputs in %s\n", out.fit.best_epoch, out.fit.history.size(),
                        out.dir.string().c_str());
        } else if (e->parsed()) {
            ev.checkpoint = ev_ck;
            ev.manifest = ev_manifest;
            ev.out = ev_out;
            const auto report = cmd_eval(ev);
            std::printf("%s %s = %.6f over %zu clips\n", ev.split.c_str(),
                        report["metric_name"].get<std::string>().c_str(), report["metric"].get<double>(),
                        report["num_clips"].get<std::size_t>());
        } else if (sh->parsed()) {
            HeadSweepOptions o;
            o.base = load_run_config(sh_config);
            for (const auto& h : split_list(sh_heads)) o.heads.push_back(parse_count(h, "--heads"));
            o.seeds = parse_seeds(sh_seeds);
            o.threads = worker_count();
            const auto res = cmd_sweep_heads(o);
            for (const auto& [h, m] : res.mean_by_heads) std::printf("heads %zu: mean val metric %.6f\n", h, m);
        } else if (ss->parsed()) {
            SampleSweepOptions o;
            o.base = load_run_config(ss_config);
            for (const auto& c : split_list(ss_counts))
                o.group_counts.push_back(c == "full" ? std::nullopt
                                                     : std::optional<std::size_t>(parse_count(c, "--group-counts")));
            o.models = split_list(ss_models);
            o.seeds = parse_seeds(ss_seeds);
            o.threads = worker_count();
            const auto rows = cmd_sweep_samples(o);
            std::fputs(sample_sweep_csv(rows).c_str(), stdout);
        } else if (is->parsed()) {
            in.checkpoint = in_ck;
            in.manifest = in_manifest;
            in.out = in_out;
            const auto rep = cmd_inspect(in);
            for (const auto& h : rep.heads) std::printf("head %zu: mean entropy %.6f\n", h.head, h.mean_entropy);
        }
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 0;
}
