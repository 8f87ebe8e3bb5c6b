#pragma once

// Command-line front end. Every subcommand writes the resolved config.json
// into its output directory.
//
// Exit codes: 0 ok, 1 runtime failure, 2 invalid config or usage,
// 3 capture violations.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cascade/experiment.hpp"
#include "cascade/qualitative.hpp"
#include "cascade/sweep.hpp"

namespace cascade::cli {

namespace fs = std::filesystem;

inline constexpr int exit_ok = 0;
inline constexpr int exit_runtime = 1;
inline constexpr int exit_config = 2;
inline constexpr int exit_capture = 3;

struct CommonArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool quiet = false;
};

// Resolves the experiment config: --config (or a fallback file, or the
// built-in defaults), then --override k=v in order, then --seed.
inline ExperimentConfig resolve_config(const CommonArgs& a, const fs::path& fallback = {}) {
    json doc = json::object();
    fs::path path = !a.config.empty() ? fs::path(a.config) : fallback;
    if (!path.empty()) {
        if (!fs::exists(path)) throw ConfigError("--config", "no such file: " + path.string());
        try {
            doc = json::parse(io::read_text(path));
        } catch (const json::parse_error& e) {
            throw ConfigError("<file>", path.string() + ": " + e.what());
        }
    }
    for (const auto& o : a.overrides) apply_override(doc, o);
    if (a.seed) doc["seed"] = *a.seed;
    auto cfg = experiment_from_json(doc);
    if (!a.out.empty()) cfg.out_dir = a.out;
    cfg.validate();
    return cfg;
}

inline fs::path prepare_out(const ExperimentConfig& cfg) {
    fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    write_config(dir, cfg);
    return dir;
}

inline ProgressFn stderr_progress(bool quiet, const std::string& label) {
    if (quiet) return {};
    return [label, last = std::chrono::steady_clock::now()](std::size_t step, std::size_t total, double loss) mutable {
        auto now = std::chrono::steady_clock::now();
        if (step + 1 != total && now - last < std::chrono::seconds(5)) return;
        last = now;
        std::fprintf(stderr, "[%s] step %zu/%zu loss %.4f\n", label.c_str(), step + 1, total, loss);
    };
}

inline void write_text(const fs::path& p, const std::string& s) { io::write_atomic(p, s); }

// ---------------------------------------------------------------------------

inline int cmd_gen(const CommonArgs& a) {
    auto cfg = resolve_config(a);
    auto g = generate(cfg);
    save_generated(cfg.out_dir, cfg, g);
    if (!a.quiet)
        std::fprintf(stderr, "gen: %zu training tokens, %zu eval entries -> %s\n", g.train.tokens.size(),
                     g.eval.size(), cfg.out_dir.c_str());
    return exit_ok;
}

// `dataset` is a .tokens file; config.json is looked up next to it.
inline int cmd_capture_check(const CommonArgs& a, const fs::path& dataset) {
    const auto data = dataset.parent_path().empty() ? fs::path(".") : dataset.parent_path();
    auto cfg = resolve_config(a, data / "config.json");
    if (a.out.empty()) cfg.out_dir = data.string();
    auto f = load_dataset(dataset);
    if (f.dataset.block_len != cfg.block_len) throw ConfigError("L_blk", "does not match the dataset's block length");
    const auto spans = knowledge_spans(f.dataset, f.knowledge);
    const auto report = capture_check(spans, f.dataset.tokens.size(), cfg.cascade());
    fs::create_directories(cfg.out_dir);
    if (!a.out.empty()) write_config(cfg.out_dir, cfg);
    io::write_json(fs::path(cfg.out_dir) / "capture_report.json", capture_report_to_json(report, spans));
    std::printf("capture-check: %zu injections, %zu violations\n", report.n_injections, report.violations());
    return report.violations() ? exit_capture : exit_ok;
}

inline int cmd_train(const CommonArgs& a, const std::string& data) {
    auto cfg = resolve_config(a, data.empty() ? fs::path{} : fs::path(data) / "config.json");
    if (a.out.empty() && !data.empty())
        cfg.out_dir = (fs::path(data) / ("train_" + to_string(cfg.train.regime))).string();
    const auto dir = prepare_out(cfg);
    TrainingDataset ds;
    if (!data.empty()) {
        auto f = load_dataset(fs::path(data) / "train.tokens");
        if (f.dataset.block_len != cfg.block_len)
            throw ConfigError("L_blk", "does not match the dataset's block length");
        ds = std::move(f.dataset);
    } else {
        auto g = generate(cfg);
        save_generated(dir / "data", cfg, g);
        ds = std::move(g.train);
    }
    TrainReport report;
    auto models = train(ds.tokens, cfg.cascade(), cfg.model, cfg.train, report,
                        stderr_progress(a.quiet, to_string(cfg.train.regime)));
    save_training_outputs(dir, models, cfg.cascade(), cfg.train, report);
    if (!a.quiet)
        std::fprintf(stderr, "train: %zu checkpoint(s), %zu steps -> %s\n", models.size(), report.total_steps,
                     dir.c_str());
    return exit_ok;
}

inline std::vector<EvalEntry> eval_entries_for(const ExperimentConfig& cfg, const std::string& data,
                                               const fs::path& model_dir) {
    fs::path p = !data.empty() ? fs::path(data) / "eval.jsonl" : model_dir / "data" / "eval.jsonl";
    if (!fs::exists(p)) throw DataError("no eval set at " + p.string() + " (pass --data <gen dir>)");
    auto entries = load_eval_set(p);
    for (const auto& e : entries)
        if (e.tokens.size() != cfg.block_len) throw DataError("eval entry length does not match L_blk");
    return entries;
}

inline int cmd_eval(const CommonArgs& a, const std::string& data, const std::string& model_dir,
                    const std::string& scorer, std::optional<unsigned> level) {
    auto cfg = resolve_config(a, fs::path(model_dir) / "config.json");
    if (a.out.empty()) cfg.out_dir = (fs::path(model_dir) / ("eval_" + scorer)).string();
    const auto entries = eval_entries_for(cfg, data, model_dir);
    std::vector<EvalResult> results;
    if (scorer == "single") {
        fs::path ckpt = fs::path(model_dir) / "model.ckpt";
        if (level) ckpt = fs::path(model_dir) / ("model_m" + std::to_string(*level) + ".ckpt");
        else if (!fs::exists(ckpt) && cfg.train.regime == Regime::original_cascade)
            ckpt = fs::path(model_dir) / ("model_m" + std::to_string(cfg.cascade().m_max) + ".ckpt");
        const auto p = load_checkpoint<float>(ckpt);
        results = evaluate(Scorer<float>{&p, nullptr}, entries);
    } else {
        const auto bank = load_bank<float>(model_dir, cfg.cascade());
        if (!a.quiet)
            std::fprintf(stderr, "eval: ensemble over %zu level(s), %zu checkpoint(s)\n",
                         std::size_t(bank.spec.m_max - bank.spec.m_min + 1), bank.models.size());
        results = evaluate(Scorer<float>{nullptr, &bank}, entries);
    }
    const auto dir = prepare_out(cfg);
    std::string jsonl;
    for (std::size_t i = 0; i < results.size(); ++i) jsonl += eval_result_to_json(i, results[i]).dump() + "\n";
    write_text(dir / "results.jsonl", jsonl);
    const auto cells = aggregate(results);
    const auto csv = cells_csv(cells);
    write_text(dir / "cells.csv", csv);
    std::fputs(csv.c_str(), stdout);
    return exit_ok;
}

inline int cmd_weights(const CommonArgs& a, const std::string& data, const std::string& model_dir,
                       std::size_t max_entries) {
    auto cfg = resolve_config(a, fs::path(model_dir) / "config.json");
    if (a.out.empty()) cfg.out_dir = (fs::path(model_dir) / "weights").string();
    const auto entries = eval_entries_for(cfg, data, model_dir);
    const auto bank = load_bank<float>(model_dir, cfg.cascade());
    const auto dir = prepare_out(cfg);
    std::ostringstream os;
    os << weight_trace_header;
    const auto n = max_entries ? std::min(max_entries, entries.size()) : entries.size();
    for (std::size_t i = 0; i < n; ++i)
        append_weight_trace_csv(os, i, eval_logprob_chunked(bank, entries[i].tokens, cfg.block_len));
    write_text(dir / "weight_trace.csv", os.str());
    if (!a.quiet) std::fprintf(stderr, "weights: %zu entries -> %s\n", n, (dir / "weight_trace.csv").c_str());
    return exit_ok;
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    if (s.empty()) throw ConfigError("--seeds", "empty seed list");
    if (s.find_first_not_of("0123456789,") != std::string::npos) return named_seed_set(s);
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoull(tok));
    if (out.empty()) throw ConfigError("--seeds", "empty seed list");
    return out;
}

inline void write_fits(const fs::path& dir, const std::vector<RatioPoint>& points) {
    const auto fits = fit_cells(points);
    io::write_json(dir / "fits.json", cell_fits_json(fits));
    for (const auto& f : fits) {
        if (f.fit)
            std::printf("fit %s/%s: a=%.6g b=%.6g c=%.6g sse=%.3g n=%zu%s\n", f.format_mode.c_str(),
                        f.knowledge_mode.c_str(), f.fit->a, f.fit->b, f.fit->c, f.fit->sse, f.fit->n_points,
                        f.fit->degenerate ? " (degenerate)" : "");
        else
            std::printf("fit %s/%s: %s\n", f.format_mode.c_str(), f.knowledge_mode.c_str(), f.error.c_str());
    }
}

inline int cmd_sweep(const CommonArgs& a, const std::vector<std::size_t>& grid, const std::string& seeds,
                     std::size_t workers, const std::string& regime) {
    auto cfg = resolve_config(a);
    SweepOptions opt;
    if (!grid.empty()) opt.grid = grid;
    if (!seeds.empty()) opt.seeds = parse_seed_list(seeds);
    opt.workers = workers;
    try {
        opt.regime = regime_from_string(regime);
    } catch (const std::exception& e) {
        throw ConfigError("--regime", e.what());
    }
    const auto dir = prepare_out(cfg);
    io::write_json(dir / "sweep.json", json{{"grid", opt.grid}, {"seeds", opt.seeds}, {"regime", regime}});
    const bool quiet = a.quiet;
    auto res = ratio_sweep(cfg, opt, [quiet](std::size_t nx, std::uint64_t seed, const std::string& status) {
        if (!quiet) std::fprintf(stderr, "sweep n_occ_x=%zu seed=%llu: %s\n", nx, (unsigned long long)seed, status.c_str());
    });
    write_text(dir / "sweep.csv", sweep_csv(res.points));
    io::write_json(dir / "failures.json", sweep_failures_json(res.failures));
    if (res.points.empty()) {
        std::fprintf(stderr, "sweep: every grid point failed\n");
        return exit_runtime;
    }
    write_fits(dir, res.points);
    return exit_ok;
}

inline int cmd_fit(const CommonArgs& a, const std::string& csv_path) {
    const auto points = parse_sweep_csv(io::read_text(csv_path));
    if (points.empty()) throw DataError(csv_path + ": no rows");
    fs::path dir = !a.out.empty() ? fs::path(a.out) : fs::path(csv_path).parent_path();
    if (dir.empty()) dir = ".";
    fs::create_directories(dir);
    const auto src_cfg = fs::path(csv_path).parent_path() / "config.json";
    if (fs::exists(src_cfg) && !fs::exists(dir / "config.json")) fs::copy_file(src_cfg, dir / "config.json");
    write_fits(dir, points);
    return exit_ok;
}

struct QualArgs {
    std::string case_path;
    std::size_t attempts = 100;
    std::size_t parallel = 4;
    std::optional<double> temperature;
    int retries = 4;
};

inline int cmd_qual(const CommonArgs& a, const QualArgs& q) {
    if (q.attempts == 0) throw ConfigError("--attempts", "must be positive");
    if (q.parallel == 0) throw ConfigError("--parallel", "must be positive");
    qual::CompletionCase c;
    try {
        c = qual::case_from_json(io::read_json(q.case_path));
    } catch (const json::exception& e) {
        throw ConfigError("--case", e.what());
    } catch (const DataError& e) {
        throw ConfigError("--case", e.what());
    }
    auto ep = qual::Endpoint::from_env();
    ep.temperature = q.temperature;
    ep.max_retries = q.retries;
    fs::path dir = !a.out.empty() ? fs::path(a.out) : fs::path("runs/qual");
    fs::create_directories(dir);
    io::write_json(dir / "config.json", json{{"case", q.case_path},
                                             {"attempts", q.attempts},
                                             {"parallel", q.parallel},
                                             {"temperature", q.temperature ? json(*q.temperature) : json(nullptr)},
                                             {"base_url", ep.base_url},
                                             {"model", ep.model}});
    qual::ChatClient client(ep);
    qual::TranscriptCache cache(dir / "transcripts");
    qual::CaseRunner runner(client, cache);
    const auto r = runner.run(c, {q.attempts, q.parallel});
    const auto j = qual::case_result_to_json(r);
    io::write_json(dir / "result.json", j);
    std::printf("qual: original %s, altered %s (%zu network calls)\n", j["original"]["mean"].dump().c_str(),
                j["altered"]["mean"].dump().c_str(), r.network_calls);
    return exit_ok;
}

// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
    CLI::App app{"Cross-mode knowledge retrieval experiments"};
    app.require_subcommand(1);
    CommonArgs common;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "Experiment config (JSON)");
        sub->add_option("--out", common.out, "Output directory");
        sub->add_option("--seed", common.seed, "Master (dataset) seed");
        sub->add_option("--override", common.overrides, "Config override key.path=value (repeatable)");
        sub->add_flag("--quiet", common.quiet, "No progress output");
    };

    auto* gen = app.add_subcommand("gen", "Generate corpora, training dataset and eval set");
    add_common(gen);

    std::string data, model_dir, scorer = "ensemble";
    auto* train_cmd = app.add_subcommand("train", "Train a model (any regime)");
    add_common(train_cmd);
    train_cmd->add_option("--data", data, "Directory written by gen (generated on the fly if omitted)");

    std::optional<unsigned> level;
    auto* eval = app.add_subcommand("eval", "Evaluate a trained model or ensemble");
    add_common(eval);
    eval->add_option("--data", data, "Directory written by gen");
    eval->add_option("--model", model_dir, "Directory written by train")->required();
    eval->add_option("--scorer", scorer, "single or ensemble")->check(CLI::IsMember({"single", "ensemble"}));
    eval->add_option("--level", level, "Checkpoint level for --scorer single on an original-cascade run");

    std::size_t max_entries = 0;
    auto* weights = app.add_subcommand("weights", "Export per-position ensemble weight traces");
    add_common(weights);
    weights->add_option("--data", data, "Directory written by gen");
    weights->add_option("--model", model_dir, "Directory written by train")->required();
    weights->add_option("--entries", max_entries, "Only the first N eval entries (0 = all)");

    std::vector<std::size_t> grid;
    std::string seeds, regime = "direct-nonoverlap-full";
    std::size_t workers = 1;
    auto* sweep = app.add_subcommand("sweep", "Ratio sweep over n_occ_x and seeds");
    add_common(sweep);
    sweep->add_option("--grid", grid, "n_occ_x values")->delimiter(',');
    sweep->add_option("--seeds", seeds, "Comma-separated training seeds or a named set (paper5)");
    sweep->add_option("--workers", workers, "Parallel grid points")->check(CLI::PositiveNumber);
    sweep->add_option("--regime", regime, "Training regime for every grid point");

    std::string csv_path;
    auto* fit = app.add_subcommand("fit", "Fit a sigmoid per cell to a sweep CSV");
    add_common(fit);
    fit->add_option("--csv", csv_path, "sweep.csv")->required()->check(CLI::ExistingFile);

    auto* capture = app.add_subcommand("capture-check", "Check that every injection is captured at each level");
    add_common(capture);
    std::string dataset;
    auto* cap_data = capture->add_option("--data", data, "Directory written by gen")->check(CLI::ExistingDirectory);
    auto* cap_ds = capture->add_option("--dataset", dataset, "Training dataset (.tokens)")->check(CLI::ExistingFile);
    cap_data->excludes(cap_ds);

    QualArgs qa;
    auto* qual_cmd = app.add_subcommand("qual", "Rewrite/complete/judge pipeline against a chat API");
    add_common(qual_cmd);
    qual_cmd->add_option("--case", qa.case_path, "Case JSON {original, answer, altered?}")->required();
    qual_cmd->add_option("--attempts", qa.attempts, "Completions per variant");
    qual_cmd->add_option("--parallel", qa.parallel, "Concurrent requests");
    qual_cmd->add_option("--temperature", qa.temperature, "Sampling temperature (provider default if omitted)");
    qual_cmd->add_option("--retries", qa.retries, "Retries per request");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_config;
    }

    try {
        if (*gen) return cmd_gen(common);
        if (*train_cmd) return cmd_train(common, data);
        if (*eval) return cmd_eval(common, data, model_dir, scorer, level);
        if (*weights) return cmd_weights(common, data, model_dir, max_entries);
        if (*sweep) return cmd_sweep(common, grid, seeds, workers, regime);
        if (*fit) return cmd_fit(common, csv_path);
        if (*capture) {
            if (data.empty() && dataset.empty()) throw ConfigError("--data", "one of --data or --dataset is required");
            return cmd_capture_check(common, dataset.empty() ? fs::path(data) / "train.tokens" : fs::path(dataset));
        }
        if (*qual_cmd) return cmd_qual(common, qa);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return exit_config;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_runtime;
    }
    return exit_config;
}

}  // namespace cascade::cli
