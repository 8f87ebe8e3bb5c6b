#pragma once

// Ratio sweep: rewritten datasets over an n_occ_x grid, one direct-trained
// model per (grid point, seed), and one sigmoid fit per evaluation cell.

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "cascade/experiment.hpp"

namespace cascade {

struct SweepOptions {
    std::vector<std::size_t> grid{0, 8, 32, 128, 256};
    std::vector<std::uint64_t> seeds{42, 142857, 2225393};
    Regime regime = Regime::direct_nonoverlap_full;
    std::size_t workers = 1;
};

struct SweepFailure {
    std::size_t n_occ_x = 0;
    std::uint64_t seed = 0;
    std::string error;
};

struct SweepResult {
    std::vector<RatioPoint> points;  // grid order, then seed, then cell
    std::vector<SweepFailure> failures;
};

// Everything that varies between grid points. The dataset seed stays fixed so
// only the rewrite and the training seed change.
inline ExperimentConfig sweep_point_config(const ExperimentConfig& base, const SweepOptions& opt, std::size_t n_occ_x,
                                           std::uint64_t seed) {
    ExperimentConfig cfg = base;
    cfg.n_occ_x = n_occ_x;
    cfg.train.seed = seed;
    cfg.train.regime = opt.regime;
    return cfg;
}

using SweepProgress = std::function<void(std::size_t n_occ_x, std::uint64_t seed, const std::string& status)>;

inline SweepResult ratio_sweep(const ExperimentConfig& base, const SweepOptions& opt,
                               const SweepProgress& progress = {}) {
    if (opt.seeds.empty()) throw ConfigError("seeds", "seed list is empty");
    if (opt.grid.empty()) throw ConfigError("grid", "n_occ_x grid is empty");
    base.validate();

    struct Job {
        std::size_t n_occ_x;
        std::uint64_t seed;
        std::vector<RatioPoint> points;
        std::string error;
    };
    std::vector<Job> jobs;
    for (auto nx : opt.grid)
        for (auto s : opt.seeds) jobs.push_back({nx, s, {}, {}});

    std::atomic<std::size_t> next{0};
    std::mutex progress_mu;
    auto report = [&](const Job& j, const std::string& status) {
        if (!progress) return;
        std::lock_guard lock(progress_mu);
        progress(j.n_occ_x, j.seed, status);
    };
    auto worker = [&] {
        for (std::size_t i; (i = next++) < jobs.size();) {
            Job& job = jobs[i];
            report(job, "start");
            try {
                const auto cfg = sweep_point_config(base, opt, job.n_occ_x, job.seed);
                const auto g = generate(cfg);
                const auto run = train_and_evaluate(cfg, g);
                const double r = occurrence_ratio(cfg.knowledge.n_occ, job.n_occ_x);
                for (const auto& [key, cell] : run.cells) job.points.push_back({job.n_occ_x, r, job.seed, cell});
                report(job, "done");
            } catch (const std::exception& e) {
                job.error = e.what();
                report(job, std::string("failed: ") + e.what());
            }
        }
    };
    const auto n_threads = std::max<std::size_t>(1, std::min(opt.workers, jobs.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    SweepResult out;
    for (auto& j : jobs) {
        if (!j.error.empty()) out.failures.push_back({j.n_occ_x, j.seed, j.error});
        for (auto& p : j.points) out.points.push_back(std::move(p));
    }
    return out;
}

inline std::string sweep_csv(const std::vector<RatioPoint>& points) {
    std::string s = sweep_csv_header;
    for (const auto& p : points) s += sweep_csv_row(p);
    return s;
}

inline json sweep_failures_json(const std::vector<SweepFailure>& f) {
    json out = json::array();
    for (const auto& x : f) out.push_back({{"n_occ_x", x.n_occ_x}, {"seed", x.seed}, {"error", x.error}});
    return out;
}

struct CellFit {
    std::string format_mode;
    std::string knowledge_mode;
    bool holdout_only = false;
    std::optional<SigmoidFit> fit;
    std::string error;
};

// One fit per (format_mode, knowledge_mode) on (r, mean log prob) pairs from
// every seed. r = inf points are skipped by fit_sigmoid.
inline std::vector<CellFit> fit_cells(const std::vector<RatioPoint>& points) {
    std::map<std::pair<std::string, std::string>, std::vector<const RatioPoint*>> by_cell;
    for (const auto& p : points) by_cell[{p.cell.format_mode, p.cell.knowledge_mode}].push_back(&p);
    std::vector<CellFit> out;
    for (const auto& [key, pts] : by_cell) {
        CellFit cf{key.first, key.second, pts.front()->cell.holdout_only, std::nullopt, {}};
        std::vector<double> r, y;
        for (const auto* p : pts) {
            r.push_back(p->r);
            y.push_back(p->cell.mean);
        }
        try {
            cf.fit = fit_sigmoid(r, y);
        } catch (const std::exception& e) {
            cf.error = e.what();
        }
        out.push_back(std::move(cf));
    }
    return out;
}

inline json cell_fits_json(const std::vector<CellFit>& fits) {
    json out = json::array();
    for (const auto& f : fits) {
        json j = {{"format_mode", f.format_mode}, {"knowledge_mode", f.knowledge_mode},
                  {"holdout_only", f.holdout_only}};
        if (f.fit) j["fit"] = fit_to_json(*f.fit);
        else j["error"] = f.error;
        out.push_back(std::move(j));
    }
    return out;
}

// Median over seeds of a cell's mean NLL at each grid value.
inline std::map<std::size_t, double> seed_median_nll(const std::vector<RatioPoint>& points,
                                                     const std::string& format_mode,
                                                     const std::string& knowledge_mode) {
    std::map<std::size_t, std::vector<double>> v;
    for (const auto& p : points)
        if (p.cell.format_mode == format_mode && p.cell.knowledge_mode == knowledge_mode)
            v[p.n_occ_x].push_back(p.mean_nll());
    std::map<std::size_t, double> out;
    for (auto& [nx, xs] : v) {
        std::sort(xs.begin(), xs.end());
        const auto n = xs.size();
        out[nx] = n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
    }
    return out;
}

}  // namespace cascade
