#pragma once

// Optimization for every training regime: direct training on L_ctx windows,
// one model per window length (original cascade), and a single model trained
// on the average second-half loss over all window lengths (compressed
// cascade).

#include <chrono>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/model.hpp"
#include "cascade/windows.hpp"

namespace cascade {

enum class Regime { direct_nonoverlap_full, direct_overlap_half, original_cascade, compressed_cascade };

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::direct_nonoverlap_full: return "direct-nonoverlap-full";
        case Regime::direct_overlap_half: return "direct-overlap-half";
        case Regime::original_cascade: return "original-cascade";
        case Regime::compressed_cascade: return "compressed-cascade";
    }
    return "?";
}

inline Regime regime_from_string(const std::string& s) {
    for (auto r : {Regime::direct_nonoverlap_full, Regime::direct_overlap_half, Regime::original_cascade,
                   Regime::compressed_cascade})
        if (to_string(r) == s) return r;
    throw ConfigError("train.regime", "unknown regime '" + s + "'");
}

inline bool is_cascade(Regime r) { return r == Regime::original_cascade || r == Regime::compressed_cascade; }

struct TrainConfig {
    Regime regime = Regime::compressed_cascade;
    std::size_t epochs = 4;
    std::size_t batch = 16;  // base batch B (windows of length L_ctx)
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-7;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    double lr_min = 1e-7;  // learning rate at step 0
    double lr_max = 4e-3;  // learning rate at the end of warmup
    std::size_t warmup_steps = 100;
    std::uint64_t seed = 42;
    // Cascade regimes only. "overlap": stride 2^(m-1), second-half loss, B_m
    // from batch_plan. "nonoverlap": stride 2^m, full loss, B_m / 2.
    bool cascade_overlap = true;
    // Compressed cascade: every B_m is divided by this to bound step memory.
    std::size_t batch_divisor = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs", "must be at least 1");
        if (batch < 1) throw ConfigError("train.batch", "must be at least 1");
        if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm", "must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("train.eps", "must be positive");
        if (weight_decay < 0.0) throw ConfigError("train.weight_decay", "must be non-negative");
        if (!(lr_max > 0.0)) throw ConfigError("train.lr_max", "must be positive");
        if (lr_min < 0.0 || lr_min > lr_max) throw ConfigError("train.lr_min", "must lie in [0, lr_max]");
        if (batch_divisor < 1) throw ConfigError("train.batch_divisor", "must be at least 1");
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"regime", to_string(c.regime)},
             {"epochs", c.epochs},
             {"batch", c.batch},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"eps", c.eps},
             {"weight_decay", c.weight_decay},
             {"clip_norm", c.clip_norm},
             {"lr_min", c.lr_min},
             {"lr_max", c.lr_max},
             {"warmup_steps", c.warmup_steps},
             {"seed", c.seed},
             {"cascade_grid", c.cascade_overlap ? "overlap" : "nonoverlap"},
             {"batch_divisor", c.batch_divisor}};
}

inline void from_json(const json& j, TrainConfig& c) {
    TrainConfig d;
    c.regime = regime_from_string(j.value("regime", to_string(d.regime)));
    c.epochs = j.value("epochs", d.epochs);
    c.batch = j.value("batch", d.batch);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.lr_min = j.value("lr_min", d.lr_min);
    c.lr_max = j.value("lr_max", d.lr_max);
    c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    c.seed = j.value("seed", d.seed);
    const auto grid = j.value("cascade_grid", std::string("overlap"));
    if (grid != "overlap" && grid != "nonoverlap")
        throw ConfigError("train.cascade_grid", "must be 'overlap' or 'nonoverlap'");
    c.cascade_overlap = grid == "overlap";
    c.batch_divisor = j.value("batch_divisor", d.batch_divisor);
}

// ---------------------------------------------------------------------------
// Schedule, clipping, optimizer
// ---------------------------------------------------------------------------

// Linear warmup from lr_min to lr_max over warmup_steps, then linear decay to
// zero at total_steps.
struct WarmupDecayLR {
    double lr_min = 0.0;
    double lr_max = 1e-3;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    double at(std::size_t step) const {
        if (step < warmup_steps)
            return lr_min + (lr_max - lr_min) * static_cast<double>(step) / static_cast<double>(warmup_steps);
        if (total_steps <= warmup_steps) return lr_max;
        const double left = static_cast<double>(total_steps) - static_cast<double>(step);
        return std::max(0.0, lr_max * left / static_cast<double>(total_steps - warmup_steps));
    }
};

template <typename T>
double global_norm(std::span<const T> g) {
    double s = 0.0;
    for (auto v : g) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

// Scales g in place so its global norm is at most max_norm. Returns the norm
// before clipping.
template <typename T>
double clip_global_norm(std::span<T> g, double max_norm) {
    const double norm = global_norm<T>(g);
    if (norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto& v : g) v *= scale;
    }
    return norm;
}

// Adam with decoupled weight decay: p <- p - lr * wd * p, then the Adam step
// from bias-corrected moments. Decay applies to rank-2 tensors only.
template <typename T>
class AdamW {
public:
    AdamW(std::size_t n, double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay), m_(n, 0.0), v_(n, 0.0), decay_(n, 1) {}

    AdamW(const Parameters<T>& p, const TrainConfig& c) : AdamW(p.size(), c.beta1, c.beta2, c.eps, c.weight_decay) {
        for (const auto& t : p.layout.tensors)
            if (t.shape.size() < 2) std::fill_n(decay_.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 0);
    }

    std::size_t steps() const { return t_; }

    void step(std::span<T> params, std::span<const T> grad, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double p = static_cast<double>(params[i]);
            const double g = static_cast<double>(grad[i]);
            if (decay_[i]) p -= lr * wd_ * p;
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
            p -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
            params[i] = static_cast<T>(p);
        }
    }

private:
    double beta1_, beta2_, eps_, wd_;
    std::vector<double> m_, v_;
    std::vector<std::uint8_t> decay_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Window sources
// ---------------------------------------------------------------------------

// Endless stream of window indices: a fresh shuffle of [0, count) per pass,
// seeded by (seed, pass).
class WindowStream {
public:
    WindowStream(std::size_t count, std::uint64_t seed) : count_(count), seed_(seed) {
        if (count == 0) throw std::invalid_argument("WindowStream: no windows");
    }

    std::vector<std::size_t> take(std::size_t n) {
        std::vector<std::size_t> out;
        out.reserve(n);
        while (out.size() < n) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

    std::size_t passes() const { return pass_; }

private:
    void reshuffle() {
        order_.resize(count_);
        for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
        Rng rng(derive_seed(seed_, "pass", pass_++));
        rng.shuffle(order_.begin(), order_.end());
        pos_ = 0;
    }

    std::size_t count_;
    std::uint64_t seed_;
    std::size_t pass_ = 0;
    std::size_t pos_ = 0;
    std::vector<std::size_t> order_;
};

struct LevelSpec {
    unsigned m = 0;
    std::size_t stride = 0;
    std::size_t batch = 0;
    LossKind loss = LossKind::second_half;
};

inline Batch gather_windows(std::span<const TokenId> tokens, const ChunkGrid& grid, std::span<const std::size_t> idx,
                            LossKind kind) {
    std::vector<TokenId> out(idx.size() * grid.length);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto off = grid.offset(idx[r]);
        std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(off), grid.length,
                    out.begin() + static_cast<std::ptrdiff_t>(r * grid.length));
    }
    return make_batch(std::move(out), idx.size(), grid.length, kind);
}

// Levels and per-level batch sizes for a regime. Original cascade returns all
// levels; each is trained as a separate model.
inline std::vector<LevelSpec> regime_levels(const TrainConfig& tc, const CascadeSpec& spec) {
    std::vector<LevelSpec> out;
    const auto M = spec.m_max;
    switch (tc.regime) {
        case Regime::direct_nonoverlap_full:
            out.push_back({M, window_len(M), tc.batch, LossKind::full});
            break;
        case Regime::direct_overlap_half:
            out.push_back({M, half_len(M), 2 * tc.batch, LossKind::second_half});
            break;
        case Regime::original_cascade:
        case Regime::compressed_cascade: {
            const auto plan = batch_plan(tc.batch, spec);
            const std::size_t div = tc.regime == Regime::compressed_cascade ? tc.batch_divisor : 1;
            for (const auto& [m, bm] : plan.batch) {
                std::size_t b = tc.cascade_overlap ? bm : bm / 2;
                if (b % div != 0)
                    throw ConfigError("train.batch_divisor", "does not divide B_" + std::to_string(m) + " = " +
                                                                 std::to_string(b));
                b /= div;
                if (tc.cascade_overlap) out.push_back({m, half_len(m), b, LossKind::second_half});
                else out.push_back({m, window_len(m), b, LossKind::full});
            }
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossRow {
    std::size_t step = 0;
    std::string level;  // window exponent m, or "mean" for the cascade average
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainReport {
    Regime regime = Regime::compressed_cascade;
    std::uint64_t seed = 0;
    std::size_t steps_per_epoch = 0;
    std::size_t total_steps = 0;
    std::vector<LossRow> trace;
    std::vector<std::filesystem::path> checkpoints;
    double seconds = 0.0;
};

inline std::string loss_trace_csv(const std::vector<LossRow>& rows) {
    std::ostringstream os;
    os << "step,level,loss,lr\n" << std::setprecision(9);
    for (const auto& r : rows) os << r.step << ',' << r.level << ',' << r.loss << ',' << r.lr << '\n';
    return os.str();
}

// Optimizer steps per epoch: one traversal of the level with the longest
// windows. Shorter-window levels draw the same number of steps and cycle
// through their windows as needed.
inline std::size_t steps_per_epoch(std::size_t dataset_len, const std::vector<LevelSpec>& levels) {
    const auto& top = *std::max_element(levels.begin(), levels.end(),
                                        [](const auto& a, const auto& b) { return a.m < b.m; });
    const auto grid = chunk_offsets(dataset_len, top.m, top.stride);
    return grid.count / top.batch;
}

using ProgressFn = std::function<void(std::size_t step, std::size_t total, double loss)>;

// Trains one parameter set on the given levels. Each step draws one batch per
// level and minimizes the mean of the per-level mean losses. per_epoch = 0
// derives the epoch length from the levels themselves.
inline Parameters<float> optimize(std::span<const TokenId> tokens, const std::vector<LevelSpec>& levels,
                                  const ModelConfig& mc, const TrainConfig& tc, std::size_t model_index,
                                  TrainReport& report, const ProgressFn& progress = {},
                                  std::size_t per_epoch = 0) {
    if (levels.empty()) throw std::invalid_argument("optimize: no levels");
    std::size_t longest = 0;
    for (const auto& l : levels) longest = std::max(longest, window_len(l.m));
    if (longest > mc.max_seq_len) throw ConfigError("model.max_seq_len", "shorter than the training window");
    if (tokens.size() < longest)
        throw std::invalid_argument("training data (" + std::to_string(tokens.size()) +
                                    " tokens) is shorter than one window of length " + std::to_string(longest));

    if (per_epoch == 0) per_epoch = steps_per_epoch(tokens.size(), levels);
    const auto total = per_epoch * tc.epochs;
    if (total == 0) throw std::invalid_argument("no optimization steps: dataset too small for the batch size");
    report.steps_per_epoch = per_epoch;
    report.total_steps = total;

    auto params = init_params<float>(mc, derive_seed(tc.seed, "init", model_index));
    AdamW<float> opt(params, tc);
    const WarmupDecayLR sched{tc.lr_min, tc.lr_max, tc.warmup_steps, total};
    Rng dropout(derive_seed(tc.seed, "dropout", model_index));

    std::vector<ChunkGrid> grids;
    std::vector<WindowStream> streams;
    for (const auto& l : levels) {
        grids.push_back(chunk_offsets(tokens.size(), l.m, l.stride));
        streams.emplace_back(grids.back().count, derive_seed(tc.seed, "windows", model_index * 64 + l.m));
    }

    AlignedVec<float> grad(params.size());
    const double w = 1.0 / static_cast<double>(levels.size());
    for (std::size_t step = 0; step < total; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0f);
        double mean = 0.0;
        for (std::size_t k = 0; k < levels.size(); ++k) {
            const auto idx = streams[k].take(levels[k].batch);
            const auto batch = gather_windows(tokens, grids[k], idx, levels[k].loss);
            LossValue lv;
            try {
                lv = loss_and_grad(params, batch, std::span<float>(grad), w, &dropout);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step));
            }
            mean += w * lv.mean();
            if (levels.size() > 1)
                report.trace.push_back({step, std::to_string(levels[k].m), lv.mean(), sched.at(step)});
        }
        const double lr = sched.at(step);
        report.trace.push_back({step, levels.size() > 1 ? "mean" : std::to_string(levels[0].m), mean, lr});
        clip_global_norm(std::span<float>(grad), tc.clip_norm);
        opt.step(params.data, grad, lr);
        if (progress) progress(step, total, mean);
    }
    return params;
}

// Trains every model of a regime and returns the parameter sets (one per
// level for the original cascade, one otherwise).
inline std::vector<Parameters<float>> train(std::span<const TokenId> tokens, const CascadeSpec& spec,
                                            const ModelConfig& mc, const TrainConfig& tc, TrainReport& report,
                                            const ProgressFn& progress = {}) {
    tc.validate();
    mc.validate();
    spec.validate();
    report = TrainReport{};
    report.regime = tc.regime;
    report.seed = tc.seed;
    const auto start = std::chrono::steady_clock::now();
    const auto levels = regime_levels(tc, spec);
    std::vector<Parameters<float>> models;
    if (tc.regime == Regime::original_cascade) {
        // Epochs follow the longest-window level for every model, so all
        // levels take the same number of steps.
        const auto per_epoch = steps_per_epoch(tokens.size(), levels);
        for (std::size_t i = 0; i < levels.size(); ++i) {
            TrainReport part;
            models.push_back(optimize(tokens, {levels[i]}, mc, tc, i, part, progress, per_epoch));
            report.steps_per_epoch = part.steps_per_epoch;
            report.total_steps = part.total_steps;
            report.trace.insert(report.trace.end(), part.trace.begin(), part.trace.end());
        }
    } else {
        models.push_back(optimize(tokens, levels, mc, tc, 0, report, progress));
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return models;
}

// Checkpoint file names inside a training output directory.
inline std::filesystem::path checkpoint_name(Regime r, unsigned m) {
    return r == Regime::original_cascade ? "model_m" + std::to_string(m) + ".ckpt" : "model.ckpt";
}

// Writes checkpoints, loss_trace.csv and train_report.json into dir.
inline void save_training_outputs(const std::filesystem::path& dir, const std::vector<Parameters<float>>& models,
                                  const CascadeSpec& spec, const TrainConfig& tc, TrainReport& report) {
    std::filesystem::create_directories(dir);
    report.checkpoints.clear();
    for (std::size_t i = 0; i < models.size(); ++i) {
        const auto path = dir / checkpoint_name(tc.regime, spec.m_min + static_cast<unsigned>(i));
        save_checkpoint(path, models[i]);
        report.checkpoints.push_back(path.filename());
    }
    io::write_atomic(dir / "loss_trace.csv", loss_trace_csv(report.trace));
    json ckpts = json::array();
    for (const auto& c : report.checkpoints) ckpts.push_back(c.string());
    io::write_json(dir / "train_report.json", json{{"regime", to_string(report.regime)},
                                                   {"seed", report.seed},
                                                   {"steps_per_epoch", report.steps_per_epoch},
                                                   {"total_steps", report.total_steps},
                                                   {"checkpoints", ckpts},
                                                   {"final_loss", report.trace.empty() ? 0.0 : report.trace.back().loss},
                                                   {"wall_seconds", report.seconds}});
}

}  // namespace cascade
