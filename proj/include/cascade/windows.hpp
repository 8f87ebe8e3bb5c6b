#pragma once

// Cascading overlapping-window datasets D_m: windows of length 2^m at stride
// 2^(m-1) over a flat token array, for m_min <= m <= m_max.

#include <bit>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cascade/common.hpp"

namespace cascade {

struct CascadeSpec {
    unsigned m_min = 3;
    unsigned m_max = 6;  // M, with L_ctx = 2^M = block_len

    std::size_t context_len() const noexcept { return std::size_t{1} << m_max; }
    std::size_t levels() const noexcept { return m_max - m_min + 1; }

    void validate() const {
        if (m_min < 3) throw ConfigError("cascade.m_min", "must be at least 3");
        if (m_max < m_min) throw ConfigError("cascade.m_max", "must be at least m_min");
        if (m_max > 30) throw ConfigError("cascade.m_max", "too large");
    }

    static CascadeSpec for_block_len(std::size_t block_len, unsigned m_min = 3) {
        if (!is_power_of_two(block_len)) throw ConfigError("block_len", "must be a power of two");
        CascadeSpec s{m_min, log2_exact(block_len)};
        s.validate();
        return s;
    }
};

inline std::size_t window_len(unsigned m) { return std::size_t{1} << m; }
inline std::size_t half_len(unsigned m) { return std::size_t{1} << (m - 1); }

// Window i covers [offset(i), offset(i) + length).
struct ChunkGrid {
    unsigned m = 0;
    std::size_t length = 0;
    std::size_t stride = 0;
    std::size_t count = 0;

    std::size_t offset(std::size_t i) const noexcept { return i * stride; }
    std::vector<std::size_t> offsets() const {
        std::vector<std::size_t> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = offset(i);
        return out;
    }
};

// Windows of length 2^m at the given stride; windows running past the end are
// dropped. stride defaults to 2^(m-1) (the cascading grid); passing 2^m gives
// non-overlapping windows.
inline ChunkGrid chunk_offsets(std::size_t dataset_len, unsigned m, std::size_t stride = 0) {
    if (m == 0 || m > 40) throw std::invalid_argument("chunk_offsets: bad level " + std::to_string(m));
    const auto len = window_len(m);
    if (stride == 0) stride = half_len(m);
    if (dataset_len < len)
        throw std::invalid_argument("chunk_offsets: dataset of length " + std::to_string(dataset_len) +
                                    " is shorter than one window of length " + std::to_string(len));
    return {m, len, stride, (dataset_len - len) / stride + 1};
}

// ---------------------------------------------------------------------------
// Capture check
// ---------------------------------------------------------------------------

struct KnowledgeSpan {
    std::size_t position = 0;  // absolute p in the flat dataset
    std::size_t length = 0;
};

// Largest level for which a piece of this length is claimed to be captured:
// 1 + floor(log2(L - 1)). Zero when no level is claimed (L <= 1).
inline unsigned max_claimed_level(std::size_t length) {
    if (length < 2) return 0;
    return 1 + static_cast<unsigned>(std::bit_width(length - 1) - 1);
}

struct CaptureVerdict {
    std::size_t injection = 0;
    unsigned m = 0;
    bool captured = false;
    std::int64_t window = -1;    // capturing window index, -1 on violation
    bool starts_before = false;  // requirement (1), reported but optional
    std::size_t solutions = 0;   // windows satisfying all three requirements
    std::string reason;          // empty when captured
};

struct CaptureReport {
    std::size_t dataset_len = 0;
    CascadeSpec spec;
    std::size_t n_injections = 0;
    std::vector<CaptureVerdict> verdicts;
    std::map<unsigned, std::size_t> checked_per_level;
    std::map<unsigned, std::size_t> captured_per_level;

    std::size_t violations() const {
        std::size_t n = 0;
        for (const auto& v : verdicts) n += !v.captured;
        return n;
    }
    bool ok() const { return violations() == 0; }
};

// For each injection and each claimed level m, checks that window
// i = floor(p / 2^(m-1)) exists and straddles the knowledge: its first half
// contains position p (hint) and its midpoint is at most p + L - 1
// (completion). Also counts every window index satisfying all three
// requirements so uniqueness can be asserted.
inline CaptureReport capture_check(std::span<const KnowledgeSpan> spans, std::size_t dataset_len,
                                   const CascadeSpec& spec) {
    CaptureReport report;
    report.dataset_len = dataset_len;
    report.spec = spec;
    report.n_injections = spans.size();
    for (std::size_t k = 0; k < spans.size(); ++k) {
        const auto p = spans[k].position;
        const auto L = spans[k].length;
        const unsigned top = std::min(spec.m_max, max_claimed_level(L));
        for (unsigned m = spec.m_min; m <= top; ++m) {
            const auto h = half_len(m);
            CaptureVerdict v;
            v.injection = k;
            v.m = m;
            ++report.checked_per_level[m];
            if (dataset_len < window_len(m)) {
                v.reason = "dataset shorter than one window";
                report.verdicts.push_back(std::move(v));
                continue;
            }
            const auto grid = chunk_offsets(dataset_len, m);
            // Any solution has p/h - 1 < i <= p/h, so only i = floor(p/h) can qualify.
            for (std::size_t i = p / h > 0 ? p / h - 1 : 0; i <= p / h + 1 && i < grid.count; ++i) {
                const auto start = grid.offset(i);
                const bool req1 = start <= p;
                const bool req2 = start + h > p;
                const bool req3 = start + h <= p + L - 1;
                if (req1 && req2 && req3) ++v.solutions;
            }
            const auto i = p / h;
            if (i >= grid.count) {
                v.reason = "window " + std::to_string(i) + " runs past the end of the dataset";
            } else {
                const auto start = grid.offset(i);
                const bool hint = start + h > p;
                const bool completion = start + h <= p + L - 1;
                v.starts_before = start <= p;
                if (hint && completion) {
                    v.captured = true;
                    v.window = static_cast<std::int64_t>(i);
                    ++report.captured_per_level[m];
                } else if (!hint) {
                    v.reason = "hint half of window " + std::to_string(i) + " misses the knowledge";
                } else {
                    v.reason = "completion half of window " + std::to_string(i) + " misses the knowledge";
                }
            }
            report.verdicts.push_back(std::move(v));
        }
    }
    return report;
}

inline json capture_report_to_json(const CaptureReport& r, std::span<const KnowledgeSpan> spans) {
    json violations = json::array();
    json verdicts = json::array();
    for (const auto& v : r.verdicts) {
        json item{{"injection", v.injection},
                  {"position", spans[v.injection].position},
                  {"length", spans[v.injection].length},
                  {"m", v.m},
                  {"captured", v.captured},
                  {"window", v.window},
                  {"starts_before", v.starts_before},
                  {"solutions", v.solutions}};
        if (!v.captured) {
            item["reason"] = v.reason;
            violations.push_back(item);
        }
        verdicts.push_back(std::move(item));
    }
    json levels = json::object();
    for (const auto& [m, n] : r.checked_per_level) {
        const auto it = r.captured_per_level.find(m);
        levels[std::to_string(m)] = {{"checked", n}, {"captured", it == r.captured_per_level.end() ? 0 : it->second}};
    }
    return json{{"dataset_len", r.dataset_len},
                {"m_min", r.spec.m_min},
                {"m_max", r.spec.m_max},
                {"n_injections", r.n_injections},
                {"n_checks", r.verdicts.size()},
                {"n_violations", r.violations()},
                {"levels", levels},
                {"violations", violations},
                {"verdicts", verdicts}};
}

// ---------------------------------------------------------------------------
// Batch sizes and cost
// ---------------------------------------------------------------------------

struct BatchPlan {
    std::size_t base_batch = 0;
    CascadeSpec spec;
    std::map<unsigned, std::size_t> batch;             // B_m
    std::map<unsigned, std::size_t> windows;           // |D_m| (0 if dataset length unknown)
    std::map<unsigned, std::size_t> steps_per_epoch;   // floor(|D_m| / B_m)
    std::vector<std::string> warnings;

    bool equal_steps() const {
        if (steps_per_epoch.empty()) return true;
        const auto first = steps_per_epoch.begin()->second;
        for (const auto& [m, s] : steps_per_epoch)
            if (s != first) return false;
        return true;
    }
};

// B_m = 2 * B * L_ctx / 2^m, so every level processes the same number of
// tokens per step. When the dataset length is known, B_m is capped at |D_m|.
inline BatchPlan batch_plan(std::size_t base_batch, const CascadeSpec& spec, std::size_t dataset_len = 0) {
    if (base_batch < 1) throw std::invalid_argument("batch_plan: base batch must be at least 1");
    spec.validate();
    BatchPlan plan;
    plan.base_batch = base_batch;
    plan.spec = spec;
    for (unsigned m = spec.m_min; m <= spec.m_max; ++m) {
        std::size_t bm = 2 * base_batch * spec.context_len() / window_len(m);
        if (dataset_len > 0) {
            const auto n = dataset_len >= window_len(m) ? chunk_offsets(dataset_len, m).count : 0;
            plan.windows[m] = n;
            if (bm > n) {
                plan.warnings.push_back("B_" + std::to_string(m) + " = " + std::to_string(bm) + " exceeds |D_" +
                                        std::to_string(m) + "| = " + std::to_string(n) + "; capped");
                bm = n;
            }
            plan.steps_per_epoch[m] = bm ? n / bm : 0;
        }
        plan.batch[m] = bm;
    }
    return plan;
}

struct CostSummary {
    std::uint64_t proxy = 0;  // sum_m B_m * (2^m)^2
    std::uint64_t bound = 0;  // 4 * B * L_ctx^2
    std::map<unsigned, std::uint64_t> per_level;
    bool within_bound() const { return proxy <= bound; }
};

// Quadratic-attention cost per step, summed over levels, against the bound
// 4 * B * L_ctx^2 (twice the cost of one step of direct training at 2B).
inline CostSummary cost_audit(const BatchPlan& plan) {
    CostSummary c;
    const std::uint64_t lctx = plan.spec.context_len();
    c.bound = 4 * static_cast<std::uint64_t>(plan.base_batch) * lctx * lctx;
    for (const auto& [m, bm] : plan.batch) {
        const std::uint64_t len = window_len(m);
        const std::uint64_t term = static_cast<std::uint64_t>(bm) * len * len;
        c.per_level[m] = term;
        c.proxy += term;
    }
    return c;
}

}  // namespace cascade
