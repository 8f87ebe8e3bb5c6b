#pragma once

// Normalized log probability of knowledge completions, aggregation into
// (format mode, knowledge mode) cells, and sigmoid regression over ratios.

#include <Eigen/Dense>

#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/knowledge.hpp"

namespace cascade {

struct EvalResult {
    std::string format_mode;
    std::string knowledge_mode;
    std::size_t knowledge_index = 0;
    bool holdout = false;
    double value = 0.0;  // mean log probability over the scored positions, <= 0
    std::size_t n_scored = 0;

    bool cross_mode() const { return format_mode != knowledge_mode; }
};

// token_logprob[j] = log p(entry.tokens[j] | context) for every position j.
// Scores the completion k[query_len:] at the end of the entry.
inline EvalResult normalized_logprob(std::span<const double> token_logprob, const EvalEntry& entry) {
    if (entry.knowledge_len <= entry.query_len)
        throw std::invalid_argument("normalized_logprob: empty completion (knowledge_len <= query_len)");
    if (entry.knowledge_len > entry.tokens.size()) throw std::invalid_argument("normalized_logprob: bad entry");
    if (token_logprob.size() != entry.tokens.size())
        throw std::invalid_argument("normalized_logprob: score vector length mismatch");
    EvalResult r{entry.format_mode, entry.knowledge_mode, entry.knowledge_index, entry.holdout, 0.0, 0};
    double sum = 0.0;
    for (std::size_t j = entry.scored_begin(); j < entry.tokens.size(); ++j) {
        sum += token_logprob[j];
        ++r.n_scored;
    }
    r.value = sum / static_cast<double>(r.n_scored);
    return r;
}

struct Cell {
    std::string format_mode;
    std::string knowledge_mode;
    bool holdout_only = false;
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t count = 0;

    bool cross_mode() const { return format_mode != knowledge_mode; }
};

using CellKey = std::pair<std::string, std::string>;  // (format_mode, knowledge_mode)
using CellTable = std::map<CellKey, Cell>;

// Same-mode cells average every entry; cross-mode cells average held-out
// entries only. Cells without entries are absent.
inline CellTable aggregate(const std::vector<EvalResult>& results) {
    if (results.empty()) throw std::invalid_argument("aggregate: no results");
    CellTable table;
    for (const auto& r : results) {
        if (r.cross_mode() && !r.holdout) continue;
        auto& c = table[{r.format_mode, r.knowledge_mode}];
        if (c.count == 0) {
            c.format_mode = r.format_mode;
            c.knowledge_mode = r.knowledge_mode;
            c.holdout_only = r.cross_mode();
            c.min = c.max = r.value;
        }
        c.mean += r.value;
        c.min = std::min(c.min, r.value);
        c.max = std::max(c.max, r.value);
        ++c.count;
    }
    for (auto& [k, c] : table) c.mean /= static_cast<double>(c.count);
    return table;
}

inline json cells_to_json(const CellTable& t) {
    json out = json::array();
    for (const auto& [k, c] : t)
        out.push_back({{"format_mode", c.format_mode},
                       {"knowledge_mode", c.knowledge_mode},
                       {"holdout_only", c.holdout_only},
                       {"mean_logprob", c.mean},
                       {"min", c.min},
                       {"max", c.max},
                       {"n_entries", c.count}});
    return out;
}

inline std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Ratio sweep records
// ---------------------------------------------------------------------------

// r = n_occ / n_occ_x, infinite when n_occ_x = 0.
inline double occurrence_ratio(std::size_t n_occ, std::size_t n_occ_x) {
    return n_occ_x == 0 ? std::numeric_limits<double>::infinity()
                        : static_cast<double>(n_occ) / static_cast<double>(n_occ_x);
}

struct RatioPoint {
    std::size_t n_occ_x = 0;
    double r = 0.0;
    std::uint64_t seed = 0;
    Cell cell;

    double mean_nll() const { return -cell.mean; }
};

inline constexpr const char* sweep_csv_header =
    "n_occ_x,r,seed,format_mode,knowledge_mode,holdout_only,mean_nll,n_entries\n";

inline std::string sweep_csv_row(const RatioPoint& p) {
    std::ostringstream os;
    os << p.n_occ_x << ',' << format_double(p.r) << ',' << p.seed << ',' << p.cell.format_mode << ','
       << p.cell.knowledge_mode << ',' << (p.cell.holdout_only ? 1 : 0) << ',' << format_double(p.mean_nll()) << ','
       << p.cell.count << '\n';
    return os.str();
}

// Parses rows written by sweep_csv_row.
inline std::vector<RatioPoint> parse_sweep_csv(const std::string& text) {
    std::vector<RatioPoint> out;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    if (line + "\n" != sweep_csv_header) throw DataError("sweep CSV: unexpected header");
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string tok;
        while (std::getline(ls, tok, ',')) f.push_back(tok);
        if (f.size() != 8) throw DataError("sweep CSV line " + std::to_string(lineno) + ": expected 8 fields");
        try {
            RatioPoint p;
            p.n_occ_x = std::stoull(f[0]);
            p.r = f[1] == "inf" ? std::numeric_limits<double>::infinity() : std::stod(f[1]);
            p.seed = std::stoull(f[2]);
            p.cell.format_mode = f[3];
            p.cell.knowledge_mode = f[4];
            p.cell.holdout_only = f[5] == "1";
            p.cell.mean = -std::stod(f[6]);
            p.cell.count = std::stoull(f[7]);
            out.push_back(std::move(p));
        } catch (const std::logic_error&) {
            throw DataError("sweep CSV line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sigmoid regression: f(r) = a * sigmoid(b * (log r - c))
// ---------------------------------------------------------------------------

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct SigmoidFit {
    double a = 0.0, b = 0.0, c = 0.0;
    double sse = 0.0;
    double initial_sse = 0.0;  // best residual among the starting points
    std::size_t n_points = 0;
    bool degenerate = false;  // fitted curve flat over the data
    std::size_t iterations = 0;

    double operator()(double r) const { return a * sigmoid(b * (std::log(r) - c)); }
};

inline json fit_to_json(const SigmoidFit& f) {
    return json{{"a", f.a},
                {"b", f.b},
                {"c", f.c},
                {"sse", f.sse},
                {"n_points", f.n_points},
                {"degenerate", f.degenerate}};
}

namespace detail {

inline double sigmoid_sse(const Eigen::Vector3d& th, std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = th[0] * sigmoid(th[1] * (x[i] - th[2])) - y[i];
        s += e * e;
    }
    return s;
}

struct LmResult {
    Eigen::Vector3d theta;
    double sse;
    std::size_t iterations;
};

// Levenberg-Marquardt with Marquardt scaling; only steps that lower the SSE
// are accepted.
inline LmResult levenberg_marquardt(Eigen::Vector3d th, std::span<const double> x, std::span<const double> y) {
    double sse = sigmoid_sse(th, x, y);
    double lambda = 1e-3;
    std::size_t it = 0;
    for (; it < 2000; ++it) {
        Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
        Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double u = th[1] * (x[i] - th[2]);
            const double s = sigmoid(u);
            const double ds = s * (1.0 - s);
            const Eigen::Vector3d J(s, th[0] * ds * (x[i] - th[2]), -th[0] * ds * th[1]);
            const double r = th[0] * s - y[i];
            jtj += J * J.transpose();
            jtr += J * r;
        }
        bool improved = false;
        while (lambda < 1e16) {
            Eigen::Matrix3d A = jtj;
            for (int k = 0; k < 3; ++k) A(k, k) += lambda * std::max(jtj(k, k), 1e-12);
            const Eigen::Vector3d step = A.ldlt().solve(-jtr);
            const Eigen::Vector3d cand = th + step;
            const double cand_sse = sigmoid_sse(cand, x, y);
            if (std::isfinite(cand_sse) && cand_sse < sse) {
                const double gain = sse - cand_sse;
                th = cand;
                sse = cand_sse;
                lambda = std::max(lambda / 10.0, 1e-12);
                improved = true;
                if (gain <= 1e-15 * std::max(sse, 1e-300) || sse < 1e-30) return {th, sse, it + 1};
                break;
            }
            lambda *= 10.0;
        }
        if (!improved) break;
    }
    return {th, sse, it};
}

inline double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

// Fits f on (r, y) pairs with finite r > 0 from a multi-start grid:
// a in {min y, -max |y|}, c in the quartiles of log r, b in {-2, -0.5, 0.5, 2}.
inline SigmoidFit fit_sigmoid(std::span<const double> r, std::span<const double> y) {
    if (r.size() != y.size()) throw std::invalid_argument("fit_sigmoid: size mismatch");
    std::vector<double> x, yy;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (!std::isfinite(r[i])) continue;
        if (!(r[i] > 0.0)) throw std::invalid_argument("fit_sigmoid: ratios must be positive");
        if (!std::isfinite(y[i])) throw std::invalid_argument("fit_sigmoid: non-finite value");
        x.push_back(std::log(r[i]));
        yy.push_back(y[i]);
    }
    if (x.size() < 4) throw std::invalid_argument("fit_sigmoid: need at least 4 finite points");
    std::vector<double> distinct = x;
    std::sort(distinct.begin(), distinct.end());
    if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2)
        throw std::invalid_argument("fit_sigmoid: need at least 2 distinct ratios");

    double ymin = yy[0], ymax = yy[0], absmax = 0.0;
    for (auto v : yy) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
        absmax = std::max(absmax, std::abs(v));
    }
    const std::vector<double> a0{ymin, -absmax};
    const std::vector<double> c0{detail::quantile(x, 0.25), detail::quantile(x, 0.5), detail::quantile(x, 0.75)};
    const std::vector<double> b0{-2.0, -0.5, 0.5, 2.0};

    SigmoidFit best;
    best.sse = std::numeric_limits<double>::infinity();
    best.initial_sse = std::numeric_limits<double>::infinity();
    std::size_t failed = 0;
    for (double a : a0)
        for (double c : c0)
            for (double b : b0) {
                const Eigen::Vector3d th(a, b, c);
                const double init = detail::sigmoid_sse(th, x, yy);
                if (std::isfinite(init)) best.initial_sse = std::min(best.initial_sse, init);
                const auto res = detail::levenberg_marquardt(th, x, yy);
                if (!std::isfinite(res.sse) || !res.theta.allFinite()) {
                    ++failed;
                    continue;
                }
                if (res.sse < best.sse) {
                    best.a = res.theta[0];
                    best.b = res.theta[1];
                    best.c = res.theta[2];
                    best.sse = res.sse;
                    best.iterations = res.iterations;
                }
            }
    if (!std::isfinite(best.sse))
        throw std::runtime_error("fit_sigmoid: all " + std::to_string(failed) + " starts diverged (n=" +
                                 std::to_string(x.size()) + ", y in [" + std::to_string(ymin) + ", " +
                                 std::to_string(ymax) + "])");
    best.n_points = x.size();
    // A curve that is flat over the data (b ~ 0, or every point saturated on
    // one side of c) leaves b and c unidentified.
    double smin = 1.0, smax = 0.0;
    for (auto xi : x) {
        const double s = sigmoid(best.b * (xi - best.c));
        smin = std::min(smin, s);
        smax = std::max(smax, s);
    }
    best.degenerate = smax - smin < 1e-6 || std::abs(best.a) < 1e-12;
    return best;
}

}  // namespace cascade
