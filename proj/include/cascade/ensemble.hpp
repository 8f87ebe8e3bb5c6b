#pragma once

// Confidence-weighted combination of next-token predictions made with
// different context lengths 2^(m-1), m_min <= m <= M.
//
// Each level m yields log p_m(x). With c_m = max_x log p_m(x), the weights are
// w_m = (1 / (eps - c_m)) / sum_k (1 / (eps - c_k)), the mixture is
// l(x) = sum_m w_m log p_m(x), and the output distribution is exp(l)
// renormalized.

#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/model.hpp"
#include "cascade/windows.hpp"

namespace cascade {

inline constexpr double ensemble_eps = 1e-9;

template <typename T>
struct ModelBank {
    enum class Kind { original, compressed };

    Kind kind = Kind::compressed;
    CascadeSpec spec;
    std::vector<Parameters<T>> models;  // original: index m - m_min; compressed: one

    const Parameters<T>& at(unsigned m) const {
        if (m < spec.m_min || m > spec.m_max) throw std::out_of_range("level " + std::to_string(m) + " not in bank");
        return kind == Kind::original ? models.at(m - spec.m_min) : models.at(0);
    }

    void validate() const {
        spec.validate();
        const auto expected = kind == Kind::original ? spec.levels() : std::size_t{1};
        if (models.size() != expected)
            throw std::invalid_argument("model bank holds " + std::to_string(models.size()) + " models, expected " +
                                        std::to_string(expected));
    }

    static ModelBank compressed(Parameters<T> p, const CascadeSpec& spec) {
        ModelBank b;
        b.kind = Kind::compressed;
        b.spec = spec;
        b.models.push_back(std::move(p));
        return b;
    }
};

// Loads model_m{m}.ckpt for every level if present (original), otherwise
// model.ckpt (compressed).
template <typename T = float>
ModelBank<T> load_bank(const std::filesystem::path& dir, const CascadeSpec& spec) {
    ModelBank<T> bank;
    bank.spec = spec;
    const auto first = dir / ("model_m" + std::to_string(spec.m_min) + ".ckpt");
    if (std::filesystem::exists(first)) {
        bank.kind = ModelBank<T>::Kind::original;
        for (unsigned m = spec.m_min; m <= spec.m_max; ++m) {
            const auto path = dir / ("model_m" + std::to_string(m) + ".ckpt");
            if (!std::filesystem::exists(path)) throw DataError("missing checkpoint " + path.string());
            bank.models.push_back(load_checkpoint<T>(path));
        }
    } else {
        bank.kind = ModelBank<T>::Kind::compressed;
        bank.models.push_back(load_checkpoint<T>(dir / "model.ckpt"));
    }
    bank.validate();
    return bank;
}

// Normalized weights from confidences c_m (max log probabilities, <= 0).
inline std::vector<double> ensemble_weights(std::span<const double> c, double eps = ensemble_eps) {
    if (c.empty()) throw std::invalid_argument("ensemble_weights: no levels");
    std::vector<double> w(c.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        w[i] = 1.0 / (eps - c[i]);
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

struct Mixture {
    std::vector<double> logprob;  // normalized log distribution over the vocabulary
    std::vector<double> weights;  // per level, ascending m
};

// Combines per-level log distributions (each normalized) into the ensemble
// log distribution.
inline Mixture combine_levels(const std::vector<std::vector<double>>& level_logprobs) {
    if (level_logprobs.empty()) throw std::invalid_argument("combine_levels: no levels");
    const auto V = level_logprobs.front().size();
    std::vector<double> c(level_logprobs.size());
    for (std::size_t k = 0; k < c.size(); ++k) {
        if (level_logprobs[k].size() != V) throw std::invalid_argument("combine_levels: vocabulary mismatch");
        c[k] = *std::max_element(level_logprobs[k].begin(), level_logprobs[k].end());
    }
    Mixture mix;
    mix.weights = ensemble_weights(c);
    mix.logprob.assign(V, 0.0);
    for (std::size_t k = 0; k < c.size(); ++k)
        for (std::size_t x = 0; x < V; ++x) mix.logprob[x] += mix.weights[k] * level_logprobs[k][x];
    const double mx = *std::max_element(mix.logprob.begin(), mix.logprob.end());
    double z = 0.0;
    for (auto v : mix.logprob) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (auto& v : mix.logprob) v -= lse;
    return mix;
}

template <typename T>
std::vector<double> row_log_softmax(const Mat<T>& logits, Eigen::Index row) {
    const auto lp = log_softmax<T>(logits.row(row));
    std::vector<double> out(static_cast<std::size_t>(lp.cols()));
    for (Eigen::Index x = 0; x < lp.cols(); ++x) out[static_cast<std::size_t>(x)] = static_cast<double>(lp(0, x));
    return out;
}

struct NextDistribution {
    std::vector<double> probs;
    std::vector<double> weights;
};

// Ensemble next-token distribution after `prefix`. Level m conditions on the
// last min(2^(m-1), |prefix|) tokens.
template <typename T>
NextDistribution next_distribution(const ModelBank<T>& bank, std::span<const TokenId> prefix) {
    if (prefix.empty()) throw std::invalid_argument("next_distribution: empty prefix");
    std::vector<std::vector<double>> levels;
    for (unsigned m = bank.spec.m_min; m <= bank.spec.m_max; ++m) {
        const auto n = std::min(half_len(m), prefix.size());
        const auto ctx = prefix.subspan(prefix.size() - n);
        const auto logits = forward(bank.at(m), ctx, 1, n);
        levels.push_back(row_log_softmax(logits, logits.rows() - 1));
    }
    auto mix = combine_levels(levels);
    NextDistribution out;
    out.weights = std::move(mix.weights);
    out.probs.resize(mix.logprob.size());
    for (std::size_t x = 0; x < out.probs.size(); ++x) out.probs[x] = std::exp(mix.logprob[x]);
    return out;
}

// ---------------------------------------------------------------------------
// Chunked evaluation
// ---------------------------------------------------------------------------

// Per-position results for one token sequence. Position j (1 <= j < n) holds
// the prediction of token j; position 0 is unused.
struct SequenceScores {
    std::size_t length = 0;
    std::vector<unsigned> levels;
    std::vector<std::vector<std::vector<double>>> level_logprobs;  // [level][position] -> log distribution
    std::vector<std::vector<double>> weights;                      // [position][level]
    std::vector<double> token_logprob;                             // ensemble log p(token_j)

    double level_token_logprob(std::size_t level, std::size_t j, std::span<const TokenId> tokens) const {
        return level_logprobs[level][j][tokens[j]];
    }
};

// Start of the context used at position j by level m in chunked evaluation:
// chunks begin at multiples i of h = 2^(m-1) and see s[i - h, ...).
inline std::size_t chunk_context_start(std::size_t j, unsigned m) {
    const auto h = half_len(m);
    const auto i = (j / h) * h;
    return i >= h ? i - h : 0;
}

// Log distributions at every position for level m, computed chunk by chunk:
// for i = 0, h, 2h, ... feed s[max(0, i - h), i + h) and read positions
// i .. i + h - 1.
template <typename T>
std::vector<std::vector<double>> chunked_level_logprobs(const Parameters<T>& p, std::span<const TokenId> s,
                                                        unsigned m) {
    const auto n = s.size();
    const auto h = half_len(m);
    if (n % h != 0)
        throw std::invalid_argument("chunked evaluation: length " + std::to_string(n) + " is not a multiple of " +
                                    std::to_string(h));
    std::vector<std::vector<double>> out(n);
    // First chunk has no left context; the remaining chunks all have length 2h
    // and are evaluated as one batch.
    {
        const auto logits = forward(p, s.subspan(0, h), 1, h);
        for (std::size_t j = 1; j < h; ++j) out[j] = row_log_softmax(logits, static_cast<Eigen::Index>(j - 1));
    }
    const std::size_t chunks = n / h - 1;
    if (chunks > 0) {
        std::vector<TokenId> batch(chunks * 2 * h);
        for (std::size_t c = 0; c < chunks; ++c) {
            const auto i = (c + 1) * h;
            std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(i - h), 2 * h,
                        batch.begin() + static_cast<std::ptrdiff_t>(c * 2 * h));
        }
        const auto logits = forward(p, batch, chunks, 2 * h);
        const auto lp = log_softmax(logits);
        for (std::size_t c = 0; c < chunks; ++c) {
            const auto i = (c + 1) * h;
            for (std::size_t j = i; j < i + h; ++j) {
                const auto row = static_cast<Eigen::Index>(c * 2 * h + (j - 1 - (i - h)));
                auto& dst = out[j];
                dst.resize(static_cast<std::size_t>(lp.cols()));
                for (Eigen::Index x = 0; x < lp.cols(); ++x) dst[static_cast<std::size_t>(x)] = static_cast<double>(lp(row, x));
            }
        }
    }
    return out;
}

// Same values as chunked_level_logprobs, one forward pass per position.
template <typename T>
std::vector<std::vector<double>> naive_level_logprobs(const Parameters<T>& p, std::span<const TokenId> s, unsigned m) {
    std::vector<std::vector<double>> out(s.size());
    for (std::size_t j = 1; j < s.size(); ++j) {
        const auto start = chunk_context_start(j, m);
        const auto ctx = s.subspan(start, j - start);
        const auto logits = forward(p, ctx, 1, ctx.size());
        out[j] = row_log_softmax(logits, logits.rows() - 1);
    }
    return out;
}

template <typename T>
SequenceScores eval_logprob_chunked(const ModelBank<T>& bank, std::span<const TokenId> s,
                                    std::size_t expected_len = 0, bool naive = false) {
    if (expected_len && s.size() != expected_len)
        throw std::invalid_argument("entry length " + std::to_string(s.size()) + " does not match L_blk = " +
                                    std::to_string(expected_len));
    if (s.size() < 2) throw std::invalid_argument("entry too short to score");
    SequenceScores out;
    out.length = s.size();
    for (unsigned m = bank.spec.m_min; m <= bank.spec.m_max; ++m) {
        out.levels.push_back(m);
        out.level_logprobs.push_back(naive ? naive_level_logprobs(bank.at(m), s, m)
                                           : chunked_level_logprobs(bank.at(m), s, m));
    }
    out.weights.assign(s.size(), {});
    out.token_logprob.assign(s.size(), 0.0);
    std::vector<std::vector<double>> at_j(out.levels.size());
    for (std::size_t j = 1; j < s.size(); ++j) {
        for (std::size_t k = 0; k < out.levels.size(); ++k) at_j[k] = out.level_logprobs[k][j];
        auto mix = combine_levels(at_j);
        out.token_logprob[j] = mix.logprob[s[j]];
        out.weights[j] = std::move(mix.weights);
    }
    return out;
}

// Position x level weight matrix (positions 1..n-1).
template <typename T>
std::vector<std::vector<double>> weight_trace(const ModelBank<T>& bank, std::span<const TokenId> s) {
    auto scores = eval_logprob_chunked(bank, s);
    return std::vector<std::vector<double>>(scores.weights.begin() + 1, scores.weights.end());
}

// CSV rows (entry_id, position, m, weight) for one entry's trace.
inline void append_weight_trace_csv(std::ostream& os, std::size_t entry_id, const SequenceScores& scores) {
    os << std::setprecision(12);
    for (std::size_t j = 1; j < scores.length; ++j)
        for (std::size_t k = 0; k < scores.levels.size(); ++k)
            os << entry_id << ',' << j << ',' << scores.levels[k] << ',' << scores.weights[j][k] << '\n';
}

inline constexpr const char* weight_trace_header = "entry_id,position,m,weight\n";

// Log p(token_j) for every position under a single model with full context.
template <typename T>
std::vector<double> single_model_token_logprobs(const Parameters<T>& p, std::span<const TokenId> s) {
    const auto lp = log_softmax(forward(p, s, 1, s.size()));
    std::vector<double> out(s.size(), 0.0);
    for (std::size_t j = 1; j < s.size(); ++j) out[j] = static_cast<double>(lp(static_cast<Eigen::Index>(j - 1), s[j]));
    return out;
}

}  // namespace cascade
