#pragma once

// Decoder-only transformer with rotary position encoding and hand-written
// reverse-mode gradients.
//
// Blocks are pre-LayerNorm and sequential:
//   x += Dropout(Attn(LN1(x)));  x += Dropout(MLP(LN2(x)))
// followed by a final LayerNorm and an untied output projection. Attention
// uses rotary encoding on the first rotary_dim channels of every head's query
// and key, so one parameter set serves every window length up to
// max_seq_len.
//
// All parameters live in one flat buffer; tensors are views into it in a fixed
// canonical order (see ParamLayout). Gradients use the same layout.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "cascade/common.hpp"

namespace cascade {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using VecMap = Eigen::Map<RowVec<T>>;
template <typename T>
using ConstVecMap = Eigen::Map<const RowVec<T>>;

// Buffers that Eigen maps over. Vectorized reductions peel at the first
// aligned address, so heap-dependent alignment would change summation order
// and break bit-exact reruns.
template <typename T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

struct ModelConfig {
    std::size_t n_layer = 2;
    std::size_t n_head = 2;
    std::size_t d_model = 64;
    std::size_t rotary_dim = 16;
    std::size_t vocab_size = 128;
    std::size_t max_seq_len = 64;
    double dropout_p = 0.1;  // attention probabilities and both residual branches
    double rotary_base = 10000.0;
    std::string block = "sequential";

    std::size_t head_dim() const { return d_model / n_head; }

    void validate() const {
        if (n_layer == 0) throw ConfigError("model.n_layer", "must be positive");
        if (n_head == 0) throw ConfigError("model.n_head", "must be positive");
        if (d_model == 0 || d_model % n_head != 0)
            throw ConfigError("model.d_model", "must be divisible by n_head");
        if (rotary_dim % 2 != 0) throw ConfigError("model.rotary_dim", "must be even");
        if (rotary_dim > head_dim()) throw ConfigError("model.rotary_dim", "exceeds d_model / n_head");
        if (vocab_size == 0) throw ConfigError("model.vocab_size", "must be positive");
        if (max_seq_len == 0) throw ConfigError("model.max_seq_len", "must be positive");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("model.dropout_p", "must lie in [0, 1)");
        if (block != "sequential") throw ConfigError("model.block", "only 'sequential' blocks are supported");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"n_layer", c.n_layer},
             {"n_head", c.n_head},
             {"d_model", c.d_model},
             {"rotary_dim", c.rotary_dim},
             {"vocab_size", c.vocab_size},
             {"max_seq_len", c.max_seq_len},
             {"dropout_p", c.dropout_p},
             {"dropout_sites", "attention_probs,attn_residual,mlp_residual"},
             {"rotary_base", c.rotary_base},
             {"block", c.block}};
}
inline void from_json(const json& j, ModelConfig& c) {
    ModelConfig d;
    c.n_layer = j.value("n_layer", d.n_layer);
    c.n_head = j.value("n_head", d.n_head);
    c.d_model = j.value("d_model", d.d_model);
    c.rotary_dim = j.value("rotary_dim", d.rotary_dim);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.dropout_p = j.value("dropout_p", d.dropout_p);
    c.rotary_base = j.value("rotary_base", d.rotary_base);
    c.block = j.value("block", d.block);
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct TensorInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;

    std::size_t size() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.back(); }
};

struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };

    std::vector<TensorInfo> tensors;  // canonical order
    std::size_t tok_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0;
    std::vector<Layer> layers;
    std::size_t total = 0;

    explicit ParamLayout(const ModelConfig& c) {
        const auto d = c.d_model, V = c.vocab_size;
        auto add = [&](std::string name, std::vector<std::size_t> shape) {
            TensorInfo t{std::move(name), std::move(shape), total};
            total += t.size();
            tensors.push_back(std::move(t));
            return tensors.size() - 1;
        };
        tok_emb = add("tok_emb", {V, d});
        for (std::size_t l = 0; l < c.n_layer; ++l) {
            const auto p = "h" + std::to_string(l) + ".";
            Layer L{};
            L.ln1_g = add(p + "ln1.g", {d});
            L.ln1_b = add(p + "ln1.b", {d});
            L.w_qkv = add(p + "attn.w_qkv", {d, 3 * d});
            L.b_qkv = add(p + "attn.b_qkv", {3 * d});
            L.w_o = add(p + "attn.w_o", {d, d});
            L.b_o = add(p + "attn.b_o", {d});
            L.ln2_g = add(p + "ln2.g", {d});
            L.ln2_b = add(p + "ln2.b", {d});
            L.w_fc = add(p + "mlp.w_fc", {d, 4 * d});
            L.b_fc = add(p + "mlp.b_fc", {4 * d});
            L.w_proj = add(p + "mlp.w_proj", {4 * d, d});
            L.b_proj = add(p + "mlp.b_proj", {d});
            layers.push_back(L);
        }
        lnf_g = add("ln_f.g", {d});
        lnf_b = add("ln_f.b", {d});
        w_out = add("w_out", {d, V});
    }

    const TensorInfo& operator[](std::size_t i) const { return tensors[i]; }
};

// Closed form for the layout above: 2Vd + 2d + n_layer * (12d^2 + 13d).
inline std::size_t parameter_count(const ModelConfig& c) {
    const auto d = c.d_model, V = c.vocab_size;
    return 2 * V * d + 2 * d + c.n_layer * (12 * d * d + 13 * d);
}

template <typename T>
struct Parameters {
    ModelConfig config;
    ParamLayout layout;
    AlignedVec<T> data;

    explicit Parameters(const ModelConfig& c) : config(c), layout(c), data(layout.total, T(0)) {}

    std::size_t size() const { return data.size(); }

    MatMap<T> mat(std::size_t slot) {
        const auto& t = layout[slot];
        return {data.data() + t.offset, static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
    }
    ConstMatMap<T> mat(std::size_t slot) const {
        const auto& t = layout[slot];
        return {data.data() + t.offset, static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
    }
    ConstVecMap<T> vec(std::size_t slot) const {
        const auto& t = layout[slot];
        return {data.data() + t.offset, static_cast<Eigen::Index>(t.size())};
    }

    template <typename U>
    Parameters<U> cast() const {
        Parameters<U> out(config);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

// Views into a gradient buffer laid out like the parameters.
template <typename T>
struct GradView {
    const ParamLayout& layout;
    T* data;

    MatMap<T> mat(std::size_t slot) const {
        const auto& t = layout[slot];
        return {data + t.offset, static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
    }
    VecMap<T> vec(std::size_t slot) const {
        const auto& t = layout[slot];
        return {data + t.offset, static_cast<Eigen::Index>(t.size())};
    }
};

// Weights ~ N(0, 0.02^2); residual output projections (attention out and MLP
// down) are further scaled by 1/sqrt(2 * n_layer). LayerNorm gains start at 1,
// biases at 0.
template <typename T = float>
Parameters<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Parameters<T> p(config);
    Rng rng(seed);
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * static_cast<double>(config.n_layer));
    auto fill_normal = [&](std::size_t slot, double stddev) {
        const auto& t = p.layout[slot];
        for (std::size_t i = 0; i < t.size(); ++i) p.data[t.offset + i] = static_cast<T>(stddev * rng.normal());
    };
    auto fill_const = [&](std::size_t slot, T v) {
        const auto& t = p.layout[slot];
        std::fill_n(p.data.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), v);
    };
    fill_normal(p.layout.tok_emb, base_std);
    for (const auto& L : p.layout.layers) {
        fill_const(L.ln1_g, T(1));
        fill_normal(L.w_qkv, base_std);
        fill_normal(L.w_o, resid_std);
        fill_const(L.ln2_g, T(1));
        fill_normal(L.w_fc, base_std);
        fill_normal(L.w_proj, resid_std);
    }
    fill_const(p.layout.lnf_g, T(1));
    fill_normal(p.layout.w_out, base_std);
    return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

template <typename T>
struct LayerCache {
    Mat<T> x_in, xhat1, h1, qkv, att, x_mid, xhat2, h2, f, g;
    AlignedVec<T> rstd1, rstd2;
    AlignedVec<T> probs;  // [row][head] T x T softmax (before dropout)
    // Dropout multipliers (0 or 1/(1-p)); empty when dropout is off.
    AlignedVec<T> attn_keep, resid1_keep, resid2_keep;
};

template <typename T>
struct ForwardCache {
    std::size_t rows = 0, seq = 0;
    std::vector<LayerCache<T>> layers;
    Mat<T> x_final, xhatf, hf;
    AlignedVec<T> rstdf;
    bool dropout = false;
};

namespace detail {

constexpr double ln_eps = 1e-5;

template <typename T>
void layernorm_forward(const Mat<T>& x, ConstVecMap<T> g, ConstVecMap<T> b, Mat<T>& xhat,
                       AlignedVec<T>& rstd, Mat<T>& y) {
    const auto n = x.rows(), d = x.cols();
    xhat.resize(n, d);
    y.resize(n, d);
    rstd.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().mean();
        const T r = T(1) / std::sqrt(var + T(ln_eps));
        rstd[static_cast<std::size_t>(i)] = r;
        xhat.row(i) = (x.row(i).array() - mean) * r;
        y.row(i) = xhat.row(i).cwiseProduct(g) + b;
    }
}

// dx += LN backward of dy.
template <typename T>
void layernorm_backward(const Mat<T>& dy, const Mat<T>& xhat, const AlignedVec<T>& rstd, ConstVecMap<T> g,
                        Mat<T>& dx, VecMap<T> dg, VecMap<T> db) {
    const auto n = dy.rows();
    const T inv_d = T(1) / static_cast<T>(dy.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        dg += dy.row(i).cwiseProduct(xhat.row(i));
        db += dy.row(i);
        const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
        const T mean_dxhat = dxhat.sum() * inv_d;
        const T mean_dxhat_xhat = dxhat.dot(xhat.row(i)) * inv_d;
        dx.row(i).array() += rstd[static_cast<std::size_t>(i)] *
                             (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
    }
}

// tanh-approximated GELU and its derivative, elementwise.
template <typename T>
Mat<T> gelu(const Mat<T>& x) {
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    const auto t = (k * (x.array() + T(0.044715) * x.array().cube())).tanh();
    return (T(0.5) * x.array() * (T(1) + t)).matrix();
}

template <typename T>
Mat<T> gelu_grad(const Mat<T>& x) {
    constexpr T k = T(0.7978845608028654);
    const auto a = x.array();
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
        (k * (a + T(0.044715) * a.cube())).tanh();
    return (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * k * (T(1) + T(3 * 0.044715) * a.square()))
        .matrix();
}

struct RotaryTable {
    std::size_t half = 0;
    std::vector<double> cos, sin;  // [pos][pair]

    RotaryTable(const ModelConfig& c, std::size_t seq) : half(c.rotary_dim / 2) {
        cos.resize(seq * half);
        sin.resize(seq * half);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t i = 0; i < half; ++i) {
                const double inv_freq =
                    std::pow(c.rotary_base, -2.0 * static_cast<double>(i) / static_cast<double>(c.rotary_dim));
                const double angle = static_cast<double>(t) * inv_freq;
                cos[t * half + i] = std::cos(angle);
                sin[t * half + i] = std::sin(angle);
            }
    }
};

// Rotates the first rotary_dim channels of each head of the q and k sections
// of qkv in place. inverse = true applies the transpose (used for gradients).
template <typename T>
void apply_rotary(Mat<T>& qkv, const ModelConfig& c, const RotaryTable& rt, std::size_t seq, bool inverse) {
    if (rt.half == 0) return;
    const auto d = c.d_model, hd = c.head_dim();
    const T sign = inverse ? T(-1) : T(1);
    for (Eigen::Index n = 0; n < qkv.rows(); ++n) {
        const auto t = static_cast<std::size_t>(n) % seq;
        T* row = qkv.row(n).data();
        for (std::size_t section = 0; section < 2; ++section)
            for (std::size_t h = 0; h < c.n_head; ++h) {
                T* x = row + section * d + h * hd;
                for (std::size_t i = 0; i < rt.half; ++i) {
                    const T cs = static_cast<T>(rt.cos[t * rt.half + i]);
                    const T sn = sign * static_cast<T>(rt.sin[t * rt.half + i]);
                    const T a = x[i], b = x[i + rt.half];
                    x[i] = a * cs - b * sn;
                    x[i + rt.half] = a * sn + b * cs;
                }
            }
    }
}

// Each 64-bit draw yields two 32-bit uniforms.
template <typename T>
void dropout_mask(AlignedVec<T>& keep, std::size_t n, double p, Rng& rng) {
    keep.resize(n);
    const auto threshold = static_cast<std::uint64_t>(std::ceil(p * 4294967296.0));
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < n; i += 2) {
        const auto bits = rng.next();
        keep[i] = (bits & 0xffffffffULL) >= threshold ? scale : T(0);
        if (i + 1 < n) keep[i + 1] = (bits >> 32) >= threshold ? scale : T(0);
    }
}

template <typename T>
void apply_mask(Mat<T>& m, const T* keep) {
    m.array() *= ConstMatMap<T>(keep, m.rows(), m.cols()).array();
}

}  // namespace detail

// Logits for every position: (rows * seq) x vocab, row-major by (row, position).
// Passing a cache records the activations needed by backward(); passing a
// dropout rng enables dropout (training only).
template <typename T>
Mat<T> forward(const Parameters<T>& p, std::span<const TokenId> tokens, std::size_t rows, std::size_t seq,
               ForwardCache<T>* cache = nullptr, Rng* dropout_rng = nullptr) {
    using namespace detail;
    const auto& c = p.config;
    const auto& L = p.layout;
    if (rows == 0 || seq == 0) throw std::invalid_argument("forward: empty batch");
    if (tokens.size() != rows * seq) throw std::invalid_argument("forward: token count mismatch");
    if (seq > c.max_seq_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len");
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] >= c.vocab_size)
            throw std::invalid_argument("forward: token " + std::to_string(tokens[i]) + " at index " +
                                        std::to_string(i) + " is out of range");

    const auto N = static_cast<Eigen::Index>(rows * seq);
    const auto d = static_cast<Eigen::Index>(c.d_model);
    const auto hd = static_cast<Eigen::Index>(c.head_dim());
    const auto S = static_cast<Eigen::Index>(seq);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const bool use_dropout = dropout_rng != nullptr && c.dropout_p > 0.0;
    const RotaryTable rt(c, seq);

    ForwardCache<T> local;
    ForwardCache<T>& fc = cache ? *cache : local;
    fc.rows = rows;
    fc.seq = seq;
    fc.dropout = use_dropout;
    fc.layers.resize(c.n_layer);

    Mat<T> x(N, d);
    const auto emb = p.mat(L.tok_emb);
    for (Eigen::Index n = 0; n < N; ++n) x.row(n) = emb.row(static_cast<Eigen::Index>(tokens[static_cast<std::size_t>(n)]));

    Mat<T> scores(S, S);
    for (std::size_t l = 0; l < c.n_layer; ++l) {
        const auto& slots = L.layers[l];
        auto& lc = fc.layers[l];
        lc.x_in = x;

        layernorm_forward(lc.x_in, p.vec(slots.ln1_g), p.vec(slots.ln1_b), lc.xhat1, lc.rstd1, lc.h1);
        lc.qkv.resize(N, 3 * d);
        lc.qkv.noalias() = lc.h1 * p.mat(slots.w_qkv);
        lc.qkv.rowwise() += p.vec(slots.b_qkv);
        apply_rotary(lc.qkv, c, rt, seq, false);

        lc.probs.resize(rows * c.n_head * seq * seq);
        if (use_dropout) dropout_mask(lc.attn_keep, lc.probs.size(), c.dropout_p, *dropout_rng);
        else lc.attn_keep.clear();
        lc.att.resize(N, d);
        for (std::size_t r = 0; r < rows; ++r) {
            const auto r0 = static_cast<Eigen::Index>(r * seq);
            for (std::size_t h = 0; h < c.n_head; ++h) {
                const auto h0 = static_cast<Eigen::Index>(h) * hd;
                auto q = lc.qkv.block(r0, h0, S, hd);
                auto k = lc.qkv.block(r0, d + h0, S, hd);
                auto v = lc.qkv.block(r0, 2 * d + h0, S, hd);
                scores.noalias() = q * k.transpose();
                const auto base = (r * c.n_head + h) * seq * seq;
                MatMap<T> P(lc.probs.data() + base, S, S);
                for (Eigen::Index i = 0; i < S; ++i) {
                    const T mx = scores.row(i).head(i + 1).maxCoeff() * scale;
                    P.row(i).head(i + 1) = (scores.row(i).head(i + 1).array() * scale - mx).exp();
                    P.row(i).head(i + 1) /= P.row(i).head(i + 1).sum();
                    P.row(i).tail(S - i - 1).setZero();
                }
                if (use_dropout) {
                    Mat<T> Pd = P;
                    apply_mask(Pd, lc.attn_keep.data() + base);
                    lc.att.block(r0, h0, S, hd).noalias() = Pd * v;
                } else {
                    lc.att.block(r0, h0, S, hd).noalias() = P * v;
                }
            }
        }

        Mat<T> a(N, d);
        a.noalias() = lc.att * p.mat(slots.w_o);
        a.rowwise() += p.vec(slots.b_o);
        if (use_dropout) {
            dropout_mask(lc.resid1_keep, static_cast<std::size_t>(N * d), c.dropout_p, *dropout_rng);
            apply_mask(a, lc.resid1_keep.data());
        } else {
            lc.resid1_keep.clear();
        }
        lc.x_mid = lc.x_in + a;

        layernorm_forward(lc.x_mid, p.vec(slots.ln2_g), p.vec(slots.ln2_b), lc.xhat2, lc.rstd2, lc.h2);
        lc.f.resize(N, 4 * d);
        lc.f.noalias() = lc.h2 * p.mat(slots.w_fc);
        lc.f.rowwise() += p.vec(slots.b_fc);
        lc.g = gelu(lc.f);
        Mat<T> m(N, d);
        m.noalias() = lc.g * p.mat(slots.w_proj);
        m.rowwise() += p.vec(slots.b_proj);
        if (use_dropout) {
            dropout_mask(lc.resid2_keep, static_cast<std::size_t>(N * d), c.dropout_p, *dropout_rng);
            apply_mask(m, lc.resid2_keep.data());
        } else {
            lc.resid2_keep.clear();
        }
        x = lc.x_mid + m;
    }

    fc.x_final = std::move(x);
    layernorm_forward(fc.x_final, p.vec(L.lnf_g), p.vec(L.lnf_b), fc.xhatf, fc.rstdf, fc.hf);
    Mat<T> logits(N, static_cast<Eigen::Index>(c.vocab_size));
    logits.noalias() = fc.hf * p.mat(L.w_out);
    return logits;
}

// Row-wise log-softmax.
template <typename T>
Mat<T> log_softmax(const Mat<T>& logits) {
    Mat<T> out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const T mx = logits.row(i).maxCoeff();
        const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        out.row(i) = logits.row(i).array() - lse;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// mask[r * seq + i] selects the prediction of token i of row r from the
// prefix [0, i); mask at i = 0 is ignored.
struct Batch {
    std::vector<TokenId> tokens;
    std::size_t rows = 0;
    std::size_t seq = 0;
    std::vector<std::uint8_t> mask;
};

enum class LossKind { full, second_half };

inline std::vector<std::uint8_t> loss_mask(LossKind kind, std::size_t rows, std::size_t seq) {
    std::vector<std::uint8_t> mask(rows * seq, 0);
    std::size_t begin = 1;
    if (kind == LossKind::second_half) {
        if (!is_power_of_two(seq) || seq < 2)
            throw std::invalid_argument("second-half loss needs a window length of 2^m, got " + std::to_string(seq));
        begin = seq / 2;
    } else if (seq < 2) {
        throw std::invalid_argument("full loss needs seq_len >= 2");
    }
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = begin; i < seq; ++i) mask[r * seq + i] = 1;
    return mask;
}

inline Batch make_batch(std::vector<TokenId> tokens, std::size_t rows, std::size_t seq, LossKind kind) {
    if (tokens.size() != rows * seq) throw std::invalid_argument("make_batch: token count mismatch");
    return {std::move(tokens), rows, seq, loss_mask(kind, rows, seq)};
}

struct LossValue {
    double sum = 0.0;
    std::size_t count = 0;
    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

// Cross-entropy over masked positions. When dlogits is given it receives
// weight * d(mean loss)/d(logits).
template <typename T>
LossValue masked_cross_entropy(const Mat<T>& logits, std::span<const TokenId> tokens, std::size_t rows,
                               std::size_t seq, std::span<const std::uint8_t> mask, Mat<T>* dlogits = nullptr,
                               double weight = 1.0) {
    LossValue lv;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 1; i < seq; ++i) lv.count += mask[r * seq + i] != 0;
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
    if (lv.count == 0) return lv;
    const T g = static_cast<T>(weight / static_cast<double>(lv.count));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 1; i < seq; ++i) {
            if (!mask[r * seq + i]) continue;
            const auto n = static_cast<Eigen::Index>(r * seq + i - 1);
            const auto target = static_cast<Eigen::Index>(tokens[r * seq + i]);
            const T mx = logits.row(n).maxCoeff();
            const T sumexp = (logits.row(n).array() - mx).exp().sum();
            const T lse = mx + std::log(sumexp);
            lv.sum += static_cast<double>(lse - logits(n, target));
            if (dlogits) {
                dlogits->row(n) = (logits.row(n).array() - lse).exp() * g;
                (*dlogits)(n, target) -= g;
            }
        }
    return lv;
}

// Mean next-token cross-entropy over positions 1..seq-1.
template <typename T>
LossValue loss_full(const Mat<T>& logits, std::span<const TokenId> tokens, std::size_t rows, std::size_t seq) {
    const auto mask = loss_mask(LossKind::full, rows, seq);
    return masked_cross_entropy(logits, tokens, rows, seq, mask);
}

// Cross-entropy over positions [2^(m-1), 2^m) of windows of length 2^m.
template <typename T>
LossValue loss_second_half(const Mat<T>& logits, std::span<const TokenId> tokens, std::size_t rows, unsigned m) {
    const std::size_t seq = std::size_t{1} << m;
    if (tokens.size() != rows * seq || static_cast<std::size_t>(logits.rows()) != rows * seq)
        throw std::invalid_argument("loss_second_half: sequence length is not 2^" + std::to_string(m));
    const auto mask = loss_mask(LossKind::second_half, rows, seq);
    return masked_cross_entropy(logits, tokens, rows, seq, mask);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(params) into grad given d(loss)/d(logits).
template <typename T>
void backward(const Parameters<T>& p, const ForwardCache<T>& fc, std::span<const TokenId> tokens,
              const Mat<T>& dlogits, std::span<T> grad) {
    using namespace detail;
    const auto& c = p.config;
    const auto& L = p.layout;
    if (grad.size() != p.size()) throw std::invalid_argument("backward: gradient buffer size mismatch");
    GradView<T> G{L, grad.data()};

    const auto rows = fc.rows, seq = fc.seq;
    const auto N = static_cast<Eigen::Index>(rows * seq);
    const auto d = static_cast<Eigen::Index>(c.d_model);
    const auto hd = static_cast<Eigen::Index>(c.head_dim());
    const auto S = static_cast<Eigen::Index>(seq);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const RotaryTable rt(c, seq);

    G.mat(L.w_out).noalias() += fc.hf.transpose() * dlogits;
    Mat<T> dhf(N, d);
    dhf.noalias() = dlogits * p.mat(L.w_out).transpose();
    Mat<T> dx = Mat<T>::Zero(N, d);
    layernorm_backward(dhf, fc.xhatf, fc.rstdf, p.vec(L.lnf_g), dx, G.vec(L.lnf_g), G.vec(L.lnf_b));

    Mat<T> dP(S, S), dS(S, S);
    for (std::size_t li = c.n_layer; li-- > 0;) {
        const auto& slots = L.layers[li];
        const auto& lc = fc.layers[li];

        // MLP branch: x_out = x_mid + drop(g W_proj + b_proj)
        Mat<T> dm = dx;
        if (fc.dropout) apply_mask(dm, lc.resid2_keep.data());
        G.mat(slots.w_proj).noalias() += lc.g.transpose() * dm;
        G.vec(slots.b_proj) += dm.colwise().sum();
        Mat<T> df(N, 4 * d);
        df.noalias() = dm * p.mat(slots.w_proj).transpose();
        df.array() *= gelu_grad(lc.f).array();
        G.mat(slots.w_fc).noalias() += lc.h2.transpose() * df;
        G.vec(slots.b_fc) += df.colwise().sum();
        Mat<T> dh2(N, d);
        dh2.noalias() = df * p.mat(slots.w_fc).transpose();
        layernorm_backward(dh2, lc.xhat2, lc.rstd2, p.vec(slots.ln2_g), dx, G.vec(slots.ln2_g), G.vec(slots.ln2_b));

        // Attention branch: x_mid = x_in + drop(att W_o + b_o)
        Mat<T> da = dx;
        if (fc.dropout) apply_mask(da, lc.resid1_keep.data());
        G.mat(slots.w_o).noalias() += lc.att.transpose() * da;
        G.vec(slots.b_o) += da.colwise().sum();
        Mat<T> datt(N, d);
        datt.noalias() = da * p.mat(slots.w_o).transpose();

        Mat<T> dqkv(N, 3 * d);
        for (std::size_t r = 0; r < rows; ++r) {
            const auto r0 = static_cast<Eigen::Index>(r * seq);
            for (std::size_t h = 0; h < c.n_head; ++h) {
                const auto h0 = static_cast<Eigen::Index>(h) * hd;
                auto q = lc.qkv.block(r0, h0, S, hd);
                auto k = lc.qkv.block(r0, d + h0, S, hd);
                auto v = lc.qkv.block(r0, 2 * d + h0, S, hd);
                auto dy = datt.block(r0, h0, S, hd);
                const auto base = (r * c.n_head + h) * seq * seq;
                ConstMatMap<T> P(lc.probs.data() + base, S, S);

                if (fc.dropout) {
                    Mat<T> Pd = P;
                    apply_mask(Pd, lc.attn_keep.data() + base);
                    dqkv.block(r0, 2 * d + h0, S, hd).noalias() = Pd.transpose() * dy;
                    dP.noalias() = dy * v.transpose();
                    apply_mask(dP, lc.attn_keep.data() + base);
                } else {
                    dqkv.block(r0, 2 * d + h0, S, hd).noalias() = P.transpose() * dy;
                    dP.noalias() = dy * v.transpose();
                }
                for (Eigen::Index i = 0; i < S; ++i) {
                    const T dot = P.row(i).head(i + 1).dot(dP.row(i).head(i + 1));
                    dS.row(i).head(i + 1) =
                        P.row(i).head(i + 1).array() * (dP.row(i).head(i + 1).array() - dot) * scale;
                    dS.row(i).tail(S - i - 1).setZero();
                }
                dqkv.block(r0, h0, S, hd).noalias() = dS * k;
                dqkv.block(r0, d + h0, S, hd).noalias() = dS.transpose() * q;
            }
        }
        apply_rotary(dqkv, c, rt, seq, true);
        G.mat(slots.w_qkv).noalias() += lc.h1.transpose() * dqkv;
        G.vec(slots.b_qkv) += dqkv.colwise().sum();
        Mat<T> dh1(N, d);
        dh1.noalias() = dqkv * p.mat(slots.w_qkv).transpose();
        layernorm_backward(dh1, lc.xhat1, lc.rstd1, p.vec(slots.ln1_g), dx, G.vec(slots.ln1_g), G.vec(slots.ln1_b));
    }

    auto demb = G.mat(L.tok_emb);
    for (Eigen::Index n = 0; n < N; ++n) demb.row(static_cast<Eigen::Index>(tokens[static_cast<std::size_t>(n)])) += dx.row(n);
}

// Forward + masked loss + backward. Accumulates weight * gradient of the mean
// masked loss into grad and returns the loss.
template <typename T>
LossValue loss_and_grad(const Parameters<T>& p, const Batch& b, std::span<T> grad, double weight = 1.0,
                        Rng* dropout_rng = nullptr) {
    ForwardCache<T> cache;
    const auto logits = forward(p, b.tokens, b.rows, b.seq, &cache, dropout_rng);
    Mat<T> dlogits;
    const auto lv = masked_cross_entropy(logits, b.tokens, b.rows, b.seq, b.mask, &dlogits, weight);
    if (!std::isfinite(lv.sum)) throw std::runtime_error("non-finite loss");
    if (lv.count > 0) backward(p, cache, b.tokens, dlogits, grad);
    return lv;
}

// Gradient of the mean masked loss of one batch with respect to every
// parameter. Dropout is disabled.
template <typename T>
AlignedVec<T> gradients(const Parameters<T>& p, const Batch& b) {
    AlignedVec<T> grad(p.size(), T(0));
    loss_and_grad(p, b, std::span<T>(grad));
    return grad;
}

// Mean masked loss without gradients (dropout disabled).
template <typename T>
LossValue batch_loss(const Parameters<T>& p, const Batch& b) {
    const auto logits = forward(p, b.tokens, b.rows, b.seq);
    return masked_cross_entropy(logits, b.tokens, b.rows, b.seq, b.mask);
}

// Unweighted mean over levels of the per-level mean second-half losses. Each
// batch must hold windows of length 2^m for its level.
template <typename T>
double cascade_loss(const Parameters<T>& p, std::span<const Batch> levels, std::span<T> grad = {},
                    Rng* dropout_rng = nullptr) {
    if (levels.empty()) throw std::invalid_argument("cascade_loss: no levels");
    const double w = 1.0 / static_cast<double>(levels.size());
    double total = 0.0;
    for (const auto& b : levels) {
        if (grad.empty()) total += batch_loss(p, b).mean();
        else total += loss_and_grad(p, b, grad, w, dropout_rng).mean();
    }
    return total * w;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "CSCD" | u32 version | u32 config length | config JSON |
//   per tensor, in the order listed under "tensors" in the config:
//   u32 name length | name | u32 rank | u32 dims[rank] | f32 values (LE)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t checkpoint_version = 1;

template <typename T>
std::string encode_checkpoint(const Parameters<T>& p) {
    json cfg = p.config;
    json names = json::array();
    for (const auto& t : p.layout.tensors) names.push_back(t.name);
    cfg["tensors"] = names;
    const auto cfg_text = cfg.dump();

    std::string out = "CSCD";
    auto put_u32 = [&](std::uint32_t v) {
        const auto le = io::to_le(v);
        out.append(reinterpret_cast<const char*>(&le), 4);
    };
    put_u32(checkpoint_version);
    put_u32(static_cast<std::uint32_t>(cfg_text.size()));
    out += cfg_text;
    for (const auto& t : p.layout.tensors) {
        put_u32(static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put_u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto dim : t.shape) put_u32(static_cast<std::uint32_t>(dim));
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float f = static_cast<float>(p.data[t.offset + i]);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(bits);
        }
    }
    return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Parameters<T>& p) {
    io::write_atomic(path, encode_checkpoint(p));
}

template <typename T = float>
Parameters<T> load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = io::read_bytes(path);
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size()) throw DataError(path.string() + ": truncated checkpoint");
    };
    auto get_u32 = [&]() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return io::to_le(v);
    };
    need(4);
    if (std::string_view(bytes.data(), 4) != "CSCD") throw DataError(path.string() + ": not a checkpoint");
    pos = 4;
    const auto version = get_u32();
    if (version != checkpoint_version)
        throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const auto cfg_len = get_u32();
    need(cfg_len);
    const auto cfg = json::parse(std::string_view(bytes.data() + pos, cfg_len));
    pos += cfg_len;
    const auto config = cfg.get<ModelConfig>();
    config.validate();
    Parameters<T> p(config);
    const auto names = cfg.at("tensors").get<std::vector<std::string>>();
    if (names.size() != p.layout.tensors.size()) throw DataError(path.string() + ": tensor list mismatch");
    for (std::size_t ti = 0; ti < names.size(); ++ti) {
        const auto& t = p.layout.tensors[ti];
        const auto name_len = get_u32();
        need(name_len);
        const std::string name(bytes.data() + pos, name_len);
        pos += name_len;
        if (name != t.name || name != names[ti])
            throw DataError(path.string() + ": expected tensor '" + t.name + "', found '" + name + "'");
        const auto rank = get_u32();
        if (rank != t.shape.size()) throw DataError(path.string() + ": rank mismatch for " + name);
        for (std::size_t k = 0; k < rank; ++k)
            if (get_u32() != t.shape[k]) throw DataError(path.string() + ": shape mismatch for " + name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const auto bits = get_u32();
            float f;
            std::memcpy(&f, &bits, 4);
            p.data[t.offset + i] = static_cast<T>(f);
        }
    }
    if (pos != bytes.size()) throw DataError(path.string() + ": trailing bytes in checkpoint");
    return p;
}

}  // namespace cascade
