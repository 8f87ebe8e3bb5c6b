#include <cascade/ensemble.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace cascade;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.n_layer = 1;
    c.n_head = 2;
    c.d_model = 16;
    c.rotary_dim = 4;
    c.vocab_size = 12;
    c.max_seq_len = 32;
    c.dropout_p = 0.0;
    return c;
}

// Larger init so that the levels disagree visibly.
Parameters<double> noisy_params(std::uint64_t seed) {
    auto p = init_params<double>(small_model(), seed);
    Rng rng(seed + 1000);
    for (auto& v : p.data) v += 0.3 * rng.normal();
    return p;
}

std::vector<TokenId> tokens(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenId> t(n);
    for (auto& x : t) x = static_cast<TokenId>(rng.below(12));
    return t;
}

std::vector<double> log_normalize(std::vector<double> v) {
    double mx = *std::max_element(v.begin(), v.end()), z = 0;
    for (double x : v) z += std::exp(x - mx);
    for (double& x : v) x -= mx + std::log(z);
    return v;
}

}  // namespace

TEST(EnsembleWeights, WorkedValues) {
    const std::vector<double> c{-1.0, -3.0};
    auto w = ensemble_weights(c);
    EXPECT_NEAR(w[0], 0.75, 1e-9);
    EXPECT_NEAR(w[1], 0.25, 1e-9);
    EXPECT_THROW(ensemble_weights(std::vector<double>{}), std::invalid_argument);
    // A fully confident level (c = 0) takes essentially all weight.
    auto z = ensemble_weights(std::vector<double>{0.0, -0.5});
    EXPECT_GT(z[0], 1 - 1e-6);
}

TEST(EnsembleWeights, SumToOneAndMonotone) {
    Rng rng(1);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> c(2 + rng.below(6));
        for (auto& x : c) x = -std::exp(3 * rng.normal());
        auto w = ensemble_weights(c);
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
        for (std::size_t i = 0; i < c.size(); ++i)
            for (std::size_t j = 0; j < c.size(); ++j)
                if (c[i] > c[j]) {
                    EXPECT_GE(w[i], w[j]);
                }
    }
}

TEST(EnsembleWeights, EqualsSoftmaxOfNegLogNegC) {
    Rng rng(2);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> c(4);
        for (auto& x : c) x = -0.01 - 5 * rng.uniform();
        auto w = ensemble_weights(c, 0.0);
        std::vector<double> s(c.size());
        double z = 0;
        for (std::size_t i = 0; i < c.size(); ++i) z += s[i] = std::exp(-std::log(-c[i]));
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(w[i], s[i] / z, 1e-12);
    }
}

TEST(CombineLevels, SingleLevelIsIdentity) {
    auto lp = log_normalize({0.1, 2.0, -1.0, 0.5});
    auto mix = combine_levels({lp});
    ASSERT_EQ(mix.weights.size(), 1u);
    EXPECT_DOUBLE_EQ(mix.weights[0], 1.0);
    for (std::size_t x = 0; x < lp.size(); ++x) EXPECT_NEAR(mix.logprob[x], lp[x], 1e-12);
}

TEST(CombineLevels, IdenticalLevelsIdempotent) {
    auto lp = log_normalize({0.3, -2.0, 1.0});
    auto mix = combine_levels({lp, lp, lp});
    for (std::size_t x = 0; x < lp.size(); ++x) EXPECT_NEAR(mix.logprob[x], lp[x], 1e-12);
    for (double w : mix.weights) EXPECT_NEAR(w, 1.0 / 3, 1e-12);
}

TEST(CombineLevels, NormalizedAndHandComputed) {
    auto a = log_normalize({3.0, 0.0, 0.0});
    auto b = log_normalize({0.0, 0.5, 0.0});
    auto mix = combine_levels({a, b});
    double z = 0;
    for (double v : mix.logprob) z += std::exp(v);
    EXPECT_NEAR(z, 1.0, 1e-12);
    const double ca = a[0], cb = b[1];
    const double wa = (1 / -ca) / (1 / -ca + 1 / -cb);
    EXPECT_NEAR(mix.weights[0], wa, 1e-6);
    std::vector<double> want(3);
    for (int x = 0; x < 3; ++x) want[x] = wa * a[x] + (1 - wa) * b[x];
    want = log_normalize(want);
    for (int x = 0; x < 3; ++x) EXPECT_NEAR(mix.logprob[x], want[x], 1e-6);
    EXPECT_THROW(combine_levels({a, {0.0}}), std::invalid_argument);
}

TEST(CombineLevels, AgreedArgmaxSurvives) {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        const std::size_t V = 8, top = rng.below(V);
        std::vector<std::vector<double>> levels;
        for (int k = 0; k < 3; ++k) {
            std::vector<double> v(V);
            for (auto& x : v) x = rng.normal();
            v[top] = *std::max_element(v.begin(), v.end()) + 0.1 + rng.uniform();
            levels.push_back(log_normalize(v));
        }
        auto mix = combine_levels(levels);
        EXPECT_EQ(std::size_t(std::max_element(mix.logprob.begin(), mix.logprob.end()) - mix.logprob.begin()), top);
    }
}

TEST(Chunked, ContextStart) {
    EXPECT_EQ(chunk_context_start(1, 3), 0u);
    EXPECT_EQ(chunk_context_start(4, 3), 0u);
    EXPECT_EQ(chunk_context_start(7, 3), 0u);
    EXPECT_EQ(chunk_context_start(8, 3), 4u);
    EXPECT_EQ(chunk_context_start(13, 4), 0u);
    EXPECT_EQ(chunk_context_start(16, 4), 8u);
}

TEST(Chunked, MatchesNaive) {
    const CascadeSpec spec{3, 5};
    auto bank = ModelBank<double>::compressed(noisy_params(5), spec);
    auto s = tokens(32, 9);
    auto chunked = eval_logprob_chunked(bank, s, 32);
    auto naive = eval_logprob_chunked(bank, s, 32, true);
    double worst = 0;
    for (std::size_t k = 0; k < chunked.levels.size(); ++k)
        for (std::size_t j = 1; j < 32; ++j)
            for (std::size_t x = 0; x < 12; ++x)
                worst = std::max(worst, std::abs(chunked.level_logprobs[k][j][x] - naive.level_logprobs[k][j][x]));
    EXPECT_LT(worst, 1e-6);
    for (std::size_t j = 1; j < 32; ++j) EXPECT_NEAR(chunked.token_logprob[j], naive.token_logprob[j], 1e-6);
    EXPECT_THROW(eval_logprob_chunked(bank, s, 64), std::invalid_argument);
    EXPECT_THROW(chunked_level_logprobs(bank.at(5), std::span<const TokenId>(s).subspan(0, 12), 5),
                 std::invalid_argument);
}

TEST(Chunked, SingleLevelEqualsModelSoftmax) {
    // One level of width L_blk: chunking feeds the whole block once.
    const CascadeSpec spec{6, 6};
    auto cfg = small_model();
    cfg.max_seq_len = 64;
    auto p = init_params<double>(cfg, 4);
    auto bank = ModelBank<double>::compressed(p, spec);
    auto s = tokens(32, 10);
    auto scores = eval_logprob_chunked(bank, s);
    auto direct = single_model_token_logprobs(p, s);
    for (std::size_t j = 1; j < s.size(); ++j) {
        EXPECT_NEAR(scores.token_logprob[j], direct[j], 1e-9);
        EXPECT_DOUBLE_EQ(scores.weights[j][0], 1.0);
    }
}

TEST(NextDistribution, SumsToOne) {
    const CascadeSpec spec{3, 5};
    ModelBank<double> bank;
    bank.kind = ModelBank<double>::Kind::original;
    bank.spec = spec;
    for (int k = 0; k < 3; ++k) bank.models.push_back(noisy_params(20 + k));
    bank.validate();
    auto s = tokens(11, 11);
    auto d = next_distribution(bank, s);
    EXPECT_NEAR(std::accumulate(d.probs.begin(), d.probs.end(), 0.0), 1.0, 1e-12);
    EXPECT_NEAR(std::accumulate(d.weights.begin(), d.weights.end(), 0.0), 1.0, 1e-12);
    EXPECT_THROW(next_distribution(bank, std::span<const TokenId>{}), std::invalid_argument);
    EXPECT_THROW(bank.at(6), std::out_of_range);
}

TEST(WeightTrace, RowsSumToOneAndCsv) {
    const CascadeSpec spec{3, 5};
    auto bank = ModelBank<double>::compressed(noisy_params(6), spec);
    auto s = tokens(32, 12);
    auto trace = weight_trace(bank, s);
    ASSERT_EQ(trace.size(), 31u);
    for (const auto& row : trace) {
        ASSERT_EQ(row.size(), 3u);
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
    }
    std::ostringstream os;
    append_weight_trace_csv(os, 7, eval_logprob_chunked(bank, s));
    const auto csv = os.str();
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 31 * 3);
    EXPECT_EQ(csv.substr(0, 6), "7,1,3,");
}

TEST(LoadBank, OriginalAndCompressed) {
    testutil::TempDir dir("bank");
    const CascadeSpec spec{3, 4};
    auto cfg = small_model();
    save_checkpoint(dir / "c" / "model.ckpt", init_params<float>(cfg, 1));
    auto c = load_bank(dir / "c", spec);
    EXPECT_EQ(c.kind, ModelBank<float>::Kind::compressed);
    EXPECT_EQ(&c.at(3), &c.at(4));

    save_checkpoint(dir / "o" / "model_m3.ckpt", init_params<float>(cfg, 1));
    save_checkpoint(dir / "o" / "model_m4.ckpt", init_params<float>(cfg, 2));
    auto o = load_bank(dir / "o", spec);
    EXPECT_EQ(o.kind, ModelBank<float>::Kind::original);
    EXPECT_EQ(o.models.size(), 2u);
    EXPECT_FALSE(o.at(3).data == o.at(4).data);

    std::filesystem::remove(dir / "o" / "model_m4.ckpt");
    EXPECT_THROW(load_bank(dir / "o", spec), DataError);
}
