#include <cascade/metrics.hpp>

#include <gtest/gtest.h>

using namespace cascade;

namespace {

EvalEntry entry(std::string fmt, std::string knw, bool holdout, std::size_t n = 64, std::size_t L = 10,
                std::size_t q = 2) {
    EvalEntry e;
    e.tokens.assign(n, 1);
    e.knowledge_len = L;
    e.query_len = q;
    e.format_mode = std::move(fmt);
    e.knowledge_mode = std::move(knw);
    e.holdout = holdout;
    return e;
}

EvalResult result(std::string fmt, std::string knw, bool holdout, double v) {
    return EvalResult{std::move(fmt), std::move(knw), 0, holdout, v, 1};
}

std::vector<double> log_grid(double lo, double hi, int n) {
    std::vector<double> r(n);
    for (int i = 0; i < n; ++i) r[i] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1));
    return r;
}

}  // namespace

TEST(NormalizedLogprob, UniformAndPerfectScorers) {
    auto e = entry("A", "A", false);
    std::vector<double> uniform(64, -std::log(128.0));
    auto r = normalized_logprob(uniform, e);
    EXPECT_NEAR(r.value, -std::log(128.0), 1e-12);
    EXPECT_EQ(r.n_scored, 8u);
    std::vector<double> perfect(64, -5.0);
    for (std::size_t j = e.scored_begin(); j < 64; ++j) perfect[j] = 0.0;
    EXPECT_DOUBLE_EQ(normalized_logprob(perfect, e).value, 0.0);
}

TEST(NormalizedLogprob, ScoresOnlyTheCompletion) {
    auto e = entry("A", "B", true, 64, 10, 3);
    EXPECT_EQ(e.scored_begin(), 57u);
    std::vector<double> lp(64, -100.0);
    for (std::size_t j = 57; j < 64; ++j) lp[j] = -double(j - 56);
    auto r = normalized_logprob(lp, e);
    EXPECT_NEAR(r.value, -4.0, 1e-12);  // mean of 1..7
    EXPECT_TRUE(r.cross_mode());
    EXPECT_TRUE(r.holdout);
}

TEST(NormalizedLogprob, Errors) {
    std::vector<double> lp(64, -1.0);
    EXPECT_THROW(normalized_logprob(lp, entry("A", "A", false, 64, 2, 2)), std::invalid_argument);
    EXPECT_THROW(normalized_logprob(lp, entry("A", "A", false, 64, 80, 2)), std::invalid_argument);
    EXPECT_THROW(normalized_logprob(std::vector<double>(10, -1.0), entry("A", "A", false)), std::invalid_argument);
}

TEST(Aggregate, SameModeAllCrossModeHoldoutOnly) {
    std::vector<EvalResult> rs{
        result("A", "A", false, -1.0), result("A", "A", true, -3.0),  // same mode: both count
        result("A", "B", false, -9.0), result("A", "B", true, -2.0), result("A", "B", true, -4.0),
        result("B", "B", false, -0.5), result("B", "A", true, -6.0),
    };
    auto t = aggregate(rs);
    ASSERT_EQ(t.size(), 4u);
    const auto& aa = t.at({"A", "A"});
    const auto& ab = t.at({"A", "B"});
    EXPECT_DOUBLE_EQ(aa.mean, -2.0);
    EXPECT_EQ(aa.count, 2u);
    EXPECT_FALSE(aa.holdout_only);
    EXPECT_DOUBLE_EQ(ab.mean, -3.0);
    EXPECT_EQ(ab.count, 2u);
    EXPECT_TRUE(ab.holdout_only);
    EXPECT_DOUBLE_EQ(ab.min, -4.0);
    EXPECT_DOUBLE_EQ(ab.max, -2.0);
    EXPECT_THROW(aggregate({}), std::invalid_argument);
    EXPECT_EQ(cells_to_json(t).size(), 4u);
}

TEST(Aggregate, NineCellsAndConservation) {
    const std::vector<std::string> modes{"A", "B", "C"};
    Rng rng(8);
    std::vector<EvalResult> rs;
    for (int i = 0; i < 600; ++i) {
        const auto& f = modes[rng.below(3)];
        const auto& k = modes[rng.below(3)];
        rs.push_back(result(f, k, rng.below(2) == 1, -5 * rng.uniform()));
    }
    auto t = aggregate(rs);
    EXPECT_EQ(t.size(), 9u);
    // Weighted cell means add back up to the sum over counted entries.
    double counted = 0, n = 0;
    for (const auto& r : rs)
        if (!r.cross_mode() || r.holdout) {
            counted += r.value;
            ++n;
        }
    double from_cells = 0, cells_n = 0;
    for (const auto& [k, c] : t) {
        from_cells += c.mean * c.count;
        cells_n += c.count;
    }
    EXPECT_NEAR(from_cells, counted, 1e-9);
    EXPECT_EQ(cells_n, n);
}

TEST(SweepCsv, RoundTrip) {
    std::vector<RatioPoint> pts;
    for (std::size_t nx : {0u, 8u, 32u})
        for (std::uint64_t seed : {42u, 7u})
            for (auto [f, k] : {std::pair{"A", "A"}, {"A", "B"}, {"B", "A"}, {"B", "B"}}) {
                RatioPoint p;
                p.n_occ_x = nx;
                p.r = occurrence_ratio(32, nx);
                p.seed = seed;
                p.cell.format_mode = f;
                p.cell.knowledge_mode = k;
                p.cell.holdout_only = std::string(f) != k;
                p.cell.mean = -1.0 / (1 + nx + seed);
                p.cell.count = 10 + nx;
                pts.push_back(p);
            }
    std::string csv = sweep_csv_header;
    for (const auto& p : pts) csv += sweep_csv_row(p);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2 * 4);
    auto back = parse_sweep_csv(csv);
    ASSERT_EQ(back.size(), pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_EQ(back[i].n_occ_x, pts[i].n_occ_x);
        EXPECT_EQ(back[i].r, pts[i].r);
        EXPECT_EQ(back[i].cell.format_mode, pts[i].cell.format_mode);
        EXPECT_EQ(back[i].cell.holdout_only, pts[i].cell.holdout_only);
        EXPECT_NEAR(back[i].cell.mean, pts[i].cell.mean, 1e-12);
        EXPECT_EQ(sweep_csv_row(back[i]), sweep_csv_row(pts[i]));
    }
    EXPECT_TRUE(std::isinf(back[0].r));
    EXPECT_THROW(parse_sweep_csv("bad\n"), DataError);
    EXPECT_THROW(parse_sweep_csv(std::string(sweep_csv_header) + "1,2,3\n"), DataError);
    EXPECT_THROW(parse_sweep_csv(std::string(sweep_csv_header) + "x,1,1,A,A,0,1,1\n"), DataError);
}

TEST(Sigmoid, Stable) {
    EXPECT_DOUBLE_EQ(sigmoid(0), 0.5);
    EXPECT_GT(sigmoid(-800), -1e-300);
    EXPECT_EQ(sigmoid(800), 1.0);
    EXPECT_NEAR(sigmoid(2) + sigmoid(-2), 1.0, 1e-15);
}

TEST(FitSigmoid, RecoversNoiselessParameters) {
    const auto r = log_grid(0.1, 100, 12);
    for (auto [a, b, c] : {std::tuple{-2.0, -1.5, 0.5}, {-0.8, 1.0, 1.2}, {-3.0, -0.7, 2.0}}) {
        SigmoidFit truth{a, b, c};
        std::vector<double> y;
        for (double x : r) y.push_back(truth(x));
        auto f = fit_sigmoid(r, y);
        EXPECT_NEAR(f.a, a, 1e-3);
        EXPECT_NEAR(f.b, b, 1e-3);
        EXPECT_NEAR(f.c, c, 1e-3);
        EXPECT_LT(f.sse, 1e-12);
        EXPECT_LE(f.sse, f.initial_sse);
        EXPECT_FALSE(f.degenerate);
        EXPECT_NEAR(f(std::exp(f.c)), f.a / 2, 1e-12);
    }
}

TEST(FitSigmoid, NoisyRecovery) {
    const auto r = log_grid(0.1, 100, 12);
    Rng rng(17);
    SigmoidFit truth{-2.0, -1.5, 0.5};
    std::vector<double> y;
    for (double x : r) y.push_back(truth(x) + 0.02 * rng.normal());
    auto f = fit_sigmoid(r, y);
    EXPECT_NEAR(f.a, -2.0, 0.1);
    EXPECT_NEAR(f.b, -1.5, 0.3);
    EXPECT_NEAR(f.c, 0.5, 0.1);
    EXPECT_LE(f.sse, f.initial_sse);
}

TEST(FitSigmoid, ConstantDataFitsFlat) {
    const auto r = log_grid(0.5, 50, 8);
    std::vector<double> y(r.size(), -1.25);
    auto f = fit_sigmoid(r, y);
    EXPECT_LT(f.sse, 1e-10);
    for (double x : r) EXPECT_NEAR(f(x), -1.25, 1e-5);
}

TEST(FitSigmoid, SkipsInfiniteRatioAndValidates) {
    auto r = log_grid(0.5, 50, 6);
    std::vector<double> y{-1, -1.1, -1.5, -2, -2.2, -2.3};
    r.push_back(std::numeric_limits<double>::infinity());
    y.push_back(-100);
    auto f = fit_sigmoid(r, y);
    EXPECT_EQ(f.n_points, 6u);
    auto j = fit_to_json(f);
    EXPECT_EQ(j["n_points"], 6);
    EXPECT_THROW(fit_sigmoid(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}), std::invalid_argument);
    EXPECT_THROW(fit_sigmoid(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 2, 3}), std::invalid_argument);
    EXPECT_THROW(fit_sigmoid(std::vector<double>{2, 2, 2, 2}, std::vector<double>{1, 2, 3, 4}), std::invalid_argument);
    EXPECT_THROW(fit_sigmoid(std::vector<double>{-1, 2, 3, 4}, std::vector<double>{1, 2, 3, 4}), std::invalid_argument);
    EXPECT_THROW(fit_sigmoid(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, NAN, 3, 4}),
                 std::invalid_argument);
}

TEST(OccurrenceRatio, Values) {
    EXPECT_TRUE(std::isinf(occurrence_ratio(32, 0)));
    EXPECT_DOUBLE_EQ(occurrence_ratio(32, 128), 0.25);
    EXPECT_EQ(format_double(-std::numeric_limits<double>::infinity()), "-inf");
}
