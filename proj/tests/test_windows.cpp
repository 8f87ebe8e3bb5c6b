#include <cascade/windows.hpp>

#include <gtest/gtest.h>

using namespace cascade;

TEST(ChunkOffsets, Enumeration) {
    auto g = chunk_offsets(32, 3);
    EXPECT_EQ(g.offsets(), (std::vector<std::size_t>{0, 4, 8, 12, 16, 20, 24}));
    EXPECT_EQ(g.length, 8u);
    EXPECT_EQ(chunk_offsets(8, 3).count, 1u);
    EXPECT_THROW(chunk_offsets(7, 3), std::invalid_argument);
}

TEST(ChunkOffsets, CountOnBlockMultiples) {
    for (std::size_t blocks : {1u, 2u, 7u, 32u})
        for (unsigned m = 3; m <= 6; ++m) {
            const std::size_t n = blocks * 64;
            auto g = chunk_offsets(n, m);
            EXPECT_EQ(g.count, n / half_len(m) - 1);
            // Every window inside the data; neighbours overlap by 2^(m-1).
            EXPECT_LE(g.offset(g.count - 1) + g.length, n);
            if (g.count > 1) {
                EXPECT_EQ(g.offset(0) + g.length - g.offset(1), half_len(m));
            }
        }
}

TEST(ChunkOffsets, NonOverlappingStride) {
    auto g = chunk_offsets(64, 4, 16);
    EXPECT_EQ(g.offsets(), (std::vector<std::size_t>{0, 16, 32, 48}));
}

TEST(CascadeSpec, FromBlockLength) {
    auto s = CascadeSpec::for_block_len(64);
    EXPECT_EQ(s.m_min, 3u);
    EXPECT_EQ(s.m_max, 6u);
    EXPECT_EQ(s.levels(), 4u);
    EXPECT_EQ(s.context_len(), 64u);
    EXPECT_THROW(CascadeSpec::for_block_len(48), ConfigError);
    EXPECT_THROW(CascadeSpec::for_block_len(4), ConfigError);
    EXPECT_THROW((CascadeSpec{2, 6}).validate(), ConfigError);
}

TEST(MaxClaimedLevel, Values) {
    EXPECT_EQ(max_claimed_level(1), 0u);
    EXPECT_EQ(max_claimed_level(2), 1u);
    EXPECT_EQ(max_claimed_level(8), 3u);   // 1 + floor(log2 7)
    EXPECT_EQ(max_claimed_level(9), 4u);
    EXPECT_EQ(max_claimed_level(10), 4u);
    EXPECT_EQ(max_claimed_level(33), 6u);
}

TEST(CaptureCheck, WorkedExample) {
    // p = 13, L = 10 at m = 4: window 1 = [8, 24), midpoint 16 in (13, 22].
    std::vector<KnowledgeSpan> spans{{13, 10}};
    auto r = capture_check(spans, 64, CascadeSpec{3, 6});
    ASSERT_EQ(r.verdicts.size(), 2u);  // m = 3, 4
    const auto& v4 = r.verdicts[1];
    EXPECT_EQ(v4.m, 4u);
    EXPECT_TRUE(v4.captured);
    EXPECT_EQ(v4.window, 1);
    EXPECT_EQ(v4.solutions, 1u);
    EXPECT_TRUE(r.ok());
}

TEST(CaptureCheck, ShortPieceSkipsHighLevels) {
    std::vector<KnowledgeSpan> spans{{5, 8}};
    auto r = capture_check(spans, 64, CascadeSpec{3, 6});
    ASSERT_EQ(r.verdicts.size(), 1u);
    EXPECT_EQ(r.verdicts[0].m, 3u);
}

TEST(CaptureCheck, StartOfDataset) {
    std::vector<KnowledgeSpan> spans{{0, 32}};
    auto r = capture_check(spans, 64, CascadeSpec{3, 6});
    EXPECT_EQ(r.verdicts.size(), 3u);
    for (const auto& v : r.verdicts) {
        EXPECT_TRUE(v.captured);
        EXPECT_EQ(v.window, 0);
    }
}

TEST(CaptureCheck, ReportsViolationsAsData) {
    // A piece hanging off the end: its window runs past the data.
    std::vector<KnowledgeSpan> spans{{60, 10}};
    auto r = capture_check(spans, 64, CascadeSpec{3, 6});
    EXPECT_GT(r.violations(), 0u);
    auto j = capture_report_to_json(r, spans);
    EXPECT_EQ(j["n_violations"], r.violations());
    EXPECT_FALSE(j["violations"].empty());
}

TEST(CaptureCheck, RandomizedSoundnessAndUniqueness) {
    Rng rng(123);
    const std::size_t L_blk = 64;
    const CascadeSpec spec{3, 6};
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t blocks = 1 + rng.below(40);
        std::vector<KnowledgeSpan> spans;
        for (std::size_t b = 0; b < blocks; ++b) {
            const std::size_t L = rng.between(2, 32);
            spans.push_back({b * L_blk + rng.below(L_blk - L + 1), L});
        }
        auto r = capture_check(spans, blocks * L_blk, spec);
        ASSERT_TRUE(r.ok());
        for (const auto& v : r.verdicts) {
            EXPECT_EQ(v.window, static_cast<std::int64_t>(spans[v.injection].position / half_len(v.m)));
            EXPECT_EQ(v.solutions, 1u);
            EXPECT_TRUE(v.starts_before);
        }
    }
}

TEST(BatchPlan, Formula) {
    auto p = batch_plan(1024, CascadeSpec{3, 10});
    EXPECT_EQ(p.batch.at(10), 2048u);
    EXPECT_EQ(p.batch.at(3), 2u * 1024 * 1024 / 8);
    auto q = batch_plan(4, CascadeSpec{3, 6});
    EXPECT_EQ(q.batch.at(3), 64u);
    EXPECT_EQ(q.batch.at(6), 8u);
    EXPECT_THROW(batch_plan(0, CascadeSpec{3, 6}), std::invalid_argument);
}

TEST(BatchPlan, EqualStepsOnFullTraversal) {
    // |D_m| = n / 2^(m-1) - 1, so with n = 64 * 2^k blocks floor division gives
    // equal step counts once the -1 is absorbed.
    auto p = batch_plan(2, CascadeSpec{3, 6}, 64 * 256);
    for (const auto& [m, n] : p.windows) EXPECT_EQ(n, 64u * 256 / half_len(m) - 1);
    EXPECT_TRUE(p.warnings.empty());
    std::set<std::size_t> steps;
    for (const auto& [m, s] : p.steps_per_epoch) steps.insert(s);
    EXPECT_LE(*steps.rbegin() - *steps.begin(), 1u);
}

TEST(BatchPlan, CapsOnTinyDatasets) {
    auto p = batch_plan(16, CascadeSpec{3, 6}, 128);
    EXPECT_FALSE(p.warnings.empty());
    for (const auto& [m, b] : p.batch) EXPECT_LE(b, p.windows.at(m));
}

TEST(CostAudit, LevelsThreeToTenArithmetic) {
    auto c = cost_audit(batch_plan(1, CascadeSpec{3, 10}));
    EXPECT_EQ(c.proxy, 4177920u);
    EXPECT_EQ(c.bound, 4194304u);
    EXPECT_TRUE(c.within_bound());
}

TEST(CostAudit, SingleLevelAndMonotone) {
    auto one = cost_audit(batch_plan(3, CascadeSpec{6, 6}));
    EXPECT_EQ(one.proxy, 2u * 3 * 64 * 64);
    std::uint64_t prev = 0;
    for (unsigned M = 3; M <= 12; ++M) {
        auto c = cost_audit(batch_plan(1, CascadeSpec{3, M}));
        EXPECT_GT(c.proxy, prev);
        prev = c.proxy;
    }
}

TEST(CostAudit, BoundHoldsExactly) {
    for (unsigned M = 3; M <= 12; ++M)
        for (unsigned lo = 3; lo <= M; ++lo)
            for (std::size_t B : {1u, 4u, 1024u}) EXPECT_TRUE(cost_audit(batch_plan(B, CascadeSpec{lo, M})).within_bound());
}
