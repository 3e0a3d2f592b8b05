#include <gtest/gtest.h>

#include <algorithm>

#include "parvts/oracle.hpp"
#include "parvts/scheduler.hpp"

using namespace parvts;

namespace {

struct Setup {
    Model model;
    std::vector<std::size_t> ids;
    SequenceLayout layout;
    Partition partition;
};

Setup make_setup(std::size_t layers, std::size_t dim, std::size_t visual, std::size_t keep, std::uint64_t seed = 13,
                 std::size_t system = 3, std::size_t question = 5) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_dim = dim;
    c.num_heads = dim / 8;
    c.mlp_dim = 2 * dim;
    c.vocab_size = 64;
    c.master_seed = seed;
    Setup s{build_model(c), {}, SequenceLayout::from_counts(system, visual, question), {}};
    Rng rng(derive_seed(seed, 500));
    for (std::size_t i = 0; i < s.layout.output_start; ++i) s.ids.push_back(rng.next_below(64));
    SaliencyScores sal;
    for (std::size_t i = 0; i < visual; ++i) sal.values.push_back(rng.next_unit());
    s.partition = partition_topk(sal, keep);
    return s;
}

ScheduleConfig schedule(Strategy s, std::size_t n, double alpha = 0.5, double beta = 0.5, std::size_t j = 1) {
    ScheduleConfig c;
    c.strategy = s;
    c.migration_depth = n;
    c.alpha = alpha;
    c.beta = beta;
    c.joint_prefix_layers = j;
    return c;
}

double max_abs(const Matrix& a, const Matrix& b) {
    EXPECT_EQ(a.rows(), b.rows());
    EXPECT_EQ(a.cols(), b.cols());
    double gap = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) gap = std::max(gap, std::abs(a.data()[i] - b.data()[i]));
    return gap;
}

PositionMap positions_of(const Setup& s, const std::vector<std::size_t>& visual_indices, bool with_text) {
    PositionMap out;
    if (with_text)
        for (std::size_t p = s.layout.system_span.begin; p < s.layout.system_span.end; ++p) out.push_back(p);
    for (std::size_t i : visual_indices) out.push_back(s.layout.visual_span.begin + i);
    if (with_text)
        for (std::size_t p = s.layout.question_span.begin; p < s.layout.question_span.end; ++p) out.push_back(p);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> ids_at(const Setup& s, const PositionMap& pos) {
    std::vector<std::size_t> out;
    for (std::size_t p : pos) out.push_back(s.ids[p]);
    return out;
}

Matrix rows_at(const Matrix& m, const PositionMap& have, const PositionMap& want) {
    std::vector<std::size_t> idx;
    for (std::size_t p : want) idx.push_back(static_cast<std::size_t>(std::find(have.begin(), have.end(), p) - have.begin()));
    return gather_rows(m, std::span<const std::size_t>(idx));
}

bool cache_equal(const KVCache& a, const KVCache& b) {
    if (a.num_layers() != b.num_layers()) return false;
    for (std::size_t l = 0; l < a.num_layers(); ++l) {
        if (a.layers[l].size() != b.layers[l].size()) return false;
        for (std::size_t i = 0; i < a.layers[l].size(); ++i) {
            const auto& x = a.layers[l][i];
            const auto& y = b.layers[l][i];
            if (x.position != y.position || x.key != y.key || x.value != y.value) return false;
        }
    }
    return true;
}

}  // namespace

TEST(FuseQuestionStates, EqualWeights) {
    EXPECT_EQ(fuse_question_states(Matrix{{2, 4}}, Matrix{{0, 0}}, 0.5, 0.5), (Matrix{{1, 2}}));
}

TEST(FuseQuestionStates, EqualInputsAreFixedPoint) {
    const Matrix t{{0.3, -1.7, 2.25}};
    for (double a : {0.0, 0.25, 0.5, 1.0}) {
        const Matrix out = fuse_question_states(t, t, a, 1.0 - a);
        for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out.data()[i], t.data()[i], 1e-15);
    }
}

TEST(FuseQuestionStates, EndpointsReturnOneInputExactly) {
    Rng rng(4);
    const Matrix a = seeded_uniform(rng, 3, 5, 1.0);
    const Matrix b = seeded_uniform(rng, 3, 5, 1.0);
    EXPECT_EQ(fuse_question_states(a, b, 1.0, 0.0), a);
    EXPECT_EQ(fuse_question_states(a, b, 0.0, 1.0), b);
}

TEST(FuseQuestionStates, LinearInInputs) {
    Rng rng(5);
    const Matrix a1 = seeded_uniform(rng, 2, 4, 1.0), a2 = seeded_uniform(rng, 2, 4, 1.0);
    const Matrix b1 = seeded_uniform(rng, 2, 4, 1.0), b2 = seeded_uniform(rng, 2, 4, 1.0);
    Matrix as(2, 4), bs(2, 4);
    for (std::size_t i = 0; i < 8; ++i) {
        as.data()[i] = a1.data()[i] + a2.data()[i];
        bs.data()[i] = b1.data()[i] + b2.data()[i];
    }
    const Matrix whole = fuse_question_states(as, bs, 0.3, 0.7);
    const Matrix p1 = fuse_question_states(a1, b1, 0.3, 0.7);
    const Matrix p2 = fuse_question_states(a2, b2, 0.3, 0.7);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(whole.data()[i], p1.data()[i] + p2.data()[i], 1e-14);
}

TEST(FuseQuestionStates, RejectsBadInputs) {
    EXPECT_THROW(fuse_question_states(Matrix(1, 2), Matrix(2, 2), 0.5, 0.5), std::invalid_argument);
    EXPECT_THROW(fuse_question_states(Matrix(1, 2), Matrix(1, 2), 0.5, 0.6), std::invalid_argument);
    EXPECT_THROW(fuse_question_states(Matrix(1, 2), Matrix(1, 2), -0.5, 1.5), std::invalid_argument);
}

TEST(PruneCache, EmptyDropIsIdentity) {
    const auto s = make_setup(2, 16, 4, 2);
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    EXPECT_TRUE(cache_equal(prune_cache(v.cache, std::vector<std::size_t>{}), v.cache));
}

TEST(PruneCache, DroppingVisualSpanRemovesExactlyThoseEntries) {
    const auto s = make_setup(3, 16, 6, 2);
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    PositionMap visual;
    for (std::size_t p = s.layout.visual_span.begin; p < s.layout.visual_span.end; ++p) visual.push_back(p);
    const KVCache pruned = prune_cache(v.cache, visual);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(pruned.entries(l), v.cache.entries(l) - 6);
        for (std::size_t p : visual) EXPECT_FALSE(pruned.contains(p));
        const auto pos = pruned.positions(l);
        EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
    }
}

TEST(PruneCache, UnknownPositionThrows) {
    const auto s = make_setup(2, 16, 4, 2);
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    EXPECT_THROW(prune_cache(v.cache, std::vector<std::size_t>{999}), std::invalid_argument);
}

TEST(PruneCache, DecodeMatchesMaskBlockedForward) {
    const auto s = make_setup(3, 16, 6, 2, 31);
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    const PositionMap dropped{s.layout.visual_span.begin + 1, s.layout.visual_span.begin + 4};
    KVCache pruned = prune_cache(v.cache, dropped);
    const std::size_t pos = s.layout.output_start;
    const Vector got = decode_step(s.model, pruned, 9, pos);

    // Same decode over the full cache with the dropped keys blocked.
    KVCache full = v.cache;
    Matrix x = embed(s.model, std::vector<std::size_t>{9});
    for (std::size_t l = 0; l < 3; ++l) {
        const PositionMap keys = key_positions(full, l, {pos});
        BoolMatrix mask(1, keys.size(), 1);
        for (std::size_t k = 0; k < keys.size(); ++k) {
            if (std::find(dropped.begin(), dropped.end(), keys[k]) != dropped.end()) mask(0, k) = 0;
        }
        x = run_layers(s.model, std::move(x), {pos}, {l, l + 1}, mask, full, true);
    }
    const Vector want = logits_from_hidden(s.model, x.row(0));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-9);
}

TEST(RunVanilla, MatchesReferenceAndFillsCache) {
    const auto s = make_setup(3, 16, 4, 2, 17, 3, 5);
    ASSERT_EQ(s.ids.size(), 12u);
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    PositionMap all(12);
    for (std::size_t i = 0; i < 12; ++i) all[i] = i;
    EXPECT_LE(max_abs(v.hidden, oracle::reference_forward(s.model, embed(s.model, s.ids), all, 0, 3)), 1e-9);
    KVCache cache(3);
    EXPECT_EQ(v.hidden, run_layers(s.model, embed(s.model, s.ids), all, {0, 3}, causal_mask(all, all), cache, true));
    EXPECT_EQ(v.cache.entries_per_layer(), (std::vector<std::size_t>{12, 12, 12}));
}

TEST(RunParVTSBatch, BetaOneTakesSubjectBranchQuestionRows) {
    const auto s = make_setup(4, 16, 8, 3);
    const auto r = run_parvts_batch(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSBatch, 3, 0.0, 1.0));

    PositionMap all(s.ids.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    KVCache scratch(4);
    const Matrix joint = run_layers(s.model, embed(s.model, s.ids), all, {0, 1}, causal_mask(all, all), scratch, false);
    const PositionMap sub_pos = positions_of(s, s.partition.subject_indices, true);
    const Matrix sub = run_layers(s.model, rows_at(joint, all, sub_pos), sub_pos, {1, 3},
                                  causal_mask(sub_pos, sub_pos), scratch, false);
    PositionMap q;
    for (std::size_t p = s.layout.question_span.begin; p < s.layout.question_span.end; ++p) q.push_back(p);
    EXPECT_EQ(rows_at(r.migration_state, r.migration_positions, q), rows_at(sub, sub_pos, q));
}

TEST(RunParVTSBatch, MatchesTwoPassOracle) {
    const auto s = make_setup(4, 32, 16, 6, 7, 4, 6);
    const auto cfg = schedule(Strategy::ParVTSBatch, 2);
    const auto r = run_parvts_batch(s.model, s.ids, s.layout, s.partition, cfg);
    const auto o = oracle_two_pass(s.model, s.ids, s.layout, s.partition, cfg);
    EXPECT_EQ(r.positions, o.positions);
    EXPECT_LE(max_abs(r.hidden, o.hidden), 1e-6);
}

TEST(RunParVTSBatch, SystemRowsAgreeAcrossBranches) {
    const auto s = make_setup(6, 16, 8, 4);
    const auto r = run_parvts_batch(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSBatch, 5));
    ASSERT_EQ(r.system_identity_gap.size(), 4u);
    for (double g : r.system_identity_gap) EXPECT_LE(g, 1e-12);
}

TEST(RunParVTSBatch, ReducesToVanilla) {
    const auto s = make_setup(4, 16, 8, 8);
    const auto r = run_parvts_batch(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSBatch, 4, 0.0, 1.0));
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    EXPECT_LE(max_abs(r.hidden, v.hidden), 1e-9);
}

TEST(RunParVTSBatch, CacheHoldsOnlyRetainedRows) {
    const auto s = make_setup(4, 16, 8, 3);
    auto r = run_parvts_batch(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSBatch, 2));
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(r.cache.entries(l), 3u + 3u + 5u);
    greedy_decode(s.model, r.cache, 1, 4, s.layout.output_start);
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(r.cache.entries(l), 3u + 3u + 5u + 4u);
    for (std::size_t i : s.partition.nonsubject_indices) EXPECT_FALSE(r.cache.contains(s.layout.visual_span.begin + i));
}

TEST(RunParVTSBatch, EmptyGroupCollapses) {
    const auto s = make_setup(4, 16, 6, 0);
    const auto r = run_parvts_batch(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSBatch, 2));
    EXPECT_TRUE(r.collapsed);
    EXPECT_TRUE(all_finite(r.hidden));
    EXPECT_EQ(r.hidden.rows(), 3u + 5u);
}

TEST(RunParVTSMasked, MatchesBatchOnSystemAndSubjectRows) {
    const auto s = make_setup(4, 32, 16, 6, 7, 4, 6);
    const auto cfg = schedule(Strategy::ParVTSBatch, 3);
    const auto b = run_parvts_batch(s.model, s.ids, s.layout, s.partition, cfg);
    const auto m = run_parvts_masked(s.model, s.ids, s.layout, s.partition, cfg);
    ASSERT_EQ(b.migration_positions, m.migration_positions);
    const PositionMap kept = positions_of(s, s.partition.subject_indices, false);
    PositionMap wanted;
    for (std::size_t p = 0; p < s.layout.system_span.end; ++p) wanted.push_back(p);
    wanted.insert(wanted.end(), kept.begin(), kept.end());
    EXPECT_LE(max_abs(rows_at(b.migration_state, b.migration_positions, wanted),
                      rows_at(m.migration_state, m.migration_positions, wanted)),
              1e-9);
}

TEST(RunParVTSMasked, NoExclusiveLayersIsVanilla) {
    const auto s = make_setup(4, 16, 8, 8);
    const auto m = run_parvts_masked(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSMasked, 1));
    const auto v = run_vanilla(s.model, s.ids, s.layout);
    EXPECT_EQ(m.hidden, v.hidden);
}

TEST(RunParVTSMasked, CacheCountsAfterPrefill) {
    const auto s = make_setup(4, 16, 8, 3);
    const auto m = run_parvts_masked(s.model, s.ids, s.layout, s.partition, schedule(Strategy::ParVTSMasked, 3));
    EXPECT_EQ(m.cache.entries_per_layer(), (std::vector<std::size_t>(4, 3 + 3 + 5)));
}

TEST(ExclusiveMask, BlocksCrossGroupAndSystemLookahead) {
    const auto layout = SequenceLayout::from_counts(2, 4, 2);
    const PositionMap subject{2, 4};
    PositionMap all(8);
    for (std::size_t i = 0; i < 8; ++i) all[i] = i;
    const BoolMatrix m = exclusive_mask(all, all, layout, subject);
    EXPECT_TRUE(m(4, 2));   // subject sees subject
    EXPECT_FALSE(m(4, 3));  // subject does not see non-subject
    EXPECT_FALSE(m(5, 4));  // non-subject does not see subject
    EXPECT_TRUE(m(5, 3));
    EXPECT_TRUE(m(5, 0));   // visual rows see the system prompt
    EXPECT_TRUE(m(7, 5));   // question rows see every visual row
    EXPECT_TRUE(m(7, 4));
    EXPECT_TRUE(m(1, 0));
    EXPECT_FALSE(m(1, 2));  // causal
}

TEST(RunSubjectFirst, SwapUsesEmbeddingsAndKeepsTextRows) {
    const auto s = make_setup(4, 16, 8, 3);
    const auto r = run_subject_first(s.model, s.ids, s.layout, s.partition, schedule(Strategy::SubjectFirst, 2));
    const PositionMap stage1 = positions_of(s, s.partition.subject_indices, true);
    KVCache scratch(4);
    const Matrix before = run_layers(s.model, embed(s.model, ids_at(s, stage1)), stage1, {0, 2},
                                     causal_mask(stage1, stage1), scratch, false);

    const PositionMap incoming = positions_of(s, s.partition.nonsubject_indices, false);
    EXPECT_EQ(rows_at(r.migration_state, r.migration_positions, incoming), embed(s.model, ids_at(s, incoming)));
    PositionMap text;
    for (std::size_t p = 0; p < s.layout.system_span.end; ++p) text.push_back(p);
    for (std::size_t p = s.layout.question_span.begin; p < s.layout.question_span.end; ++p) text.push_back(p);
    EXPECT_EQ(rows_at(r.migration_state, r.migration_positions, text), rows_at(before, stage1, text));
}

TEST(RunSubjectFirst, EmptySwapIsWellDefined) {
    const auto s = make_setup(4, 16, 6, 6);
    const auto r = run_subject_first(s.model, s.ids, s.layout, s.partition, schedule(Strategy::SubjectFirst, 2));
    EXPECT_TRUE(all_finite(r.hidden));
    EXPECT_EQ(r.hidden.rows(), 3u + 5u);
}

TEST(RunSubjectFirst, FullGroupAtFullDepthIsVanilla) {
    const auto s = make_setup(4, 16, 6, 6);
    const auto r = run_subject_first(s.model, s.ids, s.layout, s.partition, schedule(Strategy::SubjectFirst, 4));
    EXPECT_LE(max_abs(r.hidden, run_vanilla(s.model, s.ids, s.layout).hidden), 1e-9);
}

TEST(RunNonSubjectFirst, MirrorOfSubjectFirst) {
    const auto s = make_setup(4, 16, 8, 3);
    const auto cfg = schedule(Strategy::NonSubjectFirst, 2);
    const auto a = run_nonsubject_first(s.model, s.ids, s.layout, s.partition, cfg);
    const auto b = run_subject_first(s.model, s.ids, s.layout, s.partition.swapped(), cfg);
    EXPECT_EQ(a.hidden, b.hidden);
    EXPECT_EQ(a.positions, b.positions);
    EXPECT_TRUE(cache_equal(a.cache, b.cache));
}

TEST(RunNonSubjectFirst, SwappedInSubjectRowsAreEmbeddings) {
    const auto s = make_setup(4, 16, 8, 3);
    const auto r = run_nonsubject_first(s.model, s.ids, s.layout, s.partition, schedule(Strategy::NonSubjectFirst, 2));
    const PositionMap incoming = positions_of(s, s.partition.subject_indices, false);
    EXPECT_EQ(rows_at(r.migration_state, r.migration_positions, incoming), embed(s.model, ids_at(s, incoming)));
}

TEST(RunNonSubjectFirst, AllNonSubjectAtFullDepthIsVanilla) {
    const auto s = make_setup(4, 16, 6, 0);
    const auto r = run_nonsubject_first(s.model, s.ids, s.layout, s.partition, schedule(Strategy::NonSubjectFirst, 4));
    EXPECT_LE(max_abs(r.hidden, run_vanilla(s.model, s.ids, s.layout).hidden), 1e-9);
}

TEST(ScheduleConfig, RejectsInvalidSettings) {
    const auto s = make_setup(4, 16, 6, 3);
    auto run = [&](ScheduleConfig c) { return run_strategy(s.model, s.ids, s.layout, s.partition, c); };
    EXPECT_THROW(run(schedule(Strategy::ParVTSBatch, 0)), std::invalid_argument);
    EXPECT_THROW(run(schedule(Strategy::ParVTSBatch, 5)), std::invalid_argument);
    EXPECT_THROW(run(schedule(Strategy::ParVTSBatch, 2, 0.5, 0.6)), std::invalid_argument);
    EXPECT_THROW(run(schedule(Strategy::ParVTSMasked, 2, 0.5, 0.5, 3)), std::invalid_argument);
    EXPECT_NO_THROW(run(schedule(Strategy::Vanilla, 0)));
}

TEST(ScheduleInputs, RejectsMismatchedPartitionAndIds) {
    const auto s = make_setup(4, 16, 6, 3);
    const auto cfg = schedule(Strategy::ParVTSBatch, 2);
    const Partition wrong = partition_topk(SaliencyScores{{0.1, 0.2}}, 1);
    EXPECT_THROW(run_parvts_batch(s.model, s.ids, s.layout, wrong, cfg), std::invalid_argument);
    std::vector<std::size_t> short_ids(s.ids.begin(), s.ids.end() - 1);
    EXPECT_THROW(run_parvts_batch(s.model, short_ids, s.layout, s.partition, cfg), std::invalid_argument);
}

TEST(StrategyNames, RoundTrip) {
    for (Strategy st : {Strategy::Vanilla, Strategy::ParVTSBatch, Strategy::ParVTSMasked, Strategy::SubjectFirst,
                        Strategy::NonSubjectFirst}) {
        EXPECT_EQ(parse_strategy(to_string(st)), st);
    }
    EXPECT_THROW(parse_strategy("Greedy"), std::invalid_argument);
}
