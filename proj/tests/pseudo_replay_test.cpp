#include "vag/pseudo_replay.hpp"

#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

using namespace vag;
using vag_test::small_vocab;

namespace {

struct Fixture {
    Vocabulary vocab = small_vocab();
    std::shared_ptr<const FrozenEmbedder> embedder =
        std::make_shared<FrozenEmbedder>(small_vocab().size(), 32, 19);
    RelatednessTable table{embedder, vocab, 10};
};

std::vector<LprBasePair> make_base(const Vocabulary& vocab,
                                   const std::vector<std::vector<std::string>>& label_sets) {
    std::vector<LprBasePair> base;
    int task = 1;
    for (const auto& labels : label_sets) {
        auto tv = std::make_shared<TaskVocab>(task_vocab(vocab, labels, task));
        for (const auto& l : labels) {
            base.push_back({vocab.encode(l), task, tv});
        }
        ++task;
    }
    return base;
}

}  // namespace

TEST(RelatednessTable, TokenIsNeverItsOwnNeighbor) {
    Fixture f;
    for (int id = 4; id < static_cast<int>(f.vocab.size()); ++id) {
        const auto& nbrs = f.table.neighbors(id);
        EXPECT_LE(nbrs.size(), 10u);
        for (int n : nbrs) EXPECT_NE(n, id);
    }
}

TEST(RelatednessTable, DeterministicPerEmbedderSeed) {
    Fixture a, b;
    for (int id = 4; id < static_cast<int>(a.vocab.size()); ++id) {
        EXPECT_EQ(a.table.neighbors(id), b.table.neighbors(id));
    }
}

TEST(AugmentLabel, ThreeTokenLabelGetsExactlyOneInsertion) {
    Fixture f;
    Rng rng(1);
    auto y = f.vocab.encode("transfer money now");
    auto aug = augment_label(y, f.table, rng);
    EXPECT_EQ(aug.tokens.size(), 4u);  // ceil(0.3 * 3) = 1
    EXPECT_EQ(aug.inserted_positions.size(), 1u);
}

TEST(AugmentLabel, TenTokenLabelGetsThreeInsertions) {
    Fixture f;
    Rng rng(2);
    std::vector<int> y;
    for (int i = 0; i < 10; ++i) y.push_back(4 + i);
    auto aug = augment_label(y, f.table, rng);
    EXPECT_EQ(aug.tokens.size(), 13u);  // ceil(0.3 * 10) = 3
    EXPECT_EQ(aug.inserted_positions.size(), 3u);
}

TEST(AugmentLabel, RemovingInsertionsRecoversOriginal) {
    Fixture f;
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> y;
        const std::size_t len = 1 + rng.uniform_index(6);
        for (std::size_t i = 0; i < len; ++i)
            y.push_back(static_cast<int>(4 + rng.uniform_index(f.vocab.size() - 4)));
        auto aug = augment_label(y, f.table, rng);
        std::set<std::size_t> inserted(aug.inserted_positions.begin(),
                                       aug.inserted_positions.end());
        std::vector<int> recovered;
        for (std::size_t i = 0; i < aug.tokens.size(); ++i) {
            if (!inserted.count(i)) recovered.push_back(aug.tokens[i]);
        }
        EXPECT_EQ(recovered, y);
    }
}

TEST(AugmentLabel, AnchorsWithoutNeighborsSkipInsertion) {
    // one content token only: it has no neighbors to draw from
    Vocabulary vocab;
    vocab.add_token("solo");
    auto embedder = std::make_shared<FrozenEmbedder>(vocab.size(), 8, 3);
    RelatednessTable table(embedder, vocab, 10);
    EXPECT_TRUE(table.neighbors(vocab.id_of("solo")).empty());
    Rng rng(13);
    std::vector<int> y{vocab.id_of("solo")};
    auto aug = augment_label(y, table, rng);
    EXPECT_EQ(aug.tokens, y);  // nothing inserted
    EXPECT_TRUE(aug.inserted_positions.empty());
    EXPECT_EQ(aug.skipped_insertions, 1u);
}

TEST(AugmentLabel, EmptyLabelRejected) {
    Fixture f;
    Rng rng(4);
    std::vector<int> empty;
    EXPECT_THROW(augment_label(empty, f.table, rng), ContractError);
}

TEST(BuildLpr, FirstTaskHasNothingToReplay) {
    Fixture f;
    Rng rng(5);
    auto lpr = build_lpr({}, f.table, rng);
    EXPECT_TRUE(lpr.empty());
}

TEST(BuildLpr, OnePairPerDistinctPreviousLabel) {
    Fixture f;
    Rng rng(6);
    auto base = make_base(f.vocab, {{"transfer money", "card lost", "refund", "check balance",
                                     "send now", "account lost", "money now", "card stolen",
                                     "balance please", "need account"},
                                    {"stolen card", "lost money", "refund please", "now send",
                                     "my balance", "was lost", "transfer now", "check account",
                                     "please send", "money card"}});
    ASSERT_EQ(base.size(), 20u);
    auto lpr = build_lpr(base, f.table, rng);
    EXPECT_EQ(lpr.size(), 20u);  // t = 3 with 10 labels per previous task
}

TEST(BuildLpr, EveryPairCarriesItsSourceTaskVocabulary) {
    Fixture f;
    Rng rng(7);
    auto base = make_base(f.vocab, {{"transfer money"}, {"card lost"}});
    auto lpr = build_lpr(base, f.table, rng);
    ASSERT_EQ(lpr.size(), 2u);
    for (const auto& s : lpr) {
        ASSERT_NE(s.vocab, nullptr);
        EXPECT_EQ(s.vocab->task_id, s.source_task);
        for (int tok : s.target) EXPECT_TRUE(s.vocab->allows(tok));
    }
    EXPECT_TRUE(lpr[0].vocab->allows(f.vocab.id_of("transfer")));
    EXPECT_FALSE(lpr[0].vocab->allows(f.vocab.id_of("card")));
    EXPECT_TRUE(lpr[1].vocab->allows(f.vocab.id_of("card")));
}

TEST(SampleLpr, CountLawHolds) {
    Fixture f;
    Rng rng(8);
    auto base = make_base(f.vocab, {{"transfer money", "card lost"}});
    EXPECT_EQ(sample_lpr(base, 0.1, 100, f.table, rng).size(), 10u);
    EXPECT_EQ(sample_lpr(base, 0.0, 100, f.table, rng).size(), 0u);
    EXPECT_EQ(sample_lpr(base, 0.1, 4, f.table, rng).size(), 0u);  // round(0.4) = 0
    EXPECT_EQ(sample_lpr(base, 0.1, 5, f.table, rng).size(), 1u);  // round(0.5) = 1, half-up
    EXPECT_EQ(sample_lpr(base, 0.5, 31, f.table, rng).size(), 16u);
}

TEST(SampleLpr, NegativeLambdaRejected) {
    Fixture f;
    Rng rng(9);
    auto base = make_base(f.vocab, {{"refund"}});
    EXPECT_THROW(sample_lpr(base, -0.1, 10, f.table, rng), ContractError);
}

TEST(SampleLpr, FreshnessAcrossRefreshes) {
    Fixture f;
    Rng r1(10), r2(11);
    auto base = make_base(f.vocab, {{"transfer money now please", "card lost stolen account"}});
    auto a = sample_lpr(base, 1.0, 20, f.table, r1);
    auto b = sample_lpr(base, 1.0, 20, f.table, r2);
    ASSERT_EQ(a.size(), b.size());
    bool any_differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        any_differs = any_differs || (a[i].input != b[i].input) || (a[i].target != b[i].target);
    }
    EXPECT_TRUE(any_differs);
}

TEST(SampleLpr, ToSampleAppendsEosAndKeepsMask) {
    Fixture f;
    Rng rng(12);
    auto base = make_base(f.vocab, {{"transfer money"}});
    auto drawn = sample_lpr(base, 1.0, 3, f.table, rng);
    ASSERT_EQ(drawn.size(), 3u);
    auto s = to_sample(drawn[0]);
    EXPECT_EQ(s.target_ids.back(), Vocabulary::kEos);
    EXPECT_EQ(s.mask, drawn[0].vocab);
    EXPECT_EQ(s.input_ids, drawn[0].input);
}
