#include "vag/model.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "test_support.hpp"
#include "vag/objective.hpp"
#include "vag/optimizer.hpp"

using namespace vag;
using vag_test::small_vocab;
using vag_test::tiny_config;

TEST(InitModel, SameSeedGivesBitwiseIdenticalParameters) {
    auto vocab = small_vocab();
    auto a = init_model(tiny_config(), vocab, 99);
    auto b = init_model(tiny_config(), vocab, 99);
    auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i]->values().size(), pb[i]->values().size());
        for (std::size_t j = 0; j < pa[i]->values().size(); ++j) {
            EXPECT_EQ(pa[i]->values()[j], pb[i]->values()[j]);
        }
    }
}

TEST(InitModel, DifferentSeedsDiffer) {
    auto vocab = small_vocab();
    auto a = init_model(tiny_config(), vocab, 1);
    auto b = init_model(tiny_config(), vocab, 2);
    EXPECT_NE(a.tok_embed.values(), b.tok_embed.values());
}

TEST(InitModel, ParameterCountMatchesClosedForm) {
    // default toy config: 2 encoder layers, 2 decoder layers, d_model=64, 4 heads
    auto vocab = small_vocab();
    ModelConfig c;
    auto m = init_model(c, vocab, 5);
    const std::size_t d = c.d_model, v = vocab.size();
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t ln = 2 * d;
    const std::size_t ffn = d * (4 * d) + 4 * d + (4 * d) * d + d;
    const std::size_t enc_layer = ln + attn + ln + ffn;
    const std::size_t dec_layer = ln + attn + ln + attn + ln + ffn;
    const std::size_t expected = v * d                       // input embedding
                                 + c.max_seq_len * d         // encoder positions
                                 + (c.max_target_len + 1) * d  // decoder positions
                                 + c.enc_layers * enc_layer + ln
                                 + c.dec_layers * dec_layer + ln
                                 + v * d;  // output embedding E
    EXPECT_EQ(m.parameter_count(), expected);
}

TEST(InitModel, ZeroDimensionRejected) {
    auto vocab = small_vocab();
    ModelConfig c = tiny_config();
    c.d_model = 0;
    EXPECT_THROW(init_model(c, vocab, 1), ContractError);
}

TEST(Encode, DeterministicAcrossCalls) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 7);
    auto ids = vocab.encode("transfer money now");
    Tape t1(false), t2(false);
    auto m1 = encode(t1, m, ids);
    auto m2 = encode(t2, m, ids);
    EXPECT_EQ(m1.values(), m2.values());
}

TEST(Encode, PositionSensitive) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 7);
    Tape tape(false);
    auto a = encode(tape, m, vocab.encode("transfer money"));
    auto b = encode(tape, m, vocab.encode("money transfer"));
    EXPECT_NE(a.values(), b.values());
}

TEST(Encode, ShapeContract) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(32, 2), vocab, 7);
    std::vector<int> ids(7, 5);
    Tape tape(false);
    auto mem = encode(tape, m, ids);
    EXPECT_EQ(mem.rows(), 7u);
    EXPECT_EQ(mem.cols(), 32u);
}

TEST(Encode, EmptyInputRejectedAndOverlongTruncated) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 7);
    Tape tape(false);
    std::vector<int> empty;
    EXPECT_THROW(encode(tape, m, empty), ContractError);

    std::vector<int> longids(m.config.max_seq_len + 5, 4);
    std::vector<std::string> warnings;
    auto mem = encode(tape, m, longids, &warnings);
    EXPECT_EQ(mem.rows(), m.config.max_seq_len);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("truncated"), std::string::npos);
}

TEST(DecoderLogits, SoftmaxNormalizes) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 3);
    Tape tape(false);
    auto mem = encode(tape, m, vocab.encode("check my balance"));
    std::vector<int> prefix{Vocabulary::kBos};
    auto logits = decoder_logits(tape, m, mem, prefix);
    auto probs = tape.softmax_rows(logits);
    double s = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) s += probs.at(0, j);
    EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(DecoderLogits, ZeroOutputEmbeddingGivesUniform) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 3);
    std::fill(m.out_embed.values().begin(), m.out_embed.values().end(), 0.0);
    Tape tape(false);
    auto mem = encode(tape, m, vocab.encode("check my balance"));
    std::vector<int> prefix{Vocabulary::kBos, 4};
    auto probs = tape.softmax_rows(decoder_logits(tape, m, mem, prefix));
    const double uniform = 1.0 / static_cast<double>(vocab.size());
    for (std::size_t j = 0; j < probs.cols(); ++j) EXPECT_NEAR(probs.at(0, j), uniform, 1e-12);
}

TEST(DecoderLogits, MatchesScalarEvaluationOfNextTokenProbability) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 21);
    Tape tape(false);
    auto mem = encode(tape, m, vocab.encode("send money please"));
    std::vector<int> prefix{Vocabulary::kBos, 5, 6};
    auto logits = decoder_logits(tape, m, mem, prefix);
    auto probs = tape.softmax_rows(logits);
    // direct scalar evaluation of exp(s_w) / sum_u exp(s_u) in extended precision
    long double z = 0.0L;
    for (std::size_t w = 0; w < logits.cols(); ++w)
        z += std::exp(static_cast<long double>(logits.at(0, w)));
    for (std::size_t w = 0; w < logits.cols(); ++w) {
        long double expect = std::exp(static_cast<long double>(logits.at(0, w))) / z;
        EXPECT_NEAR(probs.at(0, w), static_cast<double>(expect), 1e-9);
    }
}

TEST(DecoderLogits, PrefixMustStartWithBosAndFitLimit) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 3);
    Tape tape(false);
    auto mem = encode(tape, m, vocab.encode("check"));
    std::vector<int> bad{4, 5};
    EXPECT_THROW(decoder_logits(tape, m, mem, bad), ContractError);
    std::vector<int> overlong(m.config.max_target_len + 2, 4);
    overlong[0] = Vocabulary::kBos;
    EXPECT_THROW(decoder_logits(tape, m, mem, overlong), ContractError);
}

TEST(DecoderLogits, CausalityOverPrefixPositions) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 31);
    Tape tape(false);
    auto mem = encode(tape, m, vocab.encode("card lost"));
    std::vector<int> p1{Vocabulary::kBos, 4, 5, 6};
    std::vector<int> p2{Vocabulary::kBos, 4, 5, 7};  // differs at last position only
    auto l1 = decoder_logits_all(tape, m, mem, p1);
    auto l2 = decoder_logits_all(tape, m, mem, p2);
    // logits at positions before the change are identical
    for (std::size_t i = 0; i + 1 < p1.size(); ++i)
        for (std::size_t w = 0; w < l1.cols(); ++w) EXPECT_EQ(l1.at(i, w), l2.at(i, w));
    // and the final position reacts to its own new input token
    bool last_differs = false;
    for (std::size_t w = 0; w < l1.cols(); ++w)
        last_differs = last_differs || (l1.at(3, w) != l2.at(3, w));
    EXPECT_TRUE(last_differs);
}

TEST(GreedyDecode, EosFirstModelGeneratesEmpty) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 3);
    // push the EOS output embedding far above everything else
    for (std::size_t j = 0; j < m.out_embed.cols(); ++j) {
        m.out_embed.at(Vocabulary::kEos, j) = 10.0;
        m.dec_final.bias.at(0, j) = 1.0;
    }
    auto out = greedy_decode(m, vocab.encode("transfer money"), 8);
    EXPECT_TRUE(out.empty());
}

TEST(GreedyDecode, DeterministicAcrossCalls) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 17);
    auto a = greedy_decode(m, vocab.encode("refund please"), 6);
    auto b = greedy_decode(m, vocab.encode("refund please"), 6);
    EXPECT_EQ(a, b);
}

TEST(GreedyDecode, OverfitsSingleTrainingPair) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(), vocab, 11);
    Sample pair = vag_test::make_sample(vocab, "send money to account now", "transfer money");
    Adam opt(m.parameters(), 1e-2);
    double loss = 1e9;
    for (int step = 0; step < 300 && loss > 0.02; ++step) {
        Tape tape;
        auto r = nll_loss(tape, m, std::span(&pair, 1), /*masked=*/false);
        opt.zero_grad();
        tape.backward(r.loss);
        opt.step();
        loss = r.breakdown.total;
    }
    ASSERT_LT(loss, 0.02);
    auto out = greedy_decode(m, pair.input_ids, 8);
    EXPECT_EQ(m.vocab.decode(out), "transfer money");
}

TEST(Checkpoint, RoundTripsBitwise) {
    auto vocab = small_vocab();
    auto m = init_model(tiny_config(24, 2, 2, 1), vocab, 77);
    const std::string path = std::filesystem::temp_directory_path() / "vag_ckpt_test.bin";
    save_checkpoint(m, path);
    auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.seed, m.seed);
    EXPECT_EQ(loaded.vocab.hash(), m.vocab.hash());
    auto pa = m.parameters(), pb = loaded.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto& va = pa[i]->values();
        const auto& vb = pb[i]->values();
        ASSERT_EQ(va.size(), vb.size());
        for (std::size_t j = 0; j < va.size(); ++j) EXPECT_EQ(va[j], vb[j]);
    }
    std::remove(path.c_str());
}
