#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vag/error.hpp"
#include "vag/rng.hpp"
#include "vag/tensor.hpp"
#include "vag/vocab.hpp"

namespace vag {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    std::size_t ff_mult = 4;
    std::size_t max_seq_len = 128;    // encoder input cap; longer inputs are truncated
    std::size_t max_target_len = 16;  // decoder output cap (excluding BOS)

    void validate() const {
        if (d_model == 0 || n_heads == 0 || enc_layers == 0 || dec_layers == 0 ||
            ff_mult == 0 || max_seq_len == 0 || max_target_len == 0) {
            throw ContractError("ModelConfig: all dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ContractError("ModelConfig: d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(n_heads));
        }
    }
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct FeedForwardParams {
    Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    FeedForwardParams ff;
};

struct DecoderLayer {
    LayerNormParams ln1;
    AttentionParams self_attn;
    LayerNormParams ln2;
    AttentionParams cross_attn;
    LayerNormParams ln3;
    FeedForwardParams ff;
};

// Pre-norm transformer encoder-decoder. The decoder scores the next token as
// E * f_dec(memory, prefix); input and output embedding tables are untied so
// updates to E can be inspected in isolation.
struct Seq2SeqModel {
    ModelConfig config;
    Vocabulary vocab;
    std::uint64_t seed = 0;

    Tensor tok_embed;  // |V| x d, input side
    Tensor pos_enc;    // max_seq_len x d
    Tensor pos_dec;    // (max_target_len + 1) x d, position 0 is BOS
    std::vector<EncoderLayer> encoder;
    LayerNormParams enc_final;
    std::vector<DecoderLayer> decoder;
    LayerNormParams dec_final;
    Tensor out_embed;  // E: |V| x d, output side

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps{&tok_embed, &pos_enc, &pos_dec};
        auto push_ln = [&](LayerNormParams& ln) {
            ps.push_back(&ln.gain);
            ps.push_back(&ln.bias);
        };
        auto push_attn = [&](AttentionParams& a) {
            ps.push_back(&a.wq);
            ps.push_back(&a.bq);
            ps.push_back(&a.wk);
            ps.push_back(&a.bk);
            ps.push_back(&a.wv);
            ps.push_back(&a.bv);
            ps.push_back(&a.wo);
            ps.push_back(&a.bo);
        };
        auto push_ff = [&](FeedForwardParams& f) {
            ps.push_back(&f.w1);
            ps.push_back(&f.b1);
            ps.push_back(&f.w2);
            ps.push_back(&f.b2);
        };
        for (auto& layer : encoder) {
            push_ln(layer.ln1);
            push_attn(layer.attn);
            push_ln(layer.ln2);
            push_ff(layer.ff);
        }
        push_ln(enc_final);
        for (auto& layer : decoder) {
            push_ln(layer.ln1);
            push_attn(layer.self_attn);
            push_ln(layer.ln2);
            push_attn(layer.cross_attn);
            push_ln(layer.ln3);
            push_ff(layer.ff);
        }
        push_ln(dec_final);
        ps.push_back(&out_embed);
        return ps;
    }

    std::vector<const Tensor*> parameters() const {
        auto ps = const_cast<Seq2SeqModel*>(this)->parameters();
        return {ps.begin(), ps.end()};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor* p : parameters()) n += p->numel();
        return n;
    }

    void zero_grad() {
        for (Tensor* p : parameters()) p->zero_grad();
    }

    // Deep copy of parameter values (used for best-epoch snapshots and anchors).
    std::vector<std::vector<double>> snapshot_values() const {
        std::vector<std::vector<double>> out;
        for (const Tensor* p : parameters()) out.push_back(p->values());
        return out;
    }

    void restore_values(const std::vector<std::vector<double>>& snap) {
        auto ps = parameters();
        if (snap.size() != ps.size()) {
            throw ContractError("Seq2SeqModel::restore_values: snapshot size mismatch");
        }
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (snap[i].size() != ps[i]->numel()) {
                throw ContractError("Seq2SeqModel::restore_values: parameter shape drifted");
            }
            ps[i]->values() = snap[i];
        }
    }
};

namespace detail {

inline Tensor init_weight(std::size_t r, std::size_t c, Rng& rng, double std = 0.02) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal(0.0, std);
    return Tensor::from_values(r, c, std::move(v), /*tracked=*/true);
}

inline AttentionParams init_attention(std::size_t d, Rng& rng) {
    AttentionParams a;
    a.wq = init_weight(d, d, rng);
    a.bq = Tensor::zeros(1, d, true);
    a.wk = init_weight(d, d, rng);
    a.bk = Tensor::zeros(1, d, true);
    a.wv = init_weight(d, d, rng);
    a.bv = Tensor::zeros(1, d, true);
    a.wo = init_weight(d, d, rng);
    a.bo = Tensor::zeros(1, d, true);
    return a;
}

inline LayerNormParams init_layer_norm(std::size_t d) {
    return {Tensor::full(1, d, 1.0, true), Tensor::zeros(1, d, true)};
}

inline FeedForwardParams init_feed_forward(std::size_t d, std::size_t h, Rng& rng) {
    FeedForwardParams f;
    f.w1 = init_weight(d, h, rng);
    f.b1 = Tensor::zeros(1, h, true);
    f.w2 = init_weight(h, d, rng);
    f.b2 = Tensor::zeros(1, d, true);
    return f;
}

}  // namespace detail

// Fresh model with scaled-normal weights (std 0.02), reproducible per seed.
inline Seq2SeqModel init_model(const ModelConfig& config, const Vocabulary& vocab,
                               std::uint64_t seed) {
    config.validate();
    if (vocab.size() == 0) throw ContractError("init_model: vocabulary is empty");
    Rng rng(seed);
    Seq2SeqModel m;
    m.config = config;
    m.vocab = vocab;
    m.seed = seed;
    const std::size_t d = config.d_model, v = vocab.size();
    const std::size_t ff = config.ff_mult * d;
    m.tok_embed = detail::init_weight(v, d, rng);
    m.pos_enc = detail::init_weight(config.max_seq_len, d, rng);
    m.pos_dec = detail::init_weight(config.max_target_len + 1, d, rng);
    for (std::size_t i = 0; i < config.enc_layers; ++i) {
        EncoderLayer layer;
        layer.ln1 = detail::init_layer_norm(d);
        layer.attn = detail::init_attention(d, rng);
        layer.ln2 = detail::init_layer_norm(d);
        layer.ff = detail::init_feed_forward(d, ff, rng);
        m.encoder.push_back(std::move(layer));
    }
    m.enc_final = detail::init_layer_norm(d);
    for (std::size_t i = 0; i < config.dec_layers; ++i) {
        DecoderLayer layer;
        layer.ln1 = detail::init_layer_norm(d);
        layer.self_attn = detail::init_attention(d, rng);
        layer.ln2 = detail::init_layer_norm(d);
        layer.cross_attn = detail::init_attention(d, rng);
        layer.ln3 = detail::init_layer_norm(d);
        layer.ff = detail::init_feed_forward(d, ff, rng);
        m.decoder.push_back(std::move(layer));
    }
    m.dec_final = detail::init_layer_norm(d);
    m.out_embed = detail::init_weight(v, d, rng);
    return m;
}

namespace detail {

inline Tensor multi_head_attention(Tape& tape, const AttentionParams& p, const Tensor& q_in,
                                   const Tensor& kv_in, std::size_t n_heads, bool causal) {
    const std::size_t d = q_in.cols();
    const std::size_t dh = d / n_heads;
    Tensor q = tape.add_rowvec(tape.matmul(q_in, p.wq), p.bq);
    Tensor k = tape.add_rowvec(tape.matmul(kv_in, p.wk), p.bk);
    Tensor v = tape.add_rowvec(tape.matmul(kv_in, p.wv), p.bv);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor qh = tape.slice_cols(q, h * dh, dh);
        Tensor kh = tape.slice_cols(k, h * dh, dh);
        Tensor vh = tape.slice_cols(v, h * dh, dh);
        Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
        Tensor probs = causal ? tape.causal_softmax_rows(scores) : tape.softmax_rows(scores);
        heads.push_back(tape.matmul(probs, vh));
    }
    return tape.add_rowvec(tape.matmul(tape.concat_cols(heads), p.wo), p.bo);
}

inline Tensor feed_forward(Tape& tape, const FeedForwardParams& p, const Tensor& x) {
    Tensor h = tape.gelu(tape.add_rowvec(tape.matmul(x, p.w1), p.b1));
    return tape.add_rowvec(tape.matmul(h, p.w2), p.b2);
}

inline std::vector<int> iota_ids(std::size_t n) {
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);
    return ids;
}

}  // namespace detail

// Per-position encoder states (n x d). Inputs longer than max_seq_len are
// truncated and a warning is recorded when a sink is given.
inline Tensor encode(Tape& tape, const Seq2SeqModel& m, std::span<const int> input_ids,
                     std::vector<std::string>* warnings = nullptr) {
    if (input_ids.empty()) throw ContractError("encode: input sequence is empty");
    std::span<const int> ids = input_ids;
    if (ids.size() > m.config.max_seq_len) {
        if (warnings) {
            warnings->push_back("encode: input of " + std::to_string(ids.size()) +
                                " tokens truncated to " + std::to_string(m.config.max_seq_len));
        }
        ids = ids.subspan(0, m.config.max_seq_len);
    }
    Tensor h = tape.add(tape.gather_rows(m.tok_embed, ids),
                        tape.gather_rows(m.pos_enc, detail::iota_ids(ids.size())));
    for (const auto& layer : m.encoder) {
        Tensor norm1 = tape.layer_norm(h, layer.ln1.gain, layer.ln1.bias);
        Tensor a = detail::multi_head_attention(tape, layer.attn, norm1, norm1,
                                                m.config.n_heads, /*causal=*/false);
        h = tape.add(h, a);
        Tensor f = detail::feed_forward(tape, layer.ff,
                                        tape.layer_norm(h, layer.ln2.gain, layer.ln2.bias));
        h = tape.add(h, f);
    }
    return tape.layer_norm(h, m.enc_final.gain, m.enc_final.bias);
}

// Mean-pooled encoder state: the sequence representation used by the
// classifier head and the collapse diagnostic.
inline Tensor encode_pooled(Tape& tape, const Seq2SeqModel& m, std::span<const int> input_ids,
                            std::vector<std::string>* warnings = nullptr) {
    return tape.mean_over_rows(encode(tape, m, input_ids, warnings));
}

// Decoder states for every prefix position (teacher forcing): prefix must
// start with BOS; row i holds f_dec(memory, prefix[0..i]).
inline Tensor decoder_states(Tape& tape, const Seq2SeqModel& m, const Tensor& memory,
                             std::span<const int> prefix) {
    if (prefix.empty() || prefix[0] != Vocabulary::kBos) {
        throw ContractError("decoder_states: prefix must begin with BOS");
    }
    if (prefix.size() > m.config.max_target_len + 1) {
        throw ContractError("decoder_states: prefix of " + std::to_string(prefix.size()) +
                            " exceeds max target length " +
                            std::to_string(m.config.max_target_len));
    }
    Tensor h = tape.add(tape.gather_rows(m.tok_embed, prefix),
                        tape.gather_rows(m.pos_dec, detail::iota_ids(prefix.size())));
    for (const auto& layer : m.decoder) {
        Tensor norm1 = tape.layer_norm(h, layer.ln1.gain, layer.ln1.bias);
        h = tape.add(h, detail::multi_head_attention(tape, layer.self_attn, norm1, norm1,
                                                     m.config.n_heads, /*causal=*/true));
        Tensor norm2 = tape.layer_norm(h, layer.ln2.gain, layer.ln2.bias);
        h = tape.add(h, detail::multi_head_attention(tape, layer.cross_attn, norm2, memory,
                                                     m.config.n_heads, /*causal=*/false));
        Tensor norm3 = tape.layer_norm(h, layer.ln3.gain, layer.ln3.bias);
        h = tape.add(h, detail::feed_forward(tape, layer.ff, norm3));
    }
    return tape.layer_norm(h, m.dec_final.gain, m.dec_final.bias);
}

// Pre-softmax scores E * f_dec for every prefix position: (m x |V|).
inline Tensor decoder_logits_all(Tape& tape, const Seq2SeqModel& m, const Tensor& memory,
                                 std::span<const int> prefix) {
    return tape.matmul(decoder_states(tape, m, memory, prefix), tape.transpose(m.out_embed));
}

// Next-token scores after the full prefix: (1 x |V|). Softmax of this row is
// the model's next-token distribution.
inline Tensor decoder_logits(Tape& tape, const Seq2SeqModel& m, const Tensor& memory,
                             std::span<const int> prefix) {
    Tensor all = decoder_logits_all(tape, m, memory, prefix);
    return tape.slice_rows(all, all.rows() - 1, 1);
}

// Greedy decoding: append the argmax token (ties broken by lowest id) until
// EOS or max_len tokens. The returned sequence excludes BOS and EOS.
inline std::vector<int> greedy_decode(const Seq2SeqModel& m, std::span<const int> input_ids,
                                      std::size_t max_len,
                                      std::vector<std::string>* warnings = nullptr) {
    if (max_len == 0) throw ContractError("greedy_decode: max_len must be >= 1");
    max_len = std::min(max_len, m.config.max_target_len);
    Tape tape(/*track=*/false);
    Tensor memory = encode(tape, m, input_ids, warnings);
    std::vector<int> prefix{Vocabulary::kBos};
    std::vector<int> out;
    for (std::size_t step = 0; step < max_len; ++step) {
        Tensor logits = decoder_logits(tape, m, memory, prefix);
        int best = 0;
        double best_score = logits.at(0, 0);
        for (std::size_t w = 1; w < logits.cols(); ++w) {
            if (logits.at(0, w) > best_score) {
                best_score = logits.at(0, w);
                best = static_cast<int>(w);
            }
        }
        if (best == Vocabulary::kEos) break;
        out.push_back(best);
        prefix.push_back(best);
    }
    return out;
}

// ---- checkpointing -------------------------------------------------------
// Single binary file: a manifest (dims, seed, vocab hash, token list)
// followed by raw parameter bytes. Round-trips bitwise.

namespace detail {

constexpr char kCheckpointMagic[8] = {'V', 'A', 'G', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ContractError("checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const Seq2SeqModel& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("save_checkpoint: cannot open " + path);
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    const auto& c = m.config;
    for (std::uint64_t dim : {c.d_model, c.n_heads, c.enc_layers, c.dec_layers, c.ff_mult,
                              c.max_seq_len, c.max_target_len}) {
        detail::write_pod(os, dim);
    }
    detail::write_pod(os, m.seed);
    detail::write_pod(os, m.vocab.hash());
    detail::write_pod(os, static_cast<std::uint64_t>(m.vocab.size()));
    for (const auto& tok : m.vocab.tokens()) {
        detail::write_pod(os, static_cast<std::uint32_t>(tok.size()));
        os.write(tok.data(), static_cast<std::streamsize>(tok.size()));
    }
    const auto params = m.parameters();
    detail::write_pod(os, static_cast<std::uint64_t>(params.size()));
    for (const Tensor* p : params) {
        detail::write_pod(os, static_cast<std::uint64_t>(p->rows()));
        detail::write_pod(os, static_cast<std::uint64_t>(p->cols()));
        os.write(reinterpret_cast<const char*>(p->values().data()),
                 static_cast<std::streamsize>(p->values().size() * sizeof(double)));
    }
    if (!os) throw ContractError("save_checkpoint: write failed for " + path);
}

inline Seq2SeqModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
        throw ContractError("load_checkpoint: bad magic in " + path);
    }
    ModelConfig c;
    c.d_model = detail::read_pod<std::uint64_t>(is);
    c.n_heads = detail::read_pod<std::uint64_t>(is);
    c.enc_layers = detail::read_pod<std::uint64_t>(is);
    c.dec_layers = detail::read_pod<std::uint64_t>(is);
    c.ff_mult = detail::read_pod<std::uint64_t>(is);
    c.max_seq_len = detail::read_pod<std::uint64_t>(is);
    c.max_target_len = detail::read_pod<std::uint64_t>(is);
    const auto seed = detail::read_pod<std::uint64_t>(is);
    const auto vocab_hash = detail::read_pod<std::uint64_t>(is);
    const auto vocab_size = detail::read_pod<std::uint64_t>(is);
    Vocabulary vocab;
    for (std::uint64_t i = 0; i < vocab_size; ++i) {
        const auto len = detail::read_pod<std::uint32_t>(is);
        std::string tok(len, '\0');
        is.read(tok.data(), len);
        if (!is) throw ContractError("load_checkpoint: truncated vocab in " + path);
        if (i > 3) vocab.add_token(tok);  // reserved tokens pre-populated
    }
    if (vocab.hash() != vocab_hash) {
        throw ContractError("load_checkpoint: vocabulary hash mismatch in " + path);
    }
    Seq2SeqModel m = init_model(c, vocab, seed);
    const auto n_params = detail::read_pod<std::uint64_t>(is);
    auto params = m.parameters();
    if (n_params != params.size()) {
        throw ContractError("load_checkpoint: parameter count mismatch in " + path);
    }
    for (Tensor* p : params) {
        const auto rows = detail::read_pod<std::uint64_t>(is);
        const auto cols = detail::read_pod<std::uint64_t>(is);
        if (rows != p->rows() || cols != p->cols()) {
            throw ContractError("load_checkpoint: parameter shape mismatch in " + path);
        }
        is.read(reinterpret_cast<char*>(p->values().data()),
                static_cast<std::streamsize>(p->values().size() * sizeof(double)));
        if (!is) throw ContractError("load_checkpoint: truncated parameters in " + path);
    }
    return m;
}

}  // namespace vag
