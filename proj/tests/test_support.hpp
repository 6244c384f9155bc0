#pragma once

#include <string>
#include <vector>

#include "vag/model.hpp"
#include "vag/objective.hpp"
#include "vag/rng.hpp"
#include "vag/vocab.hpp"

namespace vag_test {

inline vag::Vocabulary small_vocab(const std::vector<std::string>& extra = {}) {
    vag::Vocabulary v;
    for (const char* tok : {"transfer", "money", "card", "lost", "stolen", "refund", "balance",
                            "check", "send", "now", "please", "my", "was", "need", "account"}) {
        v.add_token(tok);
    }
    for (const auto& tok : extra) v.add_token(tok);
    return v;
}

inline vag::ModelConfig tiny_config(std::size_t d = 16, std::size_t heads = 2,
                                    std::size_t enc = 1, std::size_t dec = 1) {
    vag::ModelConfig c;
    c.d_model = d;
    c.n_heads = heads;
    c.enc_layers = enc;
    c.dec_layers = dec;
    c.max_seq_len = 32;
    c.max_target_len = 8;
    return c;
}

inline vag::Sample make_sample(const vag::Vocabulary& v, const std::string& text,
                               const std::string& label,
                               std::shared_ptr<const vag::TaskVocab> mask = nullptr) {
    vag::Sample s;
    s.input_ids = v.encode(text);
    s.target_ids = v.encode(label);
    s.target_ids.push_back(vag::Vocabulary::kEos);
    s.mask = std::move(mask);
    return s;
}

}  // namespace vag_test
