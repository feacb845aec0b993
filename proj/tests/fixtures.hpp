#pragma once

#include <vector>

#include "upcycle/checkpoint.hpp"

namespace fixture {

// d=32, L=4, H_q=4, H_kv=2, d_h=8, V=64
inline upcycle::TransformerConfig toy_teacher_config() {
    upcycle::TransformerConfig c;
    c.d_model = 32;
    c.n_layers = 4;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.vocab = 64;
    c.mlp_hidden = 64;
    return c;
}

inline upcycle::TransformerConfig llama_1b_config() {
    upcycle::TransformerConfig c;
    c.d_model = 2048;
    c.n_layers = 16;
    c.n_q_heads = 32;
    c.n_kv_heads = 8;
    c.head_dim = 64;
    c.vocab = 128256;
    c.mlp_hidden = 8192;
    c.rope_theta = 500000.0;
    return c;
}

inline std::vector<upcycle::TokenId> random_tokens(upcycle::Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<upcycle::TokenId> t(n);
    for (auto& id : t) id = static_cast<upcycle::TokenId>(rng.below(vocab));
    return t;
}

}  // namespace fixture
