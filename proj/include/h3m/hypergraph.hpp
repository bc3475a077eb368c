#pragma once

#include <array>

#include "h3m/autodiff.hpp"

namespace h3m::hypergraph {

// The four modality pairs, in fixed order.
enum Pair { QQ = 0, NN = 1, QN = 2, NQ = 3 };

struct LchParams {
    std::array<ad::Ffn, 4> sub;  // instance axis: (N*T) -> E1
    ad::Ffn fusion;              // 4*E1 -> E1
    ad::Var theta_quant, theta_news;  // D x D
    bool cross_uses_mj = true;   // cross pairs feed Z_j into the pair FFN
};

struct GchParams {
    ad::Var wq, wk, wv;          // (T*D) x (T*D), shared across pairs
    std::size_t heads = 2;
    std::array<ad::Ffn, 4> sub;  // N -> E2
    ad::Ffn fusion;              // 4*E2 -> E2
    ad::Var theta_quant, theta_news;  // (T*D) x (T*D)
};

LchParams make_lch_params(ad::ParamStore& store, std::size_t nt, std::size_t e1, std::size_t d,
                          Rng& rng);
GchParams make_gch_params(ad::ParamStore& store, std::size_t n, std::size_t e2, std::size_t td,
                          std::size_t heads, Rng& rng);

// H = Z_i * FFN(Z_j^T): the pair FFN maps the instance axis of Z_j^T
// (D x NT) down to E hyperedges, giving D x E; the product is NT x E.
ad::Var build_lch_subgraph(const ad::Var& z_i, const ad::Var& z_j, const ad::Ffn& pair_ffn);

// Concatenate the four sub-hypergraphs edge-wise, fuse, then per-column
// z-score + softmax. Output is column-stochastic.
ad::Var fuse_and_normalize(const std::array<ad::Var, 4>& subs, const ad::Ffn& fusion);

// sigma(H diag(w) H^T Z Theta); `activate` off yields the raw pre-activation.
ad::Var hypergraph_conv(const ad::Var& h, const ad::Var& w, const ad::Var& z,
                        const ad::Var& theta, bool activate = true);

struct LchOut {
    ad::Var zq, zn;      // (N*T) x D
    ad::Var h;           // (N*T) x E1, column-stochastic (null when ablated)
    ad::Var edge_weights;  // 1 x E1 (null when ablated)
};

LchOut lch_forward(const ad::Var& zq, const ad::Var& zn, const LchParams& p);

// Four head-averaged row-stochastic attention matrices over stocks,
// self-attention on matched pairs, cross-attention otherwise.
std::array<ad::Var, 4> gch_attention_pairs(const ad::Var& zq_flat, const ad::Var& zn_flat,
                                           const GchParams& p);

struct GchOut {
    ad::Var zq, zn;      // N x (T*D)
    ad::Var h_global;    // N x E2, column-stochastic
    ad::Var edge_weights;  // 1 x E2
};

GchOut gch_forward(const ad::Var& zq_flat, const ad::Var& zn_flat, const GchParams& p);

}  // namespace h3m::hypergraph
