#pragma once

#include <vector>

#include "h3m/autodiff.hpp"

namespace h3m::ssmoes {

struct ExpertParams {
    ad::Var style;  // 1 x D_s, trainable
    ad::Ffn ffn;    // (D + D_s) -> D
};

struct PoolParams {
    std::vector<ExpertParams> experts;
    ad::Var w_route;  // (D + C) x N_e where C is the context width
    ad::Var b_route;  // 1 x N_e
    std::size_t top_k = 2;
};

struct SsmoesParams {
    ad::Var proj_flat;        // (T * D_LLM) x D, bias-free
    ad::Var w_left;           // 1 x N  (cross-stock aggregation)
    ad::Var w_right;          // D x D_m
    PoolParams market;        // context width D_m
    PoolParams industry;      // context width E2
    ad::Ffn ffn_industry;     // E2 -> E2
    ad::Var w_mkt, w_ind;     // D x D
    ad::Ffn head;             // D -> 2
    ad::Ffn dense;            // replacement stack for the no-MoE ablation
    bool ablated = false;
};

SsmoesParams make_ssmoes_params(ad::ParamStore& store, std::size_t n_stocks, std::size_t t,
                                std::size_t d_llm, std::size_t d, std::size_t d_m,
                                std::size_t d_s, std::size_t e2, std::size_t n_mkt,
                                std::size_t n_ind, std::size_t top_k, bool ablated, Rng& rng);

struct Routed {
    ad::Var gates;       // 1 x N_e, exactly K nonzeros summing to 1
    ad::Var probs_full;  // 1 x N_e, pre-masking softmax of all logits
    std::vector<std::size_t> indices;
};

// Top-K sparse gating: keep the K largest logits (ties to the lower
// index), softmax over them, exact zeros elsewhere.
Routed route_topk(const ad::Var& logits, std::size_t k);

// FFN([z_i, s]) — the expert consumes the stock feature concatenated with
// its own style vector.
ad::Var expert_forward(const ExpertParams& e, const ad::Var& z_row);

struct MoEOutput {
    ad::Var h;      // N x D pooled output
    ad::Var gates;  // N x N_e
    ad::Var probs;  // N x N_e pre-masking routing probabilities
    std::vector<std::vector<std::size_t>> selected;
    Tensor routed_fraction;  // f vector, 1 x N_e
    ad::Var aux;    // sum_i f_i P_i
};

// `context` is either 1 x C (shared market state, broadcast to all stocks)
// or N x C (per-stock industry embedding). Context steers routing only;
// experts see z_i alone.
MoEOutput moe_pool_forward(const PoolParams& pool, const ad::Var& z_flat, const ad::Var& context);

ad::Var market_state(const ad::Var& z_flat, const ad::Var& w_left, const ad::Var& w_right);
ad::Var industry_embed(const ad::Var& h_global, const ad::Ffn& ffn_industry);
ad::Var aggregate_pools(const ad::Var& h_mkt, const ad::Var& h_ind,
                        const ad::Var& w_mkt, const ad::Var& w_ind);

struct SsmoesOut {
    ad::Var probs;    // N x 2, rows sum to 1
    ad::Var prob_up;  // 1 x N
    ad::Var aux_market, aux_industry;  // scalars (zero constants when ablated)
    MoEOutput market, industry;        // empty vars when ablated
};

SsmoesOut ssmoes_forward(const SsmoesParams& p, const ad::Var& z_llm_flat /* N x (T*D_LLM) */,
                         const ad::Var& h_global /* N x E2 */);

}  // namespace h3m::ssmoes
