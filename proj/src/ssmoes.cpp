#include "h3m/ssmoes.hpp"

#include <cmath>

namespace h3m::ssmoes {

using ad::Var;

namespace {

Var make_matrix_param(ad::ParamStore& store, const std::string& name, std::size_t r,
                      std::size_t c, Rng& rng, double bound) {
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    return store.add(name, std::move(t));
}

PoolParams make_pool(ad::ParamStore& store, const std::string& prefix, std::size_t d,
                     std::size_t ctx, std::size_t d_s, std::size_t n_experts, std::size_t top_k,
                     Rng& rng) {
    if (top_k < 1 || top_k > n_experts)
        throw std::runtime_error("make_pool: require 1 <= K <= N_e");
    PoolParams p;
    p.top_k = top_k;
    for (std::size_t j = 0; j < n_experts; ++j) {
        ExpertParams e;
        Tensor s = Tensor::zeros({1, d_s});
        for (double& v : s.data) v = rng.uniform(-1.0, 1.0);
        e.style = store.add(prefix + ".expert" + std::to_string(j) + ".style", std::move(s));
        e.ffn = ad::make_ffn(store, prefix + ".expert" + std::to_string(j) + ".ffn",
                             {d + d_s, d}, rng);
        p.experts.push_back(std::move(e));
    }
    double bound = 1.0 / std::sqrt(static_cast<double>(d + ctx));
    p.w_route = make_matrix_param(store, prefix + ".w_route", d + ctx, n_experts, rng, bound);
    p.b_route = store.add(prefix + ".b_route", Tensor::zeros({1, n_experts}));
    return p;
}

}  // namespace

SsmoesParams make_ssmoes_params(ad::ParamStore& store, std::size_t n_stocks, std::size_t t,
                                std::size_t d_llm, std::size_t d, std::size_t d_m,
                                std::size_t d_s, std::size_t e2, std::size_t n_mkt,
                                std::size_t n_ind, std::size_t top_k, bool ablated, Rng& rng) {
    SsmoesParams p;
    p.ablated = ablated;
    std::size_t flat_in = t * d_llm;
    p.proj_flat = make_matrix_param(store, "ssmoes.proj_flat", flat_in, d, rng,
                                    1.0 / std::sqrt(static_cast<double>(flat_in)));
    if (ablated) {
        p.dense = ad::make_ffn(store, "ssmoes.dense", {d, d}, rng);
        p.head = ad::make_ffn(store, "ssmoes.head", {d, 2}, rng, ad::Activation::Identity);
        return p;
    }
    p.w_left = make_matrix_param(store, "ssmoes.w_left", 1, n_stocks, rng,
                                 1.0 / std::sqrt(static_cast<double>(n_stocks)));
    p.w_right = make_matrix_param(store, "ssmoes.w_right", d, d_m, rng,
                                  1.0 / std::sqrt(static_cast<double>(d)));
    p.market = make_pool(store, "ssmoes.market", d, d_m, d_s, n_mkt, top_k, rng);
    p.industry = make_pool(store, "ssmoes.industry", d, e2, d_s, n_ind, top_k, rng);
    p.ffn_industry = ad::make_ffn(store, "ssmoes.ffn_industry", {e2, e2}, rng);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    p.w_mkt = make_matrix_param(store, "ssmoes.w_mkt", d, d, rng, bound);
    p.w_ind = make_matrix_param(store, "ssmoes.w_ind", d, d, rng, bound);
    p.head = ad::make_ffn(store, "ssmoes.head", {d, 2}, rng, ad::Activation::Identity);
    return p;
}

Routed route_topk(const Var& logits, std::size_t k) {
    if (logits->value.rows() != 1)
        throw std::runtime_error("route_topk: expects a 1 x N_e logit row");
    std::size_t n_e = logits->value.cols();
    if (k < 1 || k > n_e) throw std::runtime_error("route_topk: require 1 <= K <= N_e");
    Routed r;
    r.indices = ad::topk_indices(logits->value.data, k);
    Var kept = ad::gather(logits, r.indices);
    r.gates = ad::scatter(ad::softmax_rows(kept), r.indices, n_e);
    r.probs_full = ad::softmax_rows(logits);
    return r;
}

Var expert_forward(const ExpertParams& e, const Var& z_row) {
    return e.ffn.apply(ad::concat_cols({z_row, e.style}));
}

MoEOutput moe_pool_forward(const PoolParams& pool, const Var& z_flat, const Var& context) {
    std::size_t n = z_flat->value.rows();
    std::size_t n_e = pool.experts.size();
    bool shared_ctx = context->value.rows() == 1;
    if (!shared_ctx && context->value.rows() != n)
        throw std::runtime_error("moe_pool_forward: context rows must be 1 or N");

    std::vector<Var> h_rows, gate_rows, prob_rows;
    MoEOutput out;
    out.routed_fraction = Tensor::zeros({1, n_e});
    std::vector<Var> aux_terms;
    for (std::size_t i = 0; i < n; ++i) {
        Var zi = ad::select_row(z_flat, i);
        Var ctx = shared_ctx ? context : ad::select_row(context, i);
        Var logits = ad::add_row_broadcast(ad::matmul(ad::concat_cols({zi, ctx}), pool.w_route),
                                           pool.b_route);
        Routed routed = route_topk(logits, pool.top_k);
        Var hi;
        for (std::size_t j : routed.indices) {
            Var g = ad::gather(routed.gates, {j});  // 1 x 1
            Var term = ad::matmul(g, expert_forward(pool.experts[j], zi));
            hi = hi ? ad::add(hi, term) : term;
            out.routed_fraction[j] += 1.0 / static_cast<double>(n);
        }
        h_rows.push_back(hi);
        gate_rows.push_back(routed.gates);
        prob_rows.push_back(routed.probs_full);
        out.selected.push_back(routed.indices);
    }
    out.h = ad::stack_rows(h_rows);
    out.gates = ad::stack_rows(gate_rows);
    out.probs = ad::stack_rows(prob_rows);
    out.aux = ad::dot_const(ad::mean_rows(out.probs), out.routed_fraction);
    return out;
}

Var market_state(const Var& z_flat, const Var& w_left, const Var& w_right) {
    return ad::matmul(ad::matmul(w_left, z_flat), w_right);  // 1 x D_m
}

Var industry_embed(const Var& h_global, const ad::Ffn& ffn_industry) {
    return ffn_industry.apply(h_global);
}

Var aggregate_pools(const Var& h_mkt, const Var& h_ind, const Var& w_mkt, const Var& w_ind) {
    return ad::gelu(ad::add(ad::matmul(h_mkt, w_mkt), ad::matmul(h_ind, w_ind)));
}

SsmoesOut ssmoes_forward(const SsmoesParams& p, const Var& z_llm_flat, const Var& h_global) {
    SsmoesOut out;
    Var z_flat = ad::matmul(z_llm_flat, p.proj_flat);  // N x D
    Var z_final;
    if (p.ablated) {
        z_final = p.dense.apply(z_flat);
        out.aux_market = ad::constant(Tensor::scalar(0.0));
        out.aux_industry = ad::constant(Tensor::scalar(0.0));
    } else {
        Var m = market_state(z_flat, p.w_left, p.w_right);
        out.market = moe_pool_forward(p.market, z_flat, m);
        Var ind = industry_embed(h_global, p.ffn_industry);
        out.industry = moe_pool_forward(p.industry, z_flat, ind);
        z_final = aggregate_pools(out.market.h, out.industry.h, p.w_mkt, p.w_ind);
        out.aux_market = out.market.aux;
        out.aux_industry = out.industry.aux;
    }
    out.probs = ad::softmax_rows(p.head.apply(z_final));  // N x 2
    out.prob_up = ad::transpose(ad::slice_cols(out.probs, 1, 1));  // 1 x N
    return out;
}

}  // namespace h3m::ssmoes
