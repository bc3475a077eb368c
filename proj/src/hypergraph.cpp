#include "h3m/hypergraph.hpp"

#include <cmath>

namespace h3m::hypergraph {

using ad::Var;

LchParams make_lch_params(ad::ParamStore& store, std::size_t nt, std::size_t e1, std::size_t d,
                          Rng& rng) {
    static const char* pair_names[4] = {"qq", "nn", "qn", "nq"};
    LchParams p;
    for (int i = 0; i < 4; ++i)
        p.sub[i] = ad::make_ffn(store, std::string("lch.sub_") + pair_names[i], {nt, e1}, rng);
    p.fusion = ad::make_ffn(store, "lch.fusion", {4 * e1, e1}, rng);
    auto mk_theta = [&](const std::string& nm) {
        double bound = 1.0 / std::sqrt(static_cast<double>(d));
        Tensor t = Tensor::zeros({d, d});
        for (double& v : t.data) v = rng.uniform(-bound, bound);
        return store.add(nm, std::move(t));
    };
    p.theta_quant = mk_theta("lch.theta_quant");
    p.theta_news = mk_theta("lch.theta_news");
    return p;
}

GchParams make_gch_params(ad::ParamStore& store, std::size_t n, std::size_t e2, std::size_t td,
                          std::size_t heads, Rng& rng) {
    static const char* pair_names[4] = {"qq", "nn", "qn", "nq"};
    GchParams p;
    p.heads = heads;
    auto mk = [&](const std::string& nm, std::size_t rows, std::size_t cols) {
        double bound = 1.0 / std::sqrt(static_cast<double>(rows));
        Tensor t = Tensor::zeros({rows, cols});
        for (double& v : t.data) v = rng.uniform(-bound, bound);
        return store.add(nm, std::move(t));
    };
    p.wq = mk("gch.attn.wq", td, td);
    p.wk = mk("gch.attn.wk", td, td);
    p.wv = mk("gch.attn.wv", td, td);
    for (int i = 0; i < 4; ++i)
        p.sub[i] = ad::make_ffn(store, std::string("gch.sub_") + pair_names[i], {n, e2}, rng);
    p.fusion = ad::make_ffn(store, "gch.fusion", {4 * e2, e2}, rng);
    p.theta_quant = mk("gch.theta_quant", td, td);
    p.theta_news = mk("gch.theta_news", td, td);
    return p;
}

Var build_lch_subgraph(const Var& z_i, const Var& z_j, const ad::Ffn& pair_ffn) {
    if (z_i->value.rows() != z_j->value.rows())
        throw std::runtime_error("build_lch_subgraph: instance counts differ between modalities");
    return ad::matmul(z_i, pair_ffn.apply(ad::transpose(z_j)));
}

Var fuse_and_normalize(const std::array<Var, 4>& subs, const ad::Ffn& fusion) {
    Var cat = ad::concat_cols({subs[0], subs[1], subs[2], subs[3]});
    Var fused = fusion.apply(cat);
    return ad::softmax_cols(ad::zscore_cols(fused));
}

Var hypergraph_conv(const Var& h, const Var& w, const Var& z, const Var& theta, bool activate) {
    Var hw = ad::col_scale(h, w);
    Var agg = ad::matmul(ad::matmul(hw, ad::transpose(h)), ad::matmul(z, theta));
    return activate ? ad::gelu(agg) : agg;
}

LchOut lch_forward(const Var& zq, const Var& zn, const LchParams& p) {
    std::array<Var, 4> subs;
    subs[QQ] = build_lch_subgraph(zq, zq, p.sub[QQ]);
    subs[NN] = build_lch_subgraph(zn, zn, p.sub[NN]);
    subs[QN] = build_lch_subgraph(zq, p.cross_uses_mj ? zn : zq, p.sub[QN]);
    subs[NQ] = build_lch_subgraph(zn, p.cross_uses_mj ? zq : zn, p.sub[NQ]);
    Var h = fuse_and_normalize(subs, p.fusion);
    Var w = ad::jsd_edge_weights(h);
    LchOut out;
    out.zq = hypergraph_conv(h, w, zq, p.theta_quant);
    out.zn = hypergraph_conv(h, w, zn, p.theta_news);
    out.h = h;
    out.edge_weights = w;
    return out;
}

std::array<Var, 4> gch_attention_pairs(const Var& zq_flat, const Var& zn_flat, const GchParams& p) {
    auto attn = [&](const Var& a, const Var& b) {
        return ad::mh_attention_weights(a, b, b, p.wq, p.wk, p.wv, p.heads);
    };
    std::array<Var, 4> out;
    out[QQ] = attn(zq_flat, zq_flat);
    out[NN] = attn(zn_flat, zn_flat);
    out[QN] = attn(zq_flat, zn_flat);
    out[NQ] = attn(zn_flat, zq_flat);
    return out;
}

GchOut gch_forward(const Var& zq_flat, const Var& zn_flat, const GchParams& p) {
    auto attn = gch_attention_pairs(zq_flat, zn_flat, p);
    std::array<Var, 4> subs;
    for (int i = 0; i < 4; ++i)
        subs[i] = ad::softmax_cols(ad::zscore_cols(p.sub[i].apply(attn[i])));
    Var h = fuse_and_normalize(subs, p.fusion);
    Var w = ad::jsd_edge_weights(h);
    GchOut out;
    out.zq = hypergraph_conv(h, w, zq_flat, p.theta_quant);
    out.zn = hypergraph_conv(h, w, zn_flat, p.theta_news);
    out.h_global = h;
    out.edge_weights = w;
    return out;
}

}  // namespace h3m::hypergraph
