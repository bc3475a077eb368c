#include "h3m/model.hpp"

namespace h3m::model {

using ad::Var;

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{
        {"n_stocks", c.n_stocks}, {"lookback", c.lookback}, {"n_features", c.n_features},
        {"d_news", c.d_news}, {"d_time", c.d_time}, {"d", c.d}, {"d_llm", c.d_llm},
        {"e1", c.e1}, {"e2", c.e2}, {"n_mkt", c.n_mkt}, {"n_ind", c.n_ind},
        {"top_k", c.top_k}, {"d_m", c.d_m}, {"d_s", c.d_s}, {"heads", c.heads},
        {"ablate_lch", c.ablate_lch}, {"ablate_llm", c.ablate_llm},
        {"ablate_ssmoes", c.ablate_ssmoes}, {"lch_cross_uses_mj", c.lch_cross_uses_mj},
        {"backbone", c.backbone == encoder::BackboneKind::Identity ? "identity"
                     : c.backbone == encoder::BackboneKind::Remote ? "remote"
                                                                   : "frozen_orthogonal"},
        {"backbone_url", c.backbone_url}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("n_stocks").get_to(c.n_stocks);
    j.at("lookback").get_to(c.lookback);
    j.at("n_features").get_to(c.n_features);
    j.at("d_news").get_to(c.d_news);
    j.at("d_time").get_to(c.d_time);
    j.at("d").get_to(c.d);
    j.at("d_llm").get_to(c.d_llm);
    j.at("e1").get_to(c.e1);
    j.at("e2").get_to(c.e2);
    j.at("n_mkt").get_to(c.n_mkt);
    j.at("n_ind").get_to(c.n_ind);
    j.at("top_k").get_to(c.top_k);
    j.at("d_m").get_to(c.d_m);
    j.at("d_s").get_to(c.d_s);
    j.at("heads").get_to(c.heads);
    j.at("ablate_lch").get_to(c.ablate_lch);
    j.at("ablate_llm").get_to(c.ablate_llm);
    j.at("ablate_ssmoes").get_to(c.ablate_ssmoes);
    c.lch_cross_uses_mj = j.value("lch_cross_uses_mj", true);
    std::string bb = j.value("backbone", "frozen_orthogonal");
    if (bb == "identity") c.backbone = encoder::BackboneKind::Identity;
    else if (bb == "remote") c.backbone = encoder::BackboneKind::Remote;
    else if (bb == "frozen_orthogonal") c.backbone = encoder::BackboneKind::FrozenOrthogonal;
    else throw std::runtime_error("ModelConfig: unknown backbone kind " + bb);
    c.backbone_url = j.value("backbone_url", std::string{});
    j.at("seed").get_to(c.seed);
}

Model Model::build(const ModelConfig& cfg) {
    if (cfg.n_stocks == 0 || cfg.lookback == 0 || cfg.n_features == 0)
        throw std::runtime_error("Model: data geometry (n_stocks, lookback, n_features) unset");
    if (cfg.top_k < 1 || cfg.top_k > std::min(cfg.n_mkt, cfg.n_ind))
        throw std::runtime_error("Model: top_k must satisfy 1 <= K <= min(N_mkt, N_ind)");
    Model m;
    m.cfg_ = cfg;
    Rng rng(cfg.seed);
    std::size_t nt = cfg.n_stocks * cfg.lookback;
    std::size_t td = cfg.lookback * cfg.d;
    std::size_t d_llm = cfg.effective_d_llm();

    m.enc_ = encoder::make_encoder_params(m.store_, cfg.n_features, cfg.d_news, cfg.d_time,
                                          cfg.d, d_llm, rng);
    encoder::BackboneSpec bb;
    bb.kind = cfg.ablate_llm ? encoder::BackboneKind::Identity : cfg.backbone;
    bb.dim = d_llm;
    bb.seed = cfg.seed ^ 0x5eedbacbULL;
    bb.url = cfg.backbone_url;
    m.backbone_ = encoder::make_backbone(bb);

    if (!cfg.ablate_lch) {
        m.lch_ = hypergraph::make_lch_params(m.store_, nt, cfg.e1, cfg.d, rng);
        m.lch_.cross_uses_mj = cfg.lch_cross_uses_mj;
    }
    m.gch_ = hypergraph::make_gch_params(m.store_, cfg.n_stocks, cfg.e2, td, cfg.heads, rng);
    m.moe_ = ssmoes::make_ssmoes_params(m.store_, cfg.n_stocks, cfg.lookback, d_llm, cfg.d,
                                        cfg.d_m, cfg.d_s, cfg.e2, cfg.n_mkt, cfg.n_ind,
                                        cfg.top_k, cfg.ablate_ssmoes, rng);
    return m;
}

ForwardOut Model::forward(const Tensor& xq, const Tensor& xn, const Tensor& xt) const {
    const auto& c = cfg_;
    std::size_t n = c.n_stocks, t = c.lookback;
    if (xq.shape != std::vector<std::size_t>{n, t, c.n_features})
        throw std::runtime_error("Model::forward: quant input shape " + xq.shape_str());
    if (xn.shape != std::vector<std::size_t>{n, t, c.d_news})
        throw std::runtime_error("Model::forward: news input shape " + xn.shape_str());
    if (xt.shape != std::vector<std::size_t>{t, c.d_time})
        throw std::runtime_error("Model::forward: time input shape " + xt.shape_str());

    auto enc = encoder::project_and_encode(enc_, xq.reshaped({n * t, c.n_features}),
                                           xn.reshaped({n * t, c.d_news}), xt, n);
    ForwardOut out;
    Var zq = enc.zq, zn = enc.zn;  // NT x D
    if (!c.ablate_lch) {
        auto lch = hypergraph::lch_forward(zq, zn, lch_);
        zq = lch.zq;
        zn = lch.zn;
        out.h_local = lch.h;
        out.w_local = lch.edge_weights;
    }
    // Stock-level view: row n holds the full T x D trajectory of stock n.
    std::size_t td = t * c.d;
    auto gch = hypergraph::gch_forward(ad::reshape(zq, {n, td}), ad::reshape(zn, {n, td}), gch_);
    out.h_global = gch.h_global;
    out.w_global = gch.edge_weights;

    Var z_llm = encoder::fuse_and_backbone(enc_, backbone_,
                                           ad::reshape(gch.zq, {n * t, c.d}),
                                           ad::reshape(gch.zn, {n * t, c.d}));
    Var z_llm_flat = ad::reshape(z_llm, {n, t * c.effective_d_llm()});

    auto moe = ssmoes::ssmoes_forward(moe_, z_llm_flat, gch.h_global);
    out.probs = moe.probs;
    out.prob_up = moe.prob_up;
    out.aux_market = moe.aux_market;
    out.aux_industry = moe.aux_industry;
    out.market = std::move(moe.market);
    out.industry = std::move(moe.industry);
    return out;
}

Var Model::loss(const ForwardOut& f, const Tensor& labels, double alpha, double beta) const {
    Var cls = ad::bce_loss(f.prob_up, labels);
    return ad::add(cls, ad::add(ad::scale(f.aux_market, alpha), ad::scale(f.aux_industry, beta)));
}

}  // namespace h3m::model
