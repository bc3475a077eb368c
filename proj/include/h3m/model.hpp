#pragma once

#include <cstdint>
#include <string>

#include "h3m/encoder.hpp"
#include "h3m/hypergraph.hpp"
#include "h3m/ssmoes.hpp"

#include <json.hpp>

namespace h3m::model {

struct ModelConfig {
    // Data geometry (fixed at construction; the instance-axis FFNs bake
    // N and T into their dimensions).
    std::size_t n_stocks = 0;
    std::size_t lookback = 20;   // T
    std::size_t n_features = 20; // F
    std::size_t d_news = 2048;
    std::size_t d_time = 2048;
    // Model widths.
    std::size_t d = 256;
    std::size_t d_llm = 2048;
    std::size_t e1 = 64, e2 = 64;
    std::size_t n_mkt = 3, n_ind = 10;
    std::size_t top_k = 2;
    std::size_t d_m = 16, d_s = 16;
    std::size_t heads = 2;
    // Ablations.
    bool ablate_lch = false;
    bool ablate_llm = false;
    bool ablate_ssmoes = false;
    bool lch_cross_uses_mj = true;
    // Backbone.
    encoder::BackboneKind backbone = encoder::BackboneKind::FrozenOrthogonal;
    std::string backbone_url;
    std::uint64_t seed = 42;

    // With the LLM layer ablated the fusion map targets D directly and the
    // backbone degenerates to identity.
    std::size_t effective_d_llm() const { return ablate_llm ? d : d_llm; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ForwardOut {
    ad::Var probs;    // N x 2
    ad::Var prob_up;  // 1 x N
    ad::Var aux_market, aux_industry;
    ad::Var h_local, w_local;    // null when LCH ablated
    ad::Var h_global, w_global;
    ssmoes::MoEOutput market, industry;  // empty when SSMoEs ablated
};

class Model {
public:
    static Model build(const ModelConfig& cfg);

    // xq: N x T x F, xn: N x T x D_news, xt: T x D_time.
    ForwardOut forward(const Tensor& xq, const Tensor& xn, const Tensor& xt) const;

    // cls + alpha * aux_market + beta * aux_industry
    ad::Var loss(const ForwardOut& f, const Tensor& labels /* 1 x N */,
                 double alpha, double beta) const;

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return store_; }
    const ad::ParamStore& params() const { return store_; }

private:
    ModelConfig cfg_;
    ad::ParamStore store_;
    encoder::EncoderParams enc_;
    encoder::Backbone backbone_;
    hypergraph::LchParams lch_;
    hypergraph::GchParams gch_;
    ssmoes::SsmoesParams moe_;
};

}  // namespace h3m::model
