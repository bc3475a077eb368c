#include "h3m/encoder.hpp"

#include <cmath>

#include <httplib.h>
#include <json.hpp>

namespace h3m::encoder {

Tensor orthogonal_matrix(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = Tensor::zeros({dim, dim});
    for (double& v : a.data) v = rng.gaussian();
    // Modified Gram-Schmidt on columns. The R diagonal is the positive
    // column norm, so the result is unique for a given seed.
    Tensor q = Tensor::zeros({dim, dim});
    for (std::size_t j = 0; j < dim; ++j) {
        std::vector<double> col(dim);
        for (std::size_t i = 0; i < dim; ++i) col[i] = a.at(i, j);
        for (std::size_t k = 0; k < j; ++k) {
            double dot = 0.0;
            for (std::size_t i = 0; i < dim; ++i) dot += q.at(i, k) * col[i];
            for (std::size_t i = 0; i < dim; ++i) col[i] -= dot * q.at(i, k);
        }
        double norm = 0.0;
        for (double v : col) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw std::runtime_error("orthogonal_matrix: rank-deficient draw");
        for (std::size_t i = 0; i < dim; ++i) q.at(i, j) = col[i] / norm;
    }
    return q;
}

namespace {

ad::Var remote_backbone_apply(const BackboneSpec& spec, const ad::Var& x) {
    auto pos = x->value.cols();
    if (pos != spec.dim)
        throw std::runtime_error("remote backbone: input dim " + std::to_string(pos) +
                                 " != " + std::to_string(spec.dim));
    std::vector<std::vector<double>> rows(x->value.rows());
    for (std::size_t i = 0; i < x->value.rows(); ++i) {
        rows[i].resize(spec.dim);
        for (std::size_t j = 0; j < spec.dim; ++j) rows[i][j] = x->value.at(i, j);
    }
    nlohmann::json req = {{"embeddings", rows}, {"dim", spec.dim}};
    auto slash = spec.url.find('/', spec.url.find("://") == std::string::npos
                                        ? 0
                                        : spec.url.find("://") + 3);
    std::string host = slash == std::string::npos ? spec.url : spec.url.substr(0, slash);
    std::string path = slash == std::string::npos ? "/" : spec.url.substr(slash);
    std::string last_err;
    for (int attempt = 0; attempt <= spec.retries; ++attempt) {
        httplib::Client cli(host);
        cli.set_read_timeout(30, 0);
        auto res = cli.Post(path, req.dump(), "application/json");
        if (!res || res->status != 200) {
            last_err = res ? "HTTP " + std::to_string(res->status) : "connection failed";
            continue;
        }
        nlohmann::json body = nlohmann::json::parse(res->body, nullptr, false);
        if (body.is_discarded() || !body.contains("outputs")) {
            last_err = "malformed response body";
            continue;
        }
        auto outputs = body["outputs"].get<std::vector<std::vector<double>>>();
        if (outputs.size() != x->value.rows())
            throw std::runtime_error("remote backbone: row count mismatch in response");
        Tensor out = Tensor::zeros({x->value.rows(), spec.dim});
        for (std::size_t i = 0; i < outputs.size(); ++i) {
            if (outputs[i].size() != spec.dim)
                throw std::runtime_error("remote backbone: dimension mismatch in response row " +
                                         std::to_string(i));
            for (std::size_t j = 0; j < spec.dim; ++j) out.at(i, j) = outputs[i][j];
        }
        // Forward-only: the remote transform exposes no Jacobian, so a
        // backward pass through it is an error rather than a silent zero.
        auto node = ad::constant(std::move(out));
        node->parents = {x};
        node->backward_fn = [](ad::Node&) {
            throw std::runtime_error("remote backbone cannot propagate gradients; train with an "
                                     "identity or frozen_orthogonal backbone");
        };
        return node;
    }
    throw std::runtime_error("remote backbone request to " + spec.url + " failed: " + last_err);
}

}  // namespace

ad::Var Backbone::apply(const ad::Var& x) const {
    switch (spec.kind) {
        case BackboneKind::Identity:
            return x;
        case BackboneKind::FrozenOrthogonal:
            return ad::matmul_const(x, matrix);
        case BackboneKind::Remote:
            return remote_backbone_apply(spec, x);
    }
    throw std::runtime_error("Backbone: unknown kind");
}

Backbone make_backbone(const BackboneSpec& spec) {
    Backbone b;
    b.spec = spec;
    if (spec.kind == BackboneKind::FrozenOrthogonal)
        b.matrix = orthogonal_matrix(spec.dim, spec.seed);
    return b;
}

EncoderParams make_encoder_params(ad::ParamStore& store, std::size_t f, std::size_t d_news,
                                  std::size_t d_time, std::size_t d, std::size_t d_llm, Rng& rng) {
    EncoderParams p;
    p.proj_quant = ad::make_ffn(store, "encoder.proj_quant", {f, d}, rng);
    p.proj_news = ad::make_ffn(store, "encoder.proj_news", {d_news, d}, rng);
    p.proj_time = ad::make_ffn(store, "encoder.proj_time", {d_time, d}, rng);
    p.fusion = ad::make_ffn(store, "encoder.fusion", {2 * d, d_llm}, rng);
    return p;
}

Encoded project_and_encode(const EncoderParams& p, const Tensor& x_quant, const Tensor& x_news,
                           const Tensor& x_time, std::size_t n_stocks) {
    ad::Var hq = p.proj_quant.apply(ad::constant(x_quant));
    ad::Var hn = p.proj_news.apply(ad::constant(x_news));
    ad::Var ht = p.proj_time.apply(ad::constant(x_time));
    return Encoded{ad::add_time_broadcast(hq, ht, n_stocks), hn};
}

ad::Var fuse_and_backbone(const EncoderParams& p, const Backbone& bb,
                          const ad::Var& zq, const ad::Var& zn) {
    ad::Var fused = p.fusion.apply(ad::concat_cols({zq, zn}));
    return bb.apply(fused);
}

}  // namespace h3m::encoder
