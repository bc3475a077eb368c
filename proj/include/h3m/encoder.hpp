#pragma once

#include <cstdint>
#include <string>

#include "h3m/autodiff.hpp"

namespace h3m::encoder {

enum class BackboneKind { Identity, FrozenOrthogonal, Remote };

struct BackboneSpec {
    BackboneKind kind = BackboneKind::FrozenOrthogonal;
    std::size_t dim = 2048;
    std::uint64_t seed = 0;
    std::string url;  // remote kind
    int retries = 2;
};

// Fixed non-trainable transform standing in for the pretrained semantic
// backbone. The orthogonal variant is built once from the seed and never
// changes; it contributes no parameters and no gradients of its own.
struct Backbone {
    BackboneSpec spec;
    Tensor matrix;  // dim x dim for FrozenOrthogonal

    ad::Var apply(const ad::Var& x) const;  // x: rows x dim
};

Backbone make_backbone(const BackboneSpec& spec);

// Orthogonal matrix from QR of a seeded Gaussian, R diagonal made positive
// so the same seed is bit-reproducible.
Tensor orthogonal_matrix(std::size_t dim, std::uint64_t seed);

struct EncoderParams {
    ad::Ffn proj_quant;  // F -> D
    ad::Ffn proj_news;   // D_news -> D
    ad::Ffn proj_time;   // D_time -> D
    ad::Ffn fusion;      // 2D -> D_LLM
};

EncoderParams make_encoder_params(ad::ParamStore& store, std::size_t f, std::size_t d_news,
                                  std::size_t d_time, std::size_t d, std::size_t d_llm, Rng& rng);

struct Encoded {
    ad::Var zq, zn;  // (N*T) x D each
};

// Projects each modality into the shared space and broadcast-adds the
// temporal encoding onto the quantitative stream.
Encoded project_and_encode(const EncoderParams& p, const Tensor& x_quant /* (N*T) x F */,
                           const Tensor& x_news /* (N*T) x D_news */,
                           const Tensor& x_time /* T x D_time */, std::size_t n_stocks);

// Concatenates both streams, applies the fusion map into the backbone
// input space, then the frozen backbone.
ad::Var fuse_and_backbone(const EncoderParams& p, const Backbone& bb,
                          const ad::Var& zq, const ad::Var& zn);

}  // namespace h3m::encoder
