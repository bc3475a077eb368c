#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "h3m/rng.hpp"
#include "h3m/tensor.hpp"

namespace h3m::ad {

struct Node;
using Var = std::shared_ptr<Node>;

// One vertex of the recorded operation graph. Creation order (id) is a
// valid topological order, so backward just walks ids descending.
struct Node {
    Tensor value;
    Tensor grad;
    std::uint64_t id = 0;
    std::string name;  // non-empty for parameters
    std::vector<Var> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_fn;
};

Var constant(Tensor value);
Var param(Tensor value, std::string name);

// Runs reverse-mode accumulation from a scalar loss. Grads of every node
// reachable from `loss` (parameters included) are zeroed first.
void backward(const Var& loss);

// ---- elementwise / structural ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var gelu(const Var& a);

Var matmul(const Var& a, const Var& b);
Var matmul_const(const Var& a, const Tensor& b);  // b fixed, no grad
Var transpose(const Var& a);
Var reshape(const Var& a, std::vector<std::size_t> shape);

Var concat_cols(const std::vector<Var>& xs);
Var slice_cols(const Var& a, std::size_t start, std::size_t len);
Var stack_rows(const std::vector<Var>& rows);  // each 1 x c
Var select_row(const Var& a, std::size_t r);   // 1 x c
Var gather(const Var& a, const std::vector<std::size_t>& idx);          // 1 x k from 1 x n
Var scatter(const Var& a, const std::vector<std::size_t>& idx, std::size_t n);  // 1 x n

Var softmax_rows(const Var& a);
Var softmax_cols(const Var& a);
Var zscore_cols(const Var& a);

Var col_scale(const Var& h, const Var& w);            // scale column e by w[e]
Var add_row_broadcast(const Var& a, const Var& b);    // b is 1 x c
Var add_time_broadcast(const Var& a, const Var& bt, std::size_t n_stocks);
Var mean_rows(const Var& a);                          // column means, 1 x c
Var sum_all(const Var& a);                            // scalar
Var dot_const(const Var& a, const Tensor& w);         // scalar

// Mean-normalized average pairwise Jensen-Shannon score per column of a
// column-stochastic matrix; 1 x E output with mean 1.
Var jsd_edge_weights(const Var& h);

// Mean binary cross-entropy of up-probabilities against 0/1 labels,
// probabilities clamped to [1e-7, 1-1e-7].
Var bce_loss(const Var& probs_up, const Tensor& labels);

// ---- feed-forward stacks ----
enum class Activation { Gelu, Identity };

struct Ffn {
    std::vector<Var> weights;  // layer l: in_l x out_l
    std::vector<Var> biases;   // layer l: 1 x out_l (empty Var if bias-free)
    Activation act = Activation::Gelu;
    bool activate_last = false;

    Var apply(const Var& x) const;  // x: rows x in_0
    std::size_t in_dim() const { return weights.front()->value.rows(); }
    std::size_t out_dim() const { return weights.back()->value.cols(); }
};

struct ParamStore;
Ffn make_ffn(ParamStore& store, const std::string& prefix,
             const std::vector<std::size_t>& dims, Rng& rng,
             Activation act = Activation::Gelu, bool bias = true);

// Named parameter registry; names unique.
struct ParamStore {
    std::vector<Var> params;

    Var add(const std::string& name, Tensor value);
    Var find(const std::string& name) const;  // throws if absent
    std::size_t scalar_count() const;
};

// ---- multi-head attention ----
struct AttentionParams {
    Var wq, wk, wv, wo;  // d_model x d_model
    std::size_t heads = 1;
};

AttentionParams make_attention(ParamStore& store, const std::string& prefix,
                               std::size_t d_model, std::size_t heads, Rng& rng);

// Scaled dot-product attention; returns (output after wo, head-averaged
// row-stochastic weight matrix).
std::pair<Var, Var> mh_attention(const Var& q, const Var& k, const Var& v,
                                 const AttentionParams& p);
// Weights-only variant (no output projection involved).
Var mh_attention_weights(const Var& q, const Var& k, const Var& v,
                         const Var& wq, const Var& wk, const Var& wv,
                         std::size_t heads);

// ---- verification ----
// Max relative error |a-b|/max(1e-8,|a|+|b|) between tape gradients and
// central finite differences over every entry of every listed parameter;
// absolute differences under 1e-7 (below FD resolution for an O(1) loss)
// count as agreement. Throws if two forward evaluations of loss_fn disagree.
double grad_check(const std::function<Var()>& loss_fn,
                  const std::vector<Var>& params, double epsilon = 1e-5);

// Indices of the K largest entries, ties broken by lower index.
std::vector<std::size_t> topk_indices(const std::vector<double>& v, std::size_t k);

}  // namespace h3m::ad
