#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "h3m/model.hpp"
#include "h3m/ssmoes.hpp"

using namespace h3m;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1, double hi = 1) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("route_topk examples") {
    SUBCASE("spec oracle [2.0, 1.0, 0.5], K=2") {
        ad::Var logits = ad::constant(Tensor::matrix(1, 3, {2.0, 1.0, 0.5}));
        auto r = ssmoes::route_topk(logits, 2);
        CHECK(r.indices == std::vector<std::size_t>{0, 1});
        double z = std::exp(2.0) + std::exp(1.0);
        CHECK(r.gates->value[0] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-9));
        CHECK(r.gates->value[1] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-9));
        CHECK(r.gates->value[0] == doctest::Approx(0.73105857863).epsilon(1e-6));
        CHECK(r.gates->value[2] == 0.0);  // exactly zero
    }
    SUBCASE("K = N_e reduces to full softmax") {
        ad::Var logits = ad::constant(Tensor::matrix(1, 3, {0.3, -1.0, 0.5}));
        auto r = ssmoes::route_topk(logits, 3);
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(r.gates->value[i] == doctest::Approx(r.probs_full->value[i]).epsilon(1e-12));
    }
    SUBCASE("ties break to the lower index") {
        ad::Var logits = ad::constant(Tensor::matrix(1, 3, {1.0, 1.0, 1.0}));
        auto r = ssmoes::route_topk(logits, 2);
        CHECK(r.indices == std::vector<std::size_t>{0, 1});
        CHECK(r.gates->value[0] == doctest::Approx(0.5));
        CHECK(r.gates->value[1] == doctest::Approx(0.5));
        CHECK(r.gates->value[2] == 0.0);
    }
    SUBCASE("gate rows: K nonzeros summing to 1; shift invariance") {
        Rng rng(1);
        for (int trial = 0; trial < 500; ++trial) {
            std::size_t n_e = 2 + rng.below(6);
            std::size_t k = 1 + rng.below(n_e);
            Tensor t = random_tensor({1, n_e}, rng, -5, 5);
            auto r = ssmoes::route_topk(ad::constant(t), k);
            std::size_t nonzero = 0;
            double sum = 0;
            for (double v : r.gates->value.data) {
                if (v != 0.0) {
                    ++nonzero;
                    CHECK(v > 0.0);
                }
                sum += v;
            }
            CHECK(nonzero == k);
            CHECK(std::abs(sum - 1.0) < 1e-9);
            // brute-force top-K with the documented tie-break
            CHECK(r.indices == ad::topk_indices(t.data, k));
            // shifting all logits must not change the selection
            Tensor shifted = t;
            for (auto& v : shifted.data) v += 7.25;
            auto rs = ssmoes::route_topk(ad::constant(shifted), k);
            CHECK(rs.indices == r.indices);
        }
    }
}

TEST_CASE("expert_forward uses the style vector") {
    ad::ParamStore store;
    Rng rng(2);
    SUBCASE("1-dim dot oracle") {
        ssmoes::ExpertParams e;
        e.style = store.add("s", Tensor::matrix(1, 1, {2}));
        e.ffn = ad::make_ffn(store, "e", {2, 1}, rng, ad::Activation::Identity);
        e.ffn.weights[0]->value = Tensor::matrix(2, 1, {1, 1});
        e.ffn.biases[0]->value = Tensor::zeros({1, 1});
        ad::Var out = ssmoes::expert_forward(e, ad::constant(Tensor::matrix(1, 1, {1})));
        CHECK(out->value[0] == doctest::Approx(3.0));
    }
    SUBCASE("distinct styles produce distinct outputs under shared weights") {
        ssmoes::ExpertParams a, b;
        a.style = store.add("sa", Tensor::matrix(1, 2, {1, 0}));
        b.style = store.add("sb", Tensor::matrix(1, 2, {0, 1}));
        a.ffn = ad::make_ffn(store, "fa", {4, 3}, rng);
        b.ffn = ad::make_ffn(store, "fb", {4, 3}, rng);
        for (std::size_t i = 0; i < a.ffn.weights[0]->value.size(); ++i)
            b.ffn.weights[0]->value[i] = a.ffn.weights[0]->value[i];
        for (std::size_t i = 0; i < a.ffn.biases[0]->value.size(); ++i)
            b.ffn.biases[0]->value[i] = a.ffn.biases[0]->value[i];
        ad::Var z = ad::constant(random_tensor({1, 2}, rng));
        ad::Var oa = ssmoes::expert_forward(a, z);
        ad::Var ob = ssmoes::expert_forward(b, z);
        bool differ = false;
        for (std::size_t i = 0; i < 3; ++i)
            if (std::abs(oa->value[i] - ob->value[i]) > 1e-12) differ = true;
        CHECK(differ);
    }
}

TEST_CASE("market_state oracle") {
    // N=2, D=1, D_m=1: W_l=[0.5,0.5], Z=[2;4], W_r=[3] -> m=9
    ad::Var wl = ad::constant(Tensor::matrix(1, 2, {0.5, 0.5}));
    ad::Var z = ad::constant(Tensor::matrix(2, 1, {2, 4}));
    ad::Var wr = ad::constant(Tensor::matrix(1, 1, {3}));
    ad::Var m = ssmoes::market_state(z, wl, wr);
    CHECK(m->value.shape == std::vector<std::size_t>{1, 1});
    CHECK(m->value[0] == doctest::Approx(9.0));
    // one-hot picks a single stock row
    ad::Var onehot = ad::constant(Tensor::matrix(1, 2, {1, 0}));
    CHECK(ssmoes::market_state(z, onehot, wr)->value[0] == doctest::Approx(6.0));
}

TEST_CASE("moe_pool_forward composition") {
    ad::ParamStore store;
    Rng rng(3);
    std::size_t n = 3, d = 4, d_s = 2, ctx = 3, n_e = 4;

    // Build a pool by hand through make_ssmoes-style pieces.
    ssmoes::PoolParams pool;
    pool.top_k = 2;
    for (std::size_t j = 0; j < n_e; ++j) {
        ssmoes::ExpertParams e;
        e.style = store.add("p.s" + std::to_string(j), random_tensor({1, d_s}, rng));
        e.ffn = ad::make_ffn(store, "p.e" + std::to_string(j), {d + d_s, d}, rng);
        pool.experts.push_back(std::move(e));
    }
    pool.w_route = store.add("p.wr", random_tensor({d + ctx, n_e}, rng));
    pool.b_route = store.add("p.br", Tensor::zeros({1, n_e}));

    ad::Var z = ad::constant(random_tensor({n, d}, rng));
    ad::Var shared_ctx = ad::constant(random_tensor({1, ctx}, rng));
    auto out = ssmoes::moe_pool_forward(pool, z, shared_ctx);
    CHECK(out.h->value.shape == std::vector<std::size_t>{n, d});
    CHECK(out.gates->value.shape == std::vector<std::size_t>{n, n_e});
    CHECK(out.probs->value.shape == std::vector<std::size_t>{n, n_e});
    CHECK(out.selected.size() == n);
    for (const auto& sel : out.selected) CHECK(sel.size() == 2);

    SUBCASE("h_i is the gated sum of the selected experts") {
        for (std::size_t i = 0; i < n; ++i) {
            ad::Var zi = ad::select_row(z, i);
            Tensor expect = Tensor::zeros({1, d});
            for (std::size_t j : out.selected[i]) {
                ad::Var e = ssmoes::expert_forward(pool.experts[j], zi);
                double g = out.gates->value.at(i, j);
                for (std::size_t c = 0; c < d; ++c) expect[c] += g * e->value[c];
            }
            for (std::size_t c = 0; c < d; ++c)
                CHECK(out.h->value.at(i, c) == doctest::Approx(expect[c]).epsilon(1e-9));
        }
    }
    SUBCASE("identical experts make h independent of routing") {
        for (std::size_t j = 1; j < n_e; ++j) {
            pool.experts[j].style->value = pool.experts[0].style->value;
            for (std::size_t l = 0; l < pool.experts[0].ffn.weights.size(); ++l) {
                pool.experts[j].ffn.weights[l]->value = pool.experts[0].ffn.weights[l]->value;
                pool.experts[j].ffn.biases[l]->value = pool.experts[0].ffn.biases[l]->value;
            }
        }
        auto same = ssmoes::moe_pool_forward(pool, z, shared_ctx);
        for (std::size_t i = 0; i < n; ++i) {
            ad::Var e0 = ssmoes::expert_forward(pool.experts[0], ad::select_row(z, i));
            for (std::size_t c = 0; c < d; ++c)
                CHECK(same.h->value.at(i, c) == doctest::Approx(e0->value[c]).epsilon(1e-9));
        }
    }
    SUBCASE("per-stock context rows steer routing independently") {
        ad::Var per_stock = ad::constant(random_tensor({n, ctx}, rng, -4, 4));
        auto o2 = ssmoes::moe_pool_forward(pool, z, per_stock);
        CHECK(o2.h->value.shape == std::vector<std::size_t>{n, d});
        CHECK_THROWS(ssmoes::moe_pool_forward(pool, z, ad::constant(random_tensor({2, ctx}, rng))));
    }
}

TEST_CASE("aux balance loss closed forms") {
    ad::ParamStore store;
    Rng rng(4);
    std::size_t n = 8, d = 2, n_e = 4;
    ssmoes::PoolParams pool;
    pool.top_k = 2;
    for (std::size_t j = 0; j < n_e; ++j) {
        ssmoes::ExpertParams e;
        e.style = store.add("a.s" + std::to_string(j), random_tensor({1, 2}, rng));
        e.ffn = ad::make_ffn(store, "a.e" + std::to_string(j), {d + 2, d}, rng);
        pool.experts.push_back(std::move(e));
    }
    std::size_t ctx = 1;
    pool.w_route = store.add("a.wr", Tensor::zeros({d + ctx, n_e}));
    pool.b_route = store.add("a.br", Tensor::zeros({1, n_e}));
    ad::Var context = ad::constant(Tensor::zeros({1, ctx}));

    SUBCASE("uniform logits, N_e=4, K=2 gives exactly 0.5") {
        // all logits equal -> P uniform 0.25; ties send every stock to
        // experts {0, 1} -> f = [1, 1, 0, 0]; sum f*P would be 0.5 as well
        // equal logits: P uniform 0.25 and ties route everyone to {0, 1},
        // so f = [1, 1, 0, 0] and sum f*P = 0.5 — the uniform oracle.
        ad::Var z = ad::constant(Tensor::zeros({n, d}));
        auto out = ssmoes::moe_pool_forward(pool, z, context);
        CHECK(out.aux->value[0] == doctest::Approx(0.5).epsilon(1e-9));
        CHECK(out.routed_fraction[0] == doctest::Approx(1.0));
        CHECK(out.routed_fraction[3] == doctest::Approx(0.0));
    }
    SUBCASE("collapsed routing exceeds the uniform value") {
        // bias drives all mass to experts 0 and 1
        pool.b_route->value = Tensor::matrix(1, 4, {8, 8, -8, -8});
        ad::Var z = ad::constant(random_tensor({n, d}, rng, -0.1, 0.1));
        auto out = ssmoes::moe_pool_forward(pool, z, context);
        CHECK(out.aux->value[0] > 0.5);
        CHECK(out.aux->value[0] == doctest::Approx(1.0).epsilon(1e-3));  // P mass ~1/2 each
    }
    SUBCASE("K = N_e gives loss 1 exactly") {
        pool.top_k = n_e;
        ad::Var z = ad::constant(random_tensor({n, d}, rng));
        auto out = ssmoes::moe_pool_forward(pool, z, context);
        CHECK(out.aux->value[0] == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("ssmoes_forward head probabilities and prob_up") {
    ad::ParamStore store;
    Rng rng(5);
    std::size_t n = 4, t = 2, d_llm = 3, d = 4;
    auto p = ssmoes::make_ssmoes_params(store, n, t, d_llm, d, 2, 2, 3, 3, 3, 2, false, rng);
    ad::Var z = ad::constant(random_tensor({n, t * d_llm}, rng));
    ad::Var h_global = ad::constant(random_tensor({n, 3}, rng, 0, 1));
    auto out = ssmoes::ssmoes_forward(p, z, h_global);
    CHECK(out.probs->value.shape == std::vector<std::size_t>{n, 2});
    CHECK(out.prob_up->value.shape == std::vector<std::size_t>{1, n});
    for (std::size_t i = 0; i < n; ++i) {
        double sum = out.probs->value.at(i, 0) + out.probs->value.at(i, 1);
        CHECK(std::abs(sum - 1.0) < 1e-9);
        CHECK(out.prob_up->value[i] == doctest::Approx(out.probs->value.at(i, 1)));
        CHECK(out.prob_up->value[i] >= 0.0);
        CHECK(out.prob_up->value[i] <= 1.0);
    }
    CHECK(out.aux_market->value.is_scalar());
    CHECK(out.aux_industry->value.is_scalar());
}

TEST_CASE("w/o SSMoEs ablation uses a dense stack with zero aux") {
    ad::ParamStore store;
    Rng rng(6);
    std::size_t n = 3, t = 2, d_llm = 3, d = 4;
    auto p = ssmoes::make_ssmoes_params(store, n, t, d_llm, d, 2, 2, 3, 3, 3, 2, true, rng);
    CHECK(p.ablated);
    ad::Var z = ad::constant(random_tensor({n, t * d_llm}, rng));
    ad::Var h_global = ad::constant(random_tensor({n, 3}, rng, 0, 1));
    auto out = ssmoes::ssmoes_forward(p, z, h_global);
    CHECK(out.probs->value.shape == std::vector<std::size_t>{n, 2});
    CHECK(out.aux_market->value[0] == 0.0);
    CHECK(out.aux_industry->value[0] == 0.0);
    CHECK(out.market.selected.empty());
    // no expert parameters were constructed
    CHECK_THROWS(store.find("ssmoes.market.expert0.style"));
}

TEST_CASE("gradients flow through sparse routing") {
    ad::ParamStore store;
    Rng rng(7);
    std::size_t n = 3, t = 2, d_llm = 3, d = 4;
    auto p = ssmoes::make_ssmoes_params(store, n, t, d_llm, d, 2, 2, 3, 3, 4, 2, false, rng);
    Tensor z = random_tensor({n, t * d_llm}, rng);
    Tensor hg = random_tensor({n, 3}, rng, 0, 1);
    auto loss = [&] {
        auto out = ssmoes::ssmoes_forward(p, ad::constant(z), ad::constant(hg));
        return ad::add(ad::sum_all(ad::mul(out.prob_up, out.prob_up)),
                       ad::add(out.aux_market, out.aux_industry));
    };
    std::vector<ad::Var> params = {p.proj_flat, p.w_left, p.w_right,
                                   p.market.w_route, p.industry.w_route,
                                   p.market.experts[0].style, p.market.experts[0].ffn.weights[0],
                                   p.w_mkt, p.w_ind, p.head.weights[0]};
    CHECK(ad::grad_check(loss, params) < 1e-4);
}
