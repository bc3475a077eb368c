#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "h3m/trainer.hpp"

using namespace h3m;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_model_config(std::size_t n, std::size_t t, std::size_t f,
                                     std::uint64_t seed) {
    model::ModelConfig c;
    c.n_stocks = n;
    c.lookback = t;
    c.n_features = f;
    c.d_news = 3;
    c.d_time = 3;
    c.d = 6;
    c.d_llm = 8;
    c.e1 = 4;
    c.e2 = 4;
    c.n_mkt = 3;
    c.n_ind = 3;
    c.top_k = 2;
    c.d_m = 4;
    c.d_s = 4;
    c.heads = 2;
    c.seed = seed;
    return c;
}

// Panel whose label-by-construction is the sign of feature 0 on the
// window-end day; feature 0 is persistent so the window carries the signal.
struct Synthetic {
    dataio::StockPanel panel;
    dataio::DatasetSplit split;
    Tensor labels;
};

Synthetic make_synthetic(std::size_t n, std::size_t t_total, std::size_t f,
                         std::size_t lookback, std::size_t horizon, std::uint64_t seed) {
    Synthetic s;
    Rng rng(seed);
    auto& p = s.panel;
    for (std::size_t i = 0; i < n; ++i) p.tickers.push_back("S" + std::to_string(i));
    for (std::size_t t = 0; t < t_total; ++t) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "2021-%02zu-%02zu", 1 + t / 28, 1 + t % 28);
        p.days.push_back(buf);
    }
    p.feature_names.assign(f, "");
    for (std::size_t j = 0; j < f; ++j) p.feature_names[j] = "f" + std::to_string(j);
    p.features = Tensor::zeros({n, t_total, f});
    p.closes = Tensor::zeros({n, t_total});
    p.raw = Tensor::zeros({n, t_total, 5});
    p.news = Tensor::zeros({n, t_total, 3});
    p.time_emb = Tensor::zeros({t_total, 3});
    for (auto& v : p.news.data) v = rng.uniform(-1, 1);
    for (auto& v : p.time_emb.data) v = rng.uniform(-1, 1);
    for (std::size_t i = 0; i < n; ++i) {
        double drift = rng.uniform(-1, 1);
        for (std::size_t t = 0; t < t_total; ++t) {
            // slowly flipping, strongly signed driver feature
            if (t % 7 == 0) drift = rng.uniform(-1, 1);
            p.features.data[(i * t_total + t) * f + 0] = drift > 0 ? 1.0 : -1.0;
            for (std::size_t j = 1; j < f; ++j)
                p.features.data[(i * t_total + t) * f + j] = rng.uniform(-0.5, 0.5);
            p.closes.data[i * t_total + t] = 100 + rng.uniform(-1, 1);
        }
    }
    s.split = dataio::split_dataset(p, lookback, horizon);
    s.labels = Tensor::zeros({n, t_total});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < t_total; ++t)
            s.labels.at(i, t) = p.features.data[(i * t_total + t) * f] > 0 ? 1.0 : 0.0;
    return s;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    double base = 1e-3;
    // warmup boundary hits the base rate exactly
    CHECK(trainer::lr_at(10, 100, 0.10, base) == doctest::Approx(base));
    // linear ramp up
    CHECK(trainer::lr_at(5, 100, 0.10, base) == doctest::Approx(base * 0.5));
    // linear decay to zero at the final step
    CHECK(trainer::lr_at(100, 100, 0.10, base) == doctest::Approx(0.0));
    CHECK(trainer::lr_at(55, 100, 0.10, base) == doctest::Approx(base * 0.5));
    // continuity around the peak
    double before = trainer::lr_at(9, 100, 0.10, base);
    double at = trainer::lr_at(10, 100, 0.10, base);
    double after = trainer::lr_at(11, 100, 0.10, base);
    CHECK(before < at);
    CHECK(after < at);
    CHECK(at - before == doctest::Approx(base / 10).epsilon(1e-9));
    CHECK_THROWS(trainer::lr_at(0, 100, 0.1, base));
    CHECK_THROWS(trainer::lr_at(101, 100, 0.1, base));
}

TEST_CASE("AdamW update rule") {
    ad::ParamStore store;
    ad::Var w = store.add("w", Tensor::matrix(1, 1, {1.0}));
    trainer::TrainConfig cfg;
    cfg.weight_decay = 0.0;

    SUBCASE("zero gradient, zero decay leaves the weight unchanged") {
        trainer::AdamW opt(store, cfg);
        w->grad = Tensor::zeros({1, 1});
        opt.step(store, 0.1);
        CHECK(w->value[0] == 1.0);
    }
    SUBCASE("single-scalar hand oracle") {
        trainer::AdamW opt(store, cfg);
        w->grad = Tensor::matrix(1, 1, {2.0});
        opt.step(store, 0.1);
        // first step: mhat = g, vhat = g^2 -> w -= lr * g/(|g| + eps)
        CHECK(w->value[0] == doctest::Approx(1.0 - 0.1 * (2.0 / (2.0 + 1e-8))).epsilon(1e-12));
    }
    SUBCASE("decoupled weight decay shrinks without gradient") {
        cfg.weight_decay = 0.05;
        trainer::AdamW opt(store, cfg);
        w->grad = Tensor::zeros({1, 1});
        opt.step(store, 0.1);
        CHECK(w->value[0] == doctest::Approx(1.0 - 0.1 * 0.05).epsilon(1e-12));
    }
    SUBCASE("non-finite gradient aborts") {
        trainer::AdamW opt(store, cfg);
        w->grad = Tensor::matrix(1, 1, {std::nan("")});
        CHECK_THROWS_WITH_AS(opt.step(store, 0.1), doctest::Contains("non-finite"),
                             std::runtime_error);
    }
}

TEST_CASE("classification and total loss examples") {
    // y=1, p=0.5 -> ln 2
    ad::Var p = ad::constant(Tensor::matrix(1, 1, {0.5}));
    ad::Var l = ad::bce_loss(p, Tensor::matrix(1, 1, {1}));
    CHECK(l->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // p=0.5 for all, any labels -> ln 2
    ad::Var p4 = ad::constant(Tensor::full({1, 4}, 0.5));
    ad::Var l4 = ad::bce_loss(p4, Tensor::matrix(1, 4, {1, 0, 0, 1}));
    CHECK(l4->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // near-perfect prediction is near zero
    ad::Var lp = ad::bce_loss(ad::constant(Tensor::matrix(1, 1, {1.0 - 1e-7})),
                              Tensor::matrix(1, 1, {1}));
    CHECK(lp->value[0] < 2e-7);

    // total = cls + alpha*aux_mkt + beta*aux_ind: 0.7 + 0.1*0.5 + 0.1*0.5 = 0.8
    auto cfg = tiny_model_config(2, 2, 3, 1);
    auto m = model::Model::build(cfg);
    model::ForwardOut f;
    f.prob_up = ad::constant(Tensor::matrix(1, 2, {0.5, 0.5}));
    f.aux_market = ad::constant(Tensor::scalar(0.5));
    f.aux_industry = ad::constant(Tensor::scalar(0.5));
    ad::Var total = m.loss(f, Tensor::matrix(1, 2, {1, 0}), 0.1, 0.1);
    CHECK(total->value[0] == doctest::Approx(std::log(2.0) + 0.1).epsilon(1e-12));
    ad::Var cls_only = m.loss(f, Tensor::matrix(1, 2, {1, 0}), 0.0, 0.0);
    CHECK(cls_only->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("window enumeration and extraction") {
    auto s = make_synthetic(3, 80, 4, 5, 2, 11);
    auto ends = trainer::window_ends(s.split, 0, 5, 2);
    REQUIRE(!ends.empty());
    CHECK(ends.front() == 4);  // first full window
    CHECK(ends.back() + 2 < s.split.train_end);  // label day stays inside

    auto b = trainer::make_window(s.panel, s.labels, ends.front(), 5);
    CHECK(b.xq.shape == std::vector<std::size_t>{3, 5, 4});
    CHECK(b.xn.shape == std::vector<std::size_t>{3, 5, 3});
    CHECK(b.xt.shape == std::vector<std::size_t>{5, 3});
    CHECK(b.labels.shape == std::vector<std::size_t>{1, 3});
    // window content matches the panel slice
    CHECK(b.xq.data[0] == s.panel.features.data[0]);
    CHECK(b.labels[1] == s.labels.at(1, ends.front()));
    CHECK_THROWS(trainer::make_window(s.panel, s.labels, 2, 5));
}

TEST_CASE("fit is deterministic and learns a separable signal") {
    auto s = make_synthetic(4, 70, 4, 4, 2, 42);
    auto cfg = tiny_model_config(4, 4, 4, 7);
    trainer::TrainConfig tc;
    tc.epochs = 12;
    tc.learning_rate = 3e-3;
    tc.lookback = 4;
    tc.horizon = 2;
    tc.seed = 7;

    auto m1 = model::Model::build(cfg);
    auto r1 = trainer::fit(m1, s.panel, s.split, s.labels, tc);
    auto m2 = model::Model::build(cfg);
    auto r2 = trainer::fit(m2, s.panel, s.split, s.labels, tc);
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t e = 0; e < r1.log.size(); ++e) {
        CHECK(r1.log[e].train_loss == r2.log[e].train_loss);  // bit-identical
        CHECK(r1.log[e].val_accuracy == r2.log[e].val_accuracy);
    }

    // the separable driver feature should be learnable quickly
    auto train_ends = trainer::window_ends(s.split, 0, tc.lookback, tc.horizon);
    double acc = trainer::evaluate_accuracy(m1, s.panel, s.labels, train_ends, tc.lookback);
    CHECK(acc > 0.9);

    // aux components: zero when ablated, positive otherwise
    CHECK(r1.log.back().train_aux_market > 0.0);
    auto cfg_ab = cfg;
    cfg_ab.ablate_ssmoes = true;
    auto ma = model::Model::build(cfg_ab);
    trainer::TrainConfig tca = tc;
    tca.epochs = 1;
    auto ra = trainer::fit(ma, s.panel, s.split, s.labels, tca);
    CHECK(ra.log.back().train_aux_market == 0.0);
    CHECK(ra.log.back().train_aux_industry == 0.0);
}

TEST_CASE("checkpoint round trip is bit-identical") {
    auto s = make_synthetic(3, 60, 4, 4, 2, 5);
    auto cfg = tiny_model_config(3, 4, 4, 3);
    auto m = model::Model::build(cfg);
    trainer::TrainConfig tc;
    tc.lookback = 4;
    tc.horizon = 2;
    tc.epochs = 2;
    auto r = trainer::fit(m, s.panel, s.split, s.labels, tc);
    (void)r;

    std::string dir = (fs::temp_directory_path() / "h3m_ckpt_test").string();
    fs::remove_all(dir);
    trainer::save_checkpoint(dir, m, tc, 42);
    auto ck = trainer::load_checkpoint(dir);
    CHECK(ck.step == 42);
    CHECK(ck.train_config.lookback == 4);
    CHECK(ck.model.config().seed == cfg.seed);

    auto b = trainer::make_window(s.panel, s.labels, 10, 4);
    auto out_a = m.forward(b.xq, b.xn, b.xt);
    auto out_b = ck.model.forward(b.xq, b.xn, b.xt);
    REQUIRE(out_a.prob_up->value.size() == out_b.prob_up->value.size());
    for (std::size_t i = 0; i < out_a.prob_up->value.size(); ++i)
        CHECK(out_a.prob_up->value[i] == out_b.prob_up->value[i]);  // exact

    // JSONL training log artifact
    std::string log_path = (fs::path(dir) / "log.jsonl").string();
    auto m3 = model::Model::build(cfg);
    trainer::fit(m3, s.panel, s.split, s.labels, tc, "", log_path);
    std::ifstream in(log_path);
    REQUIRE(in.good());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("train_loss"));
        CHECK(j.contains("val_accuracy"));
        ++lines;
    }
    CHECK(lines == tc.epochs);
    fs::remove_all(dir);
}

TEST_CASE("full-model gradient check at spec scale") {
    // N=4, T=3, D=8, D_LLM=16, E1=E2=4, N_mkt=3, N_ind=4, K=2
    model::ModelConfig cfg;
    cfg.n_stocks = 4;
    cfg.lookback = 3;
    cfg.n_features = 5;
    cfg.d_news = 4;
    cfg.d_time = 4;
    cfg.d = 8;
    cfg.d_llm = 16;
    cfg.e1 = 4;
    cfg.e2 = 4;
    cfg.n_mkt = 3;
    cfg.n_ind = 4;
    cfg.top_k = 2;
    cfg.d_m = 4;
    cfg.d_s = 4;
    cfg.heads = 2;
    cfg.seed = 17;
    auto m = model::Model::build(cfg);
    Rng rng(23);
    Tensor xq = Tensor::zeros({4, 3, 5}), xn = Tensor::zeros({4, 3, 4}), xt = Tensor::zeros({3, 4});
    for (auto& v : xq.data) v = rng.uniform(-1, 1);
    for (auto& v : xn.data) v = rng.uniform(-1, 1);
    for (auto& v : xt.data) v = rng.uniform(-1, 1);
    Tensor labels = Tensor::matrix(1, 4, {1, 0, 1, 0});
    auto loss = [&] {
        auto out = m.forward(xq, xn, xt);
        return m.loss(out, labels, 0.1, 0.1);
    };
    // a representative subset of parameters from every stage keeps this
    // fast; the acceptance suite sweeps all of them
    std::vector<ad::Var> params = {
        m.params().find("encoder.proj_quant.w0"),
        m.params().find("encoder.fusion.w0"),
        m.params().find("lch.sub_qn.w0"),
        m.params().find("lch.theta_quant"),
        m.params().find("gch.attn.wq"),
        m.params().find("gch.fusion.w0"),
        m.params().find("ssmoes.proj_flat"),
        m.params().find("ssmoes.market.expert0.ffn.w0"),
        m.params().find("ssmoes.industry.w_route"),
        m.params().find("ssmoes.head.w0"),
    };
    CHECK(ad::grad_check(loss, params) < 1e-4);
}
