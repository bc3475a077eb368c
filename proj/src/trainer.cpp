#include "h3m/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace h3m::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const TrainConfig& c) {
    j = json{{"epochs", c.epochs},
             {"learning_rate", c.learning_rate},
             {"weight_decay", c.weight_decay},
             {"warmup_fraction", c.warmup_fraction},
             {"alpha", c.alpha},
             {"beta", c.beta},
             {"lookback", c.lookback},
             {"horizon", c.horizon},
             {"seed", c.seed},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"eps", c.eps}};
}

void from_json(const json& j, TrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.lookback = j.value("lookback", c.lookback);
    c.horizon = j.value("horizon", c.horizon);
    c.seed = j.value("seed", c.seed);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
}

double lr_at(std::size_t step, std::size_t total_steps, double warmup_fraction, double base) {
    if (step < 1 || step > total_steps) throw std::runtime_error("lr_at: step out of range");
    double total = static_cast<double>(total_steps);
    double warmup = std::max(1.0, std::floor(warmup_fraction * total));
    double s = static_cast<double>(step);
    double up = s / warmup;
    if (total <= warmup) return base * std::min(up, 1.0);
    double down = (total - s) / (total - warmup);
    return base * std::min(up, down);
}

AdamW::AdamW(const ad::ParamStore& store, const TrainConfig& cfg) : cfg_(cfg) {
    m_.reserve(store.params.size());
    v_.reserve(store.params.size());
    for (const auto& p : store.params) {
        m_.push_back(Tensor::zeros(p->value.shape));
        v_.push_back(Tensor::zeros(p->value.shape));
    }
}

void AdamW::step(ad::ParamStore& store, double lr) {
    if (store.params.size() != m_.size())
        throw std::runtime_error("AdamW::step: parameter count changed since construction");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.params.size(); ++i) {
        auto& p = *store.params[i];
        if (p.grad.size() != p.value.size())
            throw std::runtime_error("AdamW::step: missing gradient for " + p.name);
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            double g = p.grad[k];
            if (!std::isfinite(g))
                throw std::runtime_error("AdamW::step: non-finite gradient in " + p.name);
            m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
            v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
            double mhat = m_[i][k] / bc1;
            double vhat = v_[i][k] / bc2;
            // Decoupled decay: shrink the weight directly, not through g.
            p.value[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps)
                                + cfg_.weight_decay * p.value[k]);
        }
    }
}

std::vector<std::size_t> window_ends(const dataio::DatasetSplit& split, int which,
                                     std::size_t lookback, std::size_t horizon) {
    std::size_t lo = split.begin(which), hi = split.end(which);
    std::vector<std::size_t> ends;
    if (hi < lo + lookback + horizon) return ends;
    for (std::size_t t = lo + lookback - 1; t + horizon < hi; ++t) ends.push_back(t);
    return ends;
}

WindowBatch make_window(const dataio::StockPanel& panel, const Tensor& labels,
                        std::size_t t_end, std::size_t lookback) {
    std::size_t n = panel.n_stocks(), f = panel.n_features();
    std::size_t d_news = panel.news.shape.at(2), d_time = panel.time_emb.cols();
    if (t_end + 1 < lookback || t_end >= panel.n_days())
        throw std::runtime_error("make_window: window end out of range");
    std::size_t t0 = t_end + 1 - lookback;
    WindowBatch b;
    b.xq = Tensor::zeros({n, lookback, f});
    b.xn = Tensor::zeros({n, lookback, d_news});
    b.xt = Tensor::zeros({lookback, d_time});
    b.labels = Tensor::zeros({1, n});
    std::size_t t_total = panel.n_days();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < lookback; ++t) {
            for (std::size_t k = 0; k < f; ++k)
                b.xq.data[(i * lookback + t) * f + k] =
                    panel.features.data[(i * t_total + t0 + t) * f + k];
            for (std::size_t k = 0; k < d_news; ++k)
                b.xn.data[(i * lookback + t) * d_news + k] =
                    panel.news.data[(i * t_total + t0 + t) * d_news + k];
        }
        b.labels[i] = labels.at(i, t_end);
    }
    for (std::size_t t = 0; t < lookback; ++t)
        for (std::size_t k = 0; k < d_time; ++k)
            b.xt.at(t, k) = panel.time_emb.at(t0 + t, k);
    return b;
}

double evaluate_accuracy(const model::Model& m, const dataio::StockPanel& panel,
                         const Tensor& labels, const std::vector<std::size_t>& ends,
                         std::size_t lookback) {
    if (ends.empty()) throw std::runtime_error("evaluate_accuracy: no windows");
    std::size_t correct = 0, total = 0;
    for (std::size_t t_end : ends) {
        WindowBatch b = make_window(panel, labels, t_end, lookback);
        auto out = m.forward(b.xq, b.xn, b.xt);
        const Tensor& p = out.prob_up->value;
        for (std::size_t i = 0; i < p.size(); ++i) {
            double pred = p[i] > 0.5 ? 1.0 : 0.0;
            if (pred == b.labels[i]) ++correct;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

FitResult fit(model::Model& m, const dataio::StockPanel& panel,
              const dataio::DatasetSplit& split, const Tensor& labels,
              const TrainConfig& cfg, const std::string& checkpoint_dir,
              const std::string& log_path) {
    auto train_ends = window_ends(split, 0, cfg.lookback, cfg.horizon);
    auto val_ends = window_ends(split, 1, cfg.lookback, cfg.horizon);
    if (train_ends.empty() || val_ends.empty())
        throw std::runtime_error("fit: a split is too short for the (lookback, horizon) window");

    AdamW opt(m.params(), cfg);
    std::size_t total_steps = cfg.epochs * train_ends.size();
    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw std::runtime_error("fit: cannot open log file " + log_path);
    }

    FitResult res;
    res.best_val_accuracy = -1.0;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = train_ends;
        Rng shuffle_rng(cfg.seed + epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        EpochLog el;
        el.epoch = epoch;
        for (std::size_t t_end : order) {
            WindowBatch b = make_window(panel, labels, t_end, cfg.lookback);
            auto out = m.forward(b.xq, b.xn, b.xt);
            ad::Var loss = m.loss(out, b.labels, cfg.alpha, cfg.beta);
            ad::backward(loss);
            ++step;
            el.lr_last = lr_at(step, total_steps, cfg.warmup_fraction, cfg.learning_rate);
            opt.step(m.params(), el.lr_last);
            el.train_loss += loss->value[0];
            el.train_aux_market += out.aux_market->value[0];
            el.train_aux_industry += out.aux_industry->value[0];
        }
        el.train_loss /= static_cast<double>(order.size());
        el.train_aux_market /= static_cast<double>(order.size());
        el.train_aux_industry /= static_cast<double>(order.size());
        el.val_accuracy = evaluate_accuracy(m, panel, labels, val_ends, cfg.lookback);
        res.log.push_back(el);

        if (el.val_accuracy > res.best_val_accuracy) {
            res.best_val_accuracy = el.val_accuracy;
            res.best_epoch = epoch;
            if (!checkpoint_dir.empty()) save_checkpoint(checkpoint_dir, m, cfg, step);
        }
        if (log) {
            json j{{"epoch", el.epoch},
                   {"train_loss", el.train_loss},
                   {"train_aux_market", el.train_aux_market},
                   {"train_aux_industry", el.train_aux_industry},
                   {"val_accuracy", el.val_accuracy},
                   {"lr_last", el.lr_last}};
            log << j.dump() << "\n";
        }
    }
    res.steps = step;
    return res;
}

void save_checkpoint(const std::string& dir, const model::Model& m, const TrainConfig& tc,
                     std::size_t step) {
    fs::create_directories(dir);
    json manifest;
    manifest["model_config"] = m.config();
    manifest["train_config"] = tc;
    manifest["step"] = step;
    json plist = json::array();
    const auto& params = m.params().params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        char fname[32];
        std::snprintf(fname, sizeof fname, "p%04zu.bin", i);
        // f64 payload keeps reload bit-identical.
        write_tensor_file((fs::path(dir) / fname).string(), params[i]->value, "f64");
        plist.push_back(json{{"name", params[i]->name},
                             {"file", fname},
                             {"shape", params[i]->value.shape}});
    }
    manifest["params"] = std::move(plist);
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("load_checkpoint: no manifest.json in " + dir);
    json manifest = json::parse(in);

    LoadedCheckpoint ck;
    model::ModelConfig mc = manifest.at("model_config").get<model::ModelConfig>();
    ck.train_config = manifest.at("train_config").get<TrainConfig>();
    ck.step = manifest.at("step").get<std::size_t>();
    ck.model = model::Model::build(mc);
    for (const auto& entry : manifest.at("params")) {
        std::string name = entry.at("name").get<std::string>();
        ad::Var p = ck.model.params().find(name);
        Tensor t = read_tensor_file((fs::path(dir) / entry.at("file").get<std::string>()).string());
        if (t.shape != p->value.shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        p->value = std::move(t);
    }
    return ck;
}

}  // namespace h3m::trainer
