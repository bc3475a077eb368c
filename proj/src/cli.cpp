#include "h3m/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>

namespace h3m::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
    if (!j.is_object()) throw std::runtime_error("config: " + where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw std::runtime_error("config: unknown key \"" + key + "\" in " + where);
}

// Overlay user keys on the serialized defaults so partial sections work and
// unknown keys still fail.
template <typename T>
void merge_section(const json& j, const char* name, T& out) {
    if (!j.contains(name)) return;
    json base;
    to_json(base, out);
    std::set<std::string> allowed;
    for (const auto& [key, _] : base.items()) allowed.insert(key);
    reject_unknown(j.at(name), allowed, name);
    base.update(j.at(name));
    from_json(base, out);
}

json metrics_json(const backtest::BacktestReport& rep) {
    json m;
    m["AR"] = rep.returns.ar;
    m["SR"] = rep.returns.sr ? json(*rep.returns.sr) : json(nullptr);
    m["CR"] = rep.returns.cr ? json(*rep.returns.cr) : json(nullptr);
    m["MDD"] = rep.returns.mdd;
    m["ACC"] = rep.hits.acc;
    m["PRE"] = rep.hits.pre ? json(*rep.hits.pre) : json(nullptr);
    return m;
}

std::unique_ptr<dataio::EmbeddingProvider> make_provider(const RunConfig& cfg, std::size_t dim) {
    if (cfg.embed_provider == "mock")
        return std::make_unique<dataio::MockProvider>(dim);
    if (cfg.embed_provider == "file")
        return std::make_unique<dataio::FileProvider>(cfg.embed_tensor, cfg.embed_manifest);
    if (cfg.embed_provider == "remote")
        return std::make_unique<dataio::RemoteProvider>(cfg.embed_url, dim);
    throw std::runtime_error("config: embeddings.provider must be mock, file or remote");
}

struct SplitInfo {
    dataio::DatasetSplit split;
    std::size_t lookback = 0, horizon = 0;
};

void write_split_info(const std::string& dir, const SplitInfo& si) {
    json j{{"train_end", si.split.train_end},
           {"val_end", si.split.val_end},
           {"test_end", si.split.test_end},
           {"lookback", si.lookback},
           {"horizon", si.horizon}};
    std::ofstream out(fs::path(dir) / "split.json");
    if (!out) throw std::runtime_error("cannot write split.json in " + dir);
    out << j.dump(2) << "\n";
}

SplitInfo read_split_info(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "split.json");
    if (!in) throw std::runtime_error("no split.json in " + dir);
    json j = json::parse(in);
    SplitInfo si;
    si.split.train_end = j.at("train_end").get<std::size_t>();
    si.split.val_end = j.at("val_end").get<std::size_t>();
    si.split.test_end = j.at("test_end").get<std::size_t>();
    si.lookback = j.at("lookback").get<std::size_t>();
    si.horizon = j.at("horizon").get<std::size_t>();
    return si;
}

// Re-derives the training-time normalization deterministically from the
// panel artifact and recorded split boundaries.
void normalize_like_training(dataio::StockPanel& panel, SplitInfo& si) {
    if (si.split.test_end != panel.n_days())
        throw std::runtime_error("panel length changed since training (" +
                                 std::to_string(panel.n_days()) + " days vs recorded " +
                                 std::to_string(si.split.test_end) + ")");
    dataio::normalize_split(si.split, panel);
}

void dump_forward(const model::ForwardOut& out, const std::string& hyper_dir,
                  const std::string& routing_path, const std::string& tag) {
    if (!hyper_dir.empty()) {
        fs::create_directories(hyper_dir);
        auto put = [&](const char* name, const ad::Var& v) {
            if (v) write_tensor_file((fs::path(hyper_dir) / (tag + "_" + name + ".bin")).string(),
                                     v->value, "f64");
        };
        put("h_local", out.h_local);
        put("w_local", out.w_local);
        put("h_global", out.h_global);
        put("w_global", out.w_global);
    }
    if (!routing_path.empty()) {
        json j;
        j["date"] = tag;
        auto pool = [](const ssmoes::MoEOutput& o) {
            json p;
            p["selected"] = o.selected;
            if (o.gates) p["gates"] = o.gates->value.data;
            return p;
        };
        if (!out.market.selected.empty()) j["market"] = pool(out.market);
        if (!out.industry.selected.empty()) j["industry"] = pool(out.industry);
        std::ofstream f(routing_path, std::ios::app);
        if (!f) throw std::runtime_error("cannot write routing dump " + routing_path);
        f << j.dump() << "\n";
    }
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    reject_unknown(j, {"data", "embeddings", "model", "train", "strategy", "grid", "output_dir"},
                   "top level");
    RunConfig cfg;
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, {"prices_csv", "panel_dir", "forward_fill", "min_usable_days"}, "data");
        cfg.prices_csv = d.value("prices_csv", cfg.prices_csv);
        cfg.panel_dir = d.value("panel_dir", cfg.panel_dir);
        cfg.forward_fill = d.value("forward_fill", cfg.forward_fill);
        cfg.min_usable_days = d.value("min_usable_days", cfg.min_usable_days);
    }
    if (j.contains("embeddings")) {
        const json& e = j.at("embeddings");
        reject_unknown(e, {"provider", "d_news", "d_time", "tensor", "manifest", "url"},
                       "embeddings");
        cfg.embed_provider = e.value("provider", cfg.embed_provider);
        cfg.d_news = e.value("d_news", cfg.d_news);
        cfg.d_time = e.value("d_time", cfg.d_time);
        cfg.embed_tensor = e.value("tensor", cfg.embed_tensor);
        cfg.embed_manifest = e.value("manifest", cfg.embed_manifest);
        cfg.embed_url = e.value("url", cfg.embed_url);
    }
    merge_section(j, "model", cfg.model);
    merge_section(j, "train", cfg.train);
    if (j.contains("strategy")) {
        const json& s = j.at("strategy");
        reject_unknown(s, {"p", "q", "r", "d", "tau", "initial_capital"}, "strategy");
        cfg.strategy.p = s.value("p", cfg.strategy.p);
        cfg.strategy.q = s.value("q", cfg.strategy.q);
        cfg.strategy.r = s.value("r", cfg.strategy.r);
        cfg.strategy.d = s.value("d", cfg.strategy.d);
        cfg.strategy.tau = s.value("tau", cfg.strategy.tau);
        cfg.strategy.initial_capital = s.value("initial_capital", cfg.strategy.initial_capital);
        cfg.strategy.validate();
    }
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        reject_unknown(g, {"p", "q", "r"}, "grid");
        if (g.contains("p")) cfg.grid.p = g.at("p").get<std::vector<double>>();
        if (g.contains("q")) cfg.grid.q = g.at("q").get<std::vector<double>>();
        if (g.contains("r")) cfg.grid.r = g.at("r").get<std::vector<double>>();
    }
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    // The strategy horizon and the label horizon are the same d by design.
    cfg.strategy.d = cfg.train.horizon;
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::string p = path;
    if (p.empty()) {
        const char* env = std::getenv("H3M_CONFIG");
        if (!env || !*env)
            throw std::runtime_error("no --config given and H3M_CONFIG is unset");
        p = env;
    }
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open config file " + p);
    return parse_run_config(json::parse(in));
}

RunConfig effective_config(const CommonFlags& flags) {
    RunConfig cfg = load_run_config(flags.config_path);
    if (flags.seed_set) {
        cfg.model.seed = flags.seed;
        cfg.train.seed = flags.seed;
    }
    for (const auto& a : flags.ablate) {
        if (a == "lch") cfg.model.ablate_lch = true;
        else if (a == "llm") cfg.model.ablate_llm = true;
        else if (a == "ssmoes") cfg.model.ablate_ssmoes = true;
        else throw std::runtime_error("--ablate: unknown component " + a);
    }
    return cfg;
}

void write_panel(const std::string& dir, const dataio::StockPanel& panel) {
    fs::create_directories(dir);
    json manifest{{"tickers", panel.tickers},
                  {"days", panel.days},
                  {"feature_names", panel.feature_names},
                  {"warmup_dropped", panel.warmup_dropped}};
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("cannot write panel manifest in " + dir);
    out << manifest.dump(2) << "\n";
    auto put = [&](const char* name, const Tensor& t) {
        write_tensor_file((fs::path(dir) / name).string(), t, "f64");
    };
    put("raw.bin", panel.raw);
    put("closes.bin", panel.closes);
    put("features.bin", panel.features);
    put("news.bin", panel.news);
    put("time.bin", panel.time_emb);
}

dataio::StockPanel read_panel(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("no panel manifest.json in " + dir);
    json manifest = json::parse(in);
    dataio::StockPanel panel;
    manifest.at("tickers").get_to(panel.tickers);
    manifest.at("days").get_to(panel.days);
    manifest.at("feature_names").get_to(panel.feature_names);
    panel.warmup_dropped = manifest.value("warmup_dropped", std::size_t{0});
    auto get = [&](const char* name) {
        return read_tensor_file((fs::path(dir) / name).string());
    };
    panel.raw = get("raw.bin");
    panel.closes = get("closes.bin");
    panel.features = get("features.bin");
    panel.news = get("news.bin");
    panel.time_emb = get("time.bin");
    if (panel.closes.shape != std::vector<std::size_t>{panel.tickers.size(), panel.days.size()})
        throw std::runtime_error("panel " + dir + ": closes shape does not match manifest");
    return panel;
}

backtest::PriceSeries load_price_series(const std::string& csv_path, bool forward_fill) {
    dataio::LoadOptions opts;
    opts.forward_fill = forward_fill;
    dataio::StockPanel panel = dataio::load_ohlcv_csv(csv_path, opts);
    backtest::PriceSeries ps;
    ps.tickers = panel.tickers;
    ps.days = panel.days;
    ps.closes = panel.closes;
    return ps;
}

int cmd_ingest(const CommonFlags& flags) {
    RunConfig cfg = effective_config(flags);
    if (cfg.prices_csv.empty()) throw std::runtime_error("config: data.prices_csv is required");
    if (cfg.panel_dir.empty()) throw std::runtime_error("config: data.panel_dir is required");
    dataio::LoadOptions opts;
    opts.forward_fill = cfg.forward_fill;
    opts.min_usable_days = cfg.min_usable_days;
    dataio::StockPanel panel = dataio::load_ohlcv_csv(cfg.prices_csv, opts);
    dataio::compute_features(panel);
    auto news = make_provider(cfg, cfg.d_news);
    auto time = make_provider(cfg, cfg.d_time);
    dataio::attach_embeddings(panel, *news, *time);
    write_panel(cfg.panel_dir, panel);
    std::cout << json{{"panel_dir", cfg.panel_dir},
                      {"n_stocks", panel.n_stocks()},
                      {"t_total", panel.n_days()},
                      {"f", panel.n_features()}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_train(const CommonFlags& flags) {
    RunConfig cfg = effective_config(flags);
    dataio::StockPanel panel = read_panel(cfg.panel_dir);
    model::ModelConfig mc = cfg.model;
    mc.n_stocks = panel.n_stocks();
    mc.n_features = panel.n_features();
    mc.lookback = cfg.train.lookback;
    mc.d_news = panel.news.shape.at(2);
    mc.d_time = panel.time_emb.cols();

    SplitInfo si;
    si.lookback = cfg.train.lookback;
    si.horizon = cfg.train.horizon;
    si.split = dataio::split_dataset(panel, si.lookback, si.horizon);
    dataio::normalize_split(si.split, panel);
    Tensor labels = dataio::make_labels(panel, si.horizon);

    model::Model m = model::Model::build(mc);
    fs::create_directories(cfg.output_dir);
    std::string ckpt = (fs::path(cfg.output_dir) / "checkpoint").string();
    std::string log = (fs::path(cfg.output_dir) / "train_log.jsonl").string();
    trainer::FitResult res = trainer::fit(m, panel, si.split, labels, cfg.train, ckpt, log);
    write_split_info(ckpt, si);
    std::cout << json{{"checkpoint", ckpt},
                      {"log", log},
                      {"best_epoch", res.best_epoch},
                      {"best_val_accuracy", res.best_val_accuracy},
                      {"steps", res.steps}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_predict(const CommonFlags& flags, const std::string& checkpoint_dir,
                const std::vector<std::string>& dates, const std::string& out_csv) {
    RunConfig cfg = effective_config(flags);
    trainer::LoadedCheckpoint ck = trainer::load_checkpoint(checkpoint_dir);
    dataio::StockPanel panel = read_panel(cfg.panel_dir);
    SplitInfo si = read_split_info(checkpoint_dir);
    normalize_like_training(panel, si);

    std::vector<std::size_t> ends;
    if (dates.empty()) {
        // Default: d-spaced cycle starts across the test split.
        for (std::size_t t = si.split.val_end + si.lookback - 1; t < si.split.test_end;
             t += si.horizon)
            ends.push_back(t);
    } else {
        for (const auto& d : dates) {
            std::size_t t = panel.day_index(d);
            if (t + 1 < si.lookback)
                throw std::runtime_error("date " + d + " has fewer than T=" +
                                         std::to_string(si.lookback) + " days of history");
            ends.push_back(t);
        }
    }

    backtest::PredictionSet preds;
    preds.tickers = panel.tickers;
    preds.probs = Tensor::zeros({ends.size(), panel.n_stocks()});
    if (!cfg.output_dir.empty()) fs::create_directories(cfg.output_dir);
    for (std::size_t k = 0; k < ends.size(); ++k) {
        // Labels are only needed for shape here; prediction ignores them.
        trainer::WindowBatch b = trainer::make_window(
            panel, Tensor::zeros({panel.n_stocks(), panel.n_days()}), ends[k], si.lookback);
        auto out = ck.model.forward(b.xq, b.xn, b.xt);
        for (std::size_t i = 0; i < panel.n_stocks(); ++i)
            preds.probs.at(k, i) = out.prob_up->value[i];
        preds.dates.push_back(panel.days[ends[k]]);
        dump_forward(out, flags.dump_hypergraph, flags.dump_routing, panel.days[ends[k]]);
    }
    backtest::write_predictions_csv(out_csv, preds);
    std::cout << json{{"predictions", out_csv}, {"dates", preds.dates.size()}}.dump() << "\n";
    return 0;
}

int cmd_backtest(const CommonFlags& flags, const std::string& predictions_csv,
                 const std::string& report_dir) {
    RunConfig cfg = effective_config(flags);
    backtest::PredictionSet preds = backtest::read_predictions_csv(predictions_csv);
    backtest::PriceSeries prices = load_price_series(cfg.prices_csv, cfg.forward_fill);
    backtest::BacktestReport rep = backtest::run_backtest(preds, prices, cfg.strategy);

    fs::create_directories(report_dir);
    json report{{"metrics", metrics_json(rep)},
                {"terminal_value", rep.terminal_value},
                {"params",
                 {{"p", rep.params.p},
                  {"q", rep.params.q},
                  {"r", rep.params.r},
                  {"d", rep.params.d},
                  {"tau", rep.params.tau},
                  {"initial_capital", rep.params.initial_capital}}}};
    std::ofstream(fs::path(report_dir) / "report.json") << report.dump(2) << "\n";
    {
        std::ofstream eq(fs::path(report_dir) / "equity.csv");
        eq << "date,value\n";
        eq.precision(17);
        for (std::size_t i = 0; i < rep.equity.size(); ++i)
            eq << rep.equity_days[i] << ',' << rep.equity[i] << '\n';
    }
    {
        std::ofstream tr(fs::path(report_dir) / "trades.csv");
        tr << "date,ticker,side,shares,price,cash_delta\n";
        tr.precision(17);
        for (const auto& t : rep.trades)
            tr << t.date << ',' << t.ticker << ',' << t.side << ',' << t.shares << ','
               << t.price << ',' << t.cash_delta << '\n';
    }
    std::cout << report.dump() << "\n";
    return 0;
}

int cmd_gridsearch(const CommonFlags& flags, const std::string& predictions_csv,
                   const std::string& report_path) {
    RunConfig cfg = effective_config(flags);
    backtest::PredictionSet preds = backtest::read_predictions_csv(predictions_csv);
    backtest::PriceSeries prices = load_price_series(cfg.prices_csv, cfg.forward_fill);
    backtest::GridResult res =
        backtest::grid_search(preds, prices, cfg.strategy, cfg.grid, flags.jobs);
    json out{{"best", {{"p", res.best.p}, {"q", res.best.q}, {"r", res.best.r}}},
             {"sharpe", res.best_sr},
             {"evaluated", res.evaluated},
             {"defined", res.defined}};
    if (!report_path.empty()) {
        fs::create_directories(fs::path(report_path).parent_path().string().empty()
                                   ? "."
                                   : fs::path(report_path).parent_path().string());
        std::ofstream(report_path) << out.dump(2) << "\n";
    }
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint_dir) {
    RunConfig cfg = effective_config(flags);
    trainer::LoadedCheckpoint ck = trainer::load_checkpoint(checkpoint_dir);
    dataio::StockPanel panel = read_panel(cfg.panel_dir);
    SplitInfo si = read_split_info(checkpoint_dir);
    normalize_like_training(panel, si);
    Tensor labels = dataio::make_labels(panel, si.horizon);
    auto val = trainer::window_ends(si.split, 1, si.lookback, si.horizon);
    auto test = trainer::window_ends(si.split, 2, si.lookback, si.horizon);
    json out{{"val_accuracy",
              trainer::evaluate_accuracy(ck.model, panel, labels, val, si.lookback)},
             {"test_accuracy",
              trainer::evaluate_accuracy(ck.model, panel, labels, test, si.lookback)}};
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace h3m::cli
