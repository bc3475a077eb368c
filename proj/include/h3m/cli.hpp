#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "h3m/backtest.hpp"
#include "h3m/dataio.hpp"
#include "h3m/model.hpp"
#include "h3m/trainer.hpp"

namespace h3m::cli {

// Everything a run needs, loaded from one JSON file. Unknown keys are
// rejected so typos fail loudly instead of silently using defaults.
struct RunConfig {
    // data
    std::string prices_csv;
    std::string panel_dir;
    bool forward_fill = false;
    std::size_t min_usable_days = 0;
    // embeddings
    std::string embed_provider = "mock";  // mock | file | remote
    std::size_t d_news = 8, d_time = 8;
    std::string embed_tensor, embed_manifest, embed_url;
    // model + training
    model::ModelConfig model;
    trainer::TrainConfig train;
    // strategy
    backtest::StrategyParams strategy;
    backtest::GridSpec grid = backtest::GridSpec::paper_default();
    // artifacts
    std::string output_dir = "out";
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);  // empty -> $H3M_CONFIG

// Panel artifact directory: manifest.json + f64 tensor files.
void write_panel(const std::string& dir, const dataio::StockPanel& panel);
dataio::StockPanel read_panel(const std::string& dir);

struct CommonFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t jobs = 1;
    std::vector<std::string> ablate;  // subset of {lch, llm, ssmoes}
    std::string dump_hypergraph, dump_routing;
};

// Applies --seed/--ablate overrides on top of the file config.
RunConfig effective_config(const CommonFlags& flags);

int cmd_ingest(const CommonFlags& flags);
int cmd_train(const CommonFlags& flags);
int cmd_predict(const CommonFlags& flags, const std::string& checkpoint_dir,
                const std::vector<std::string>& dates, const std::string& out_csv);
int cmd_backtest(const CommonFlags& flags, const std::string& predictions_csv,
                 const std::string& report_dir);
int cmd_gridsearch(const CommonFlags& flags, const std::string& predictions_csv,
                   const std::string& report_path);
int cmd_eval(const CommonFlags& flags, const std::string& checkpoint_dir);

// Closes-only view of an OHLCV file for the trading engine.
backtest::PriceSeries load_price_series(const std::string& csv_path, bool forward_fill);

}  // namespace h3m::cli
