#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "h3m/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"H3M-SSMoEs stock movement pipeline"};
    app.require_subcommand(1);

    h3m::cli::CommonFlags flags;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", flags.config_path, "Run config JSON (or $H3M_CONFIG)");
        cmd->add_option("--seed", flags.seed, "Override model/train seed")
            ->each([&](const std::string&) { flags.seed_set = true; });
        cmd->add_option("--jobs", flags.jobs, "Worker threads where supported");
        cmd->add_option("--ablate", flags.ablate, "Disable a component: lch, llm, ssmoes");
    };

    auto* ingest = app.add_subcommand("ingest", "Build a panel artifact from OHLCV CSV");
    add_common(ingest);

    auto* train = app.add_subcommand("train", "Train a model on an ingested panel");
    add_common(train);

    std::string checkpoint, out_csv = "predictions.csv", report_dir = "report";
    std::string report_path;
    std::string predictions_csv;
    std::vector<std::string> dates;
    auto* predict = app.add_subcommand("predict", "Write prob_up predictions CSV");
    add_common(predict);
    predict->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    predict->add_option("--dates", dates, "Window-end dates (default: d-spaced test split)");
    predict->add_option("--out", out_csv, "Output CSV path");
    predict->add_option("--dump-hypergraph", flags.dump_hypergraph,
                        "Directory for incidence/edge-weight tensors");
    predict->add_option("--dump-routing", flags.dump_routing,
                        "JSONL file for expert routing decisions");

    auto* backtest = app.add_subcommand("backtest", "Run the d-day trading strategy");
    add_common(backtest);
    backtest->add_option("--predictions", predictions_csv, "Predictions CSV")->required();
    backtest->add_option("--report-dir", report_dir, "Report output directory");

    auto* gridsearch = app.add_subcommand("gridsearch", "Search (p, q, r) for best Sharpe");
    add_common(gridsearch);
    gridsearch->add_option("--predictions", predictions_csv, "Predictions CSV")->required();
    gridsearch->add_option("--out", report_path, "Result JSON path");

    auto* eval = app.add_subcommand("eval", "Report val/test accuracy of a checkpoint");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (ingest->parsed()) return h3m::cli::cmd_ingest(flags);
        if (train->parsed()) return h3m::cli::cmd_train(flags);
        if (predict->parsed())
            return h3m::cli::cmd_predict(flags, checkpoint, dates, out_csv);
        if (backtest->parsed())
            return h3m::cli::cmd_backtest(flags, predictions_csv, report_dir);
        if (gridsearch->parsed())
            return h3m::cli::cmd_gridsearch(flags, predictions_csv, report_path);
        if (eval->parsed()) return h3m::cli::cmd_eval(flags, checkpoint);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
