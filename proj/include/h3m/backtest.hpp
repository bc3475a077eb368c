#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "h3m/tensor.hpp"

namespace h3m::backtest {

struct StrategyParams {
    double p = 1.0;    // portfolio selection ratio, 0 < p <= 1
    double q = 0.05;   // stop-loss threshold, 0 < q < 1
    double r = 0.05;   // rising ratio for partial entry, 0 <= r <= 1
    std::size_t d = 10;  // rebalance period in trading days
    double tau = 0.0025;
    double initial_capital = 1'000'000.0;

    void validate() const;
};

// Close prices on a shared day axis.
struct PriceSeries {
    std::vector<std::string> tickers;  // N
    std::vector<std::string> days;     // ascending
    Tensor closes;                     // N x days

    std::size_t day_index(const std::string& date) const;  // throws naming the date
    double price(std::size_t stock, std::size_t day) const { return closes.at(stock, day); }
};

// One probability row per rebalance day.
struct PredictionSet {
    std::vector<std::string> dates;    // ascending rebalance days
    std::vector<std::string> tickers;
    Tensor probs;                      // dates x tickers, each in [0, 1]
};

PredictionSet read_predictions_csv(const std::string& path);  // date,ticker,prob_up
void write_predictions_csv(const std::string& path, const PredictionSet& preds);

struct PortfolioState {
    double cash = 0;
    std::map<std::string, double> positions;  // ticker -> shares, fractional

    double total_value(const std::map<std::string, double>& prices) const;
};

struct Trade {
    std::string date, ticker;
    std::string side;  // "buy" | "sell"
    double shares = 0, price = 0, cash_delta = 0;
};

// n = floor(p*N) if M >= p*N; floor(r*M) if p*N*q <= M < p*N; 0 otherwise.
std::size_t decide_target_count(std::size_t rising, std::size_t n_stocks, double p, double q,
                                double r);

// Liquidates non-targets, then moves every target toward an equal split of
// post-liquidation value. Sells credit proceeds*(1-tau); buys debit
// cost*(1+tau), scaled down pro-rata when cash runs short. Appends to the
// trade log when one is supplied.
void rebalance(PortfolioState& state, const std::vector<std::string>& targets,
               const std::map<std::string, double>& prices, double tau,
               std::vector<Trade>* log = nullptr, const std::string& date = "");

struct ReturnMetrics {
    double ar = 0, mdd = 0, sigma_annual = 0;
    std::optional<double> sr, cr;  // absent when sigma / MDD degenerate
};

// AR = [prod(1+r_t)]^(252/T) - 1 over T daily returns; sigma from the
// sample standard deviation annualized by sqrt(252); SR = (AR - 0.02)/sigma;
// MDD = worst drop from the running maximum; CR = AR/|MDD|.
ReturnMetrics metric_returns(const std::vector<double>& equity);

struct HitMetrics {
    double acc = 0;
    std::optional<double> pre;  // absent when nothing was bought
};

// predictions/labels per (cycle, stock) with 0.5 thresholding; bought marks
// the positions actually entered each cycle.
HitMetrics metric_accuracy_precision(const std::vector<std::vector<double>>& predictions,
                                     const std::vector<std::vector<int>>& labels,
                                     const std::vector<std::vector<bool>>& bought);

struct BacktestReport {
    StrategyParams params;
    std::vector<std::string> equity_days;
    std::vector<double> equity;
    std::vector<double> daily_returns;
    std::vector<Trade> trades;
    double terminal_value = 0;
    ReturnMetrics returns;
    HitMetrics hits;
};

BacktestReport run_backtest(const PredictionSet& preds, const PriceSeries& prices,
                            const StrategyParams& params);

struct GridSpec {
    std::vector<double> p, q, r;
    static GridSpec paper_default();  // 20 x 19 x 21 combinations
};

struct GridResult {
    StrategyParams best;
    double best_sr = 0;
    std::size_t evaluated = 0, defined = 0;
};

// Sharpe-maximizing triple on the supplied predictions; ties broken by
// higher CR, then smaller |MDD|, then lexicographic (p, q, r). Triples with
// undefined SR are skipped; throws if none is defined.
GridResult grid_search(const PredictionSet& preds, const PriceSeries& prices,
                       const StrategyParams& base, const GridSpec& grid,
                       std::size_t jobs = 1);

}  // namespace h3m::backtest
