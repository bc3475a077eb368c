#include "h3m/backtest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace h3m::backtest {

namespace {

constexpr double kIdentityTol = 1e-9;

void check_identity(const PortfolioState& state, const std::map<std::string, double>& prices,
                    double recorded) {
    double actual = state.total_value(prices);
    double scale = std::max({1.0, std::abs(actual), std::abs(recorded)});
    if (std::abs(actual - recorded) > kIdentityTol * scale)
        throw std::runtime_error("portfolio accounting identity violated");
    if (state.cash < -kIdentityTol * scale)
        throw std::runtime_error("portfolio cash went negative");
}

double price_of(const std::map<std::string, double>& prices, const std::string& ticker) {
    auto it = prices.find(ticker);
    if (it == prices.end())
        throw std::runtime_error("rebalance: no price for " + ticker);
    if (it->second <= 0)
        throw std::runtime_error("rebalance: non-positive price for " + ticker);
    return it->second;
}

}  // namespace

void StrategyParams::validate() const {
    if (!(p > 0 && p <= 1)) throw std::runtime_error("StrategyParams: require 0 < p <= 1");
    if (!(q > 0 && q < 1)) throw std::runtime_error("StrategyParams: require 0 < q < 1");
    if (!(r >= 0 && r <= 1)) throw std::runtime_error("StrategyParams: require 0 <= r <= 1");
    if (d == 0) throw std::runtime_error("StrategyParams: require d >= 1");
    if (!(tau >= 0 && tau < 1)) throw std::runtime_error("StrategyParams: require 0 <= tau < 1");
    if (initial_capital <= 0) throw std::runtime_error("StrategyParams: capital must be positive");
}

std::size_t PriceSeries::day_index(const std::string& date) const {
    auto it = std::lower_bound(days.begin(), days.end(), date);
    if (it == days.end() || *it != date)
        throw std::runtime_error("PriceSeries: unknown date " + date);
    return static_cast<std::size_t>(it - days.begin());
}

double PortfolioState::total_value(const std::map<std::string, double>& prices) const {
    double v = cash;
    for (const auto& [ticker, shares] : positions) v += shares * price_of(prices, ticker);
    return v;
}

PredictionSet read_predictions_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions file " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("date,ticker,prob_up", 0) != 0)
        throw std::runtime_error(path + ":1: expected header date,ticker,prob_up");
    std::map<std::string, std::map<std::string, double>> by_date;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string date, ticker, prob;
        if (!std::getline(ss, date, ',') || !std::getline(ss, ticker, ',') ||
            !std::getline(ss, prob, ','))
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        double v = std::stod(prob);
        if (!(v >= 0 && v <= 1))
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": prob_up outside [0, 1]");
        if (!by_date[date].emplace(ticker, v).second)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": duplicate " +
                                     date + "/" + ticker);
    }
    if (by_date.empty()) throw std::runtime_error(path + ": no prediction rows");

    PredictionSet out;
    for (const auto& [ticker, _] : by_date.begin()->second) out.tickers.push_back(ticker);
    for (const auto& [date, row] : by_date) out.dates.push_back(date);
    out.probs = Tensor::zeros({out.dates.size(), out.tickers.size()});
    std::size_t di = 0;
    for (const auto& [date, row] : by_date) {
        if (row.size() != out.tickers.size())
            throw std::runtime_error(path + ": ticker set differs on " + date);
        for (std::size_t ti = 0; ti < out.tickers.size(); ++ti) {
            auto it = row.find(out.tickers[ti]);
            if (it == row.end())
                throw std::runtime_error(path + ": missing " + out.tickers[ti] + " on " + date);
            out.probs.at(di, ti) = it->second;
        }
        ++di;
    }
    return out;
}

void write_predictions_csv(const std::string& path, const PredictionSet& preds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write predictions file " + path);
    out << "date,ticker,prob_up\n";
    out.precision(17);
    for (std::size_t di = 0; di < preds.dates.size(); ++di)
        for (std::size_t ti = 0; ti < preds.tickers.size(); ++ti)
            out << preds.dates[di] << ',' << preds.tickers[ti] << ','
                << preds.probs.at(di, ti) << '\n';
}

std::size_t decide_target_count(std::size_t rising, std::size_t n_stocks, double p, double q,
                                double r) {
    if (rising > n_stocks) throw std::runtime_error("decide_target_count: M > N");
    double m = static_cast<double>(rising);
    double pn = p * static_cast<double>(n_stocks);
    if (m >= pn) return static_cast<std::size_t>(std::floor(pn));
    if (m >= pn * q) return static_cast<std::size_t>(std::floor(r * m));
    return 0;
}

void rebalance(PortfolioState& state, const std::vector<std::string>& targets,
               const std::map<std::string, double>& prices, double tau,
               std::vector<Trade>* log, const std::string& date) {
    auto record = [&](const std::string& ticker, double shares, double px, double cash_delta) {
        if (log && shares != 0)
            log->push_back({date, ticker, cash_delta >= 0 ? "sell" : "buy",
                            std::abs(shares), px, cash_delta});
    };

    // 1. Liquidate everything outside the target set.
    for (auto it = state.positions.begin(); it != state.positions.end();) {
        if (std::find(targets.begin(), targets.end(), it->first) == targets.end()) {
            double px = price_of(prices, it->first);
            double proceeds = it->second * px * (1.0 - tau);
            state.cash += proceeds;
            record(it->first, it->second, px, proceeds);
            it = state.positions.erase(it);
        } else {
            ++it;
        }
    }
    if (targets.empty()) {
        check_identity(state, prices, state.total_value(prices));
        return;
    }

    // 2. Equal split of the post-liquidation value.
    double total = state.total_value(prices);
    double target_value = total / static_cast<double>(targets.size());

    // 3. Sells first so their proceeds fund the buys. Differences below
    // rounding noise are left alone instead of producing dust trades.
    double tol = 1e-9 * std::max(1.0, target_value);
    double buy_need = 0;
    for (const auto& t : targets) {
        double px = price_of(prices, t);
        double held = state.positions.count(t) ? state.positions[t] : 0.0;
        double diff = held * px - target_value;
        if (diff > tol) {
            double shares = diff / px;
            double proceeds = diff * (1.0 - tau);
            state.positions[t] = held - shares;
            state.cash += proceeds;
            record(t, shares, px, proceeds);
        } else if (diff < -tol) {
            buy_need += -diff;
        }
    }

    // 4. Buys, scaled pro-rata if cash cannot cover cost*(1+tau).
    if (buy_need > 0) {
        double affordable = state.cash / (1.0 + tau);
        double fraction = std::min(1.0, affordable / buy_need);
        for (const auto& t : targets) {
            double px = price_of(prices, t);
            double held = state.positions.count(t) ? state.positions[t] : 0.0;
            double diff = target_value - held * px;
            if (diff <= tol) continue;
            double spend = diff * fraction;
            double shares = spend / px;
            state.positions[t] = held + shares;
            state.cash -= spend * (1.0 + tau);
            record(t, shares, px, -spend * (1.0 + tau));
        }
        if (state.cash < 0 && state.cash > -1e-9 * total) state.cash = 0;  // rounding dust
    }
    check_identity(state, prices, state.total_value(prices));
}

ReturnMetrics metric_returns(const std::vector<double>& equity) {
    if (equity.size() < 2)
        throw std::runtime_error("metric_returns: need at least two equity points");
    std::size_t t = equity.size() - 1;
    std::vector<double> r(t);
    double growth = 1.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (equity[i] <= 0) throw std::runtime_error("metric_returns: non-positive equity");
        r[i] = equity[i + 1] / equity[i] - 1.0;
        growth *= 1.0 + r[i];
    }
    ReturnMetrics m;
    m.ar = std::pow(growth, 252.0 / static_cast<double>(t)) - 1.0;

    double mean = 0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(t);
    double var = 0;
    for (double v : r) var += (v - mean) * (v - mean);
    double sd = t > 1 ? std::sqrt(var / static_cast<double>(t - 1)) : 0.0;
    m.sigma_annual = sd * std::sqrt(252.0);
    if (m.sigma_annual > 0) m.sr = (m.ar - 0.02) / m.sigma_annual;

    double peak = equity[0];
    for (double v : equity) {
        peak = std::max(peak, v);
        m.mdd = std::min(m.mdd, (v - peak) / peak);
    }
    if (m.mdd != 0) m.cr = m.ar / std::abs(m.mdd);
    return m;
}

HitMetrics metric_accuracy_precision(const std::vector<std::vector<double>>& predictions,
                                     const std::vector<std::vector<int>>& labels,
                                     const std::vector<std::vector<bool>>& bought) {
    if (predictions.size() != labels.size() || predictions.size() != bought.size())
        throw std::runtime_error("metric_accuracy_precision: cycle counts differ");
    std::size_t correct = 0, total = 0, bought_n = 0, bought_rose = 0;
    for (std::size_t c = 0; c < predictions.size(); ++c) {
        if (predictions[c].size() != labels[c].size() || predictions[c].size() != bought[c].size())
            throw std::runtime_error("metric_accuracy_precision: stock counts differ");
        for (std::size_t i = 0; i < predictions[c].size(); ++i) {
            int pred = predictions[c][i] > 0.5 ? 1 : 0;
            if (pred == labels[c][i]) ++correct;
            ++total;
            if (bought[c][i]) {
                ++bought_n;
                if (labels[c][i] == 1) ++bought_rose;
            }
        }
    }
    if (total == 0) throw std::runtime_error("metric_accuracy_precision: no observations");
    HitMetrics h;
    h.acc = static_cast<double>(correct) / static_cast<double>(total);
    if (bought_n > 0) h.pre = static_cast<double>(bought_rose) / static_cast<double>(bought_n);
    return h;
}

BacktestReport run_backtest(const PredictionSet& preds, const PriceSeries& prices,
                            const StrategyParams& params) {
    params.validate();
    if (preds.dates.empty()) throw std::runtime_error("run_backtest: no prediction dates");
    if (preds.tickers != prices.tickers)
        throw std::runtime_error("run_backtest: prediction and price ticker sets differ");
    std::size_t n = preds.tickers.size();

    // Rebalance days must sit d apart on the trading calendar.
    std::vector<std::size_t> rb_days;
    for (const auto& date : preds.dates) rb_days.push_back(prices.day_index(date));
    for (std::size_t k = 1; k < rb_days.size(); ++k)
        if (rb_days[k] != rb_days[0] + k * params.d)
            throw std::runtime_error("run_backtest: prediction dates are not spaced d=" +
                                     std::to_string(params.d) + " trading days apart (" +
                                     preds.dates[k] + ")");
    std::size_t last_day = std::min(rb_days.back() + params.d, prices.days.size() - 1);

    auto prices_at = [&](std::size_t day) {
        std::map<std::string, double> px;
        for (std::size_t i = 0; i < n; ++i) px[preds.tickers[i]] = prices.price(i, day);
        return px;
    };

    BacktestReport rep;
    rep.params = params;
    PortfolioState state;
    state.cash = params.initial_capital;
    std::vector<std::vector<double>> cyc_preds;
    std::vector<std::vector<int>> cyc_labels;
    std::vector<std::vector<bool>> cyc_bought;

    std::size_t next_rb = 0;
    for (std::size_t day = rb_days[0]; day <= last_day; ++day) {
        auto px = prices_at(day);
        if (next_rb < rb_days.size() && day == rb_days[next_rb]) {
            std::size_t di = next_rb;
            std::vector<std::size_t> rising;
            for (std::size_t i = 0; i < n; ++i)
                if (preds.probs.at(di, i) > 0.5) rising.push_back(i);
            std::size_t n_t = decide_target_count(rising.size(), n, params.p, params.q, params.r);

            // Rank all stocks by probability (desc, index asc on ties) and
            // take the head; targets beyond the rising set only occur in
            // branch 1 when floor(p*N) exceeds M.
            std::vector<std::size_t> order(n);
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return preds.probs.at(di, a) > preds.probs.at(di, b);
            });
            std::vector<std::string> targets;
            for (std::size_t k = 0; k < n_t; ++k) targets.push_back(preds.tickers[order[k]]);

            rebalance(state, targets, px, params.tau, &rep.trades, prices.days[day]);

            if (day + params.d < prices.days.size()) {
                std::vector<double> pr(n);
                std::vector<int> lb(n);
                std::vector<bool> bt(n, false);
                for (std::size_t i = 0; i < n; ++i) {
                    pr[i] = preds.probs.at(di, i);
                    lb[i] = prices.price(i, day + params.d) > prices.price(i, day) ? 1 : 0;
                }
                for (const auto& t : targets)
                    bt[static_cast<std::size_t>(
                        std::find(preds.tickers.begin(), preds.tickers.end(), t) -
                        preds.tickers.begin())] = true;
                cyc_preds.push_back(std::move(pr));
                cyc_labels.push_back(std::move(lb));
                cyc_bought.push_back(std::move(bt));
            }
            ++next_rb;
        }
        double value = state.total_value(px);
        check_identity(state, px, value);
        rep.equity_days.push_back(prices.days[day]);
        rep.equity.push_back(value);
    }

    rep.terminal_value = rep.equity.back();
    for (std::size_t i = 1; i < rep.equity.size(); ++i)
        rep.daily_returns.push_back(rep.equity[i] / rep.equity[i - 1] - 1.0);
    if (rep.equity.size() >= 2) rep.returns = metric_returns(rep.equity);
    if (!cyc_preds.empty())
        rep.hits = metric_accuracy_precision(cyc_preds, cyc_labels, cyc_bought);
    return rep;
}

GridSpec GridSpec::paper_default() {
    GridSpec g;
    for (int i = 1; i <= 20; ++i) g.p.push_back(i * 0.05);
    for (int i = 1; i <= 19; ++i) g.q.push_back(i * 0.05);
    for (int i = 0; i <= 20; ++i) g.r.push_back(i * 0.05);
    return g;
}

GridResult grid_search(const PredictionSet& preds, const PriceSeries& prices,
                       const StrategyParams& base, const GridSpec& grid, std::size_t jobs) {
    if (grid.p.empty() || grid.q.empty() || grid.r.empty())
        throw std::runtime_error("grid_search: empty grid axis");
    if (jobs == 0) jobs = 1;

    struct Cell {
        bool defined = false;
        double sr = 0, cr = 0, mdd = 0;
    };
    std::size_t total = grid.p.size() * grid.q.size() * grid.r.size();
    std::vector<Cell> cells(total);

    auto eval_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t idx = lo; idx < hi; ++idx) {
            std::size_t pi = idx / (grid.q.size() * grid.r.size());
            std::size_t qi = (idx / grid.r.size()) % grid.q.size();
            std::size_t ri = idx % grid.r.size();
            StrategyParams sp = base;
            sp.p = grid.p[pi];
            sp.q = grid.q[qi];
            sp.r = grid.r[ri];
            BacktestReport rep = run_backtest(preds, prices, sp);
            if (rep.returns.sr) {
                cells[idx].defined = true;
                cells[idx].sr = *rep.returns.sr;
                cells[idx].cr = rep.returns.cr.value_or(
                    -std::numeric_limits<double>::infinity());
                cells[idx].mdd = rep.returns.mdd;
            }
        }
    };

    if (jobs == 1) {
        eval_range(0, total);
    } else {
        std::vector<std::thread> threads;
        std::size_t chunk = (total + jobs - 1) / jobs;
        std::exception_ptr err;
        std::mutex err_mu;
        for (std::size_t j = 0; j < jobs; ++j) {
            std::size_t lo = j * chunk, hi = std::min(total, lo + chunk);
            if (lo >= hi) break;
            threads.emplace_back([&, lo, hi] {
                try {
                    eval_range(lo, hi);
                } catch (...) {
                    std::lock_guard<std::mutex> g(err_mu);
                    if (!err) err = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        if (err) std::rethrow_exception(err);
    }

    // Deterministic reduction: scan in lexicographic (p, q, r) order so the
    // first of any fully tied set wins regardless of thread layout.
    std::size_t best = total;
    for (std::size_t idx = 0; idx < total; ++idx) {
        if (!cells[idx].defined) continue;
        if (best == total) {
            best = idx;
            continue;
        }
        const Cell& a = cells[idx];
        const Cell& b = cells[best];
        if (a.sr > b.sr ||
            (a.sr == b.sr && (a.cr > b.cr ||
                              (a.cr == b.cr && std::abs(a.mdd) < std::abs(b.mdd)))))
            best = idx;
    }
    if (best == total) throw std::runtime_error("grid_search: Sharpe undefined everywhere");

    GridResult res;
    res.best = base;
    res.best.p = grid.p[best / (grid.q.size() * grid.r.size())];
    res.best.q = grid.q[(best / grid.r.size()) % grid.q.size()];
    res.best.r = grid.r[best % grid.r.size()];
    res.best_sr = cells[best].sr;
    res.evaluated = total;
    for (const Cell& c : cells) res.defined += c.defined ? 1 : 0;
    return res;
}

}  // namespace h3m::backtest
