#include "h3m/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "h3m/numerics.hpp"
#include "h3m/rng.hpp"

namespace h3m::dataio {

std::size_t StockPanel::day_index(const std::string& date) const {
    auto it = std::lower_bound(days.begin(), days.end(), date);
    if (it == days.end() || *it != date)
        throw std::runtime_error("panel has no trading day " + date);
    return static_cast<std::size_t>(it - days.begin());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

double parse_num(const std::string& s, std::size_t line_no, const char* field) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (...) {
        throw std::runtime_error("line " + std::to_string(line_no) + ": bad " + field +
                                 " value '" + s + "'");
    }
}

}  // namespace

StockPanel load_ohlcv_csv(const std::string& path, const LoadOptions& opts) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_ohlcv_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_ohlcv_csv: empty file " + path);
    // tolerate \r\n
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "date,ticker,open,high,low,close,volume")
        throw std::runtime_error("load_ohlcv_csv: unexpected header '" + line + "'");

    std::map<std::string, std::map<std::string, OhlcvRecord>> by_ticker;  // ticker -> date -> rec
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != 7)
            throw std::runtime_error("line " + std::to_string(line_no) + ": expected 7 fields, got " +
                                     std::to_string(cells.size()));
        OhlcvRecord r;
        r.date = cells[0];
        r.ticker = cells[1];
        if (r.date.size() != 10 || r.date[4] != '-' || r.date[7] != '-')
            throw std::runtime_error("line " + std::to_string(line_no) + ": date '" + r.date +
                                     "' is not ISO-8601");
        r.open = parse_num(cells[2], line_no, "open");
        r.high = parse_num(cells[3], line_no, "high");
        r.low = parse_num(cells[4], line_no, "low");
        r.close = parse_num(cells[5], line_no, "close");
        r.volume = parse_num(cells[6], line_no, "volume");
        if (r.volume < 0)
            throw std::runtime_error("line " + std::to_string(line_no) + ": negative volume");
        double body_lo = std::min(r.open, r.close), body_hi = std::max(r.open, r.close);
        if (!(r.low <= body_lo && body_hi <= r.high))
            throw std::runtime_error("line " + std::to_string(line_no) +
                                     ": OHLC invariant violated (low <= open/close <= high)");
        by_ticker[r.ticker][r.date] = r;
    }
    if (by_ticker.empty()) throw std::runtime_error("load_ohlcv_csv: no data rows in " + path);

    // Day axis: intersection by default, union under forward-fill.
    std::set<std::string> day_set;
    bool first = true;
    for (auto& [tk, recs] : by_ticker) {
        std::set<std::string> d;
        for (auto& [date, _] : recs) d.insert(date);
        if (opts.forward_fill) {
            day_set.insert(d.begin(), d.end());
        } else if (first) {
            day_set = d;
        } else {
            std::set<std::string> inter;
            std::set_intersection(day_set.begin(), day_set.end(), d.begin(), d.end(),
                                  std::inserter(inter, inter.begin()));
            day_set = inter;
        }
        first = false;
    }

    StockPanel panel;
    panel.days.assign(day_set.begin(), day_set.end());
    std::size_t t_total = panel.days.size();
    if (t_total == 0) throw std::runtime_error("load_ohlcv_csv: no shared trading days");

    std::vector<std::pair<std::string, std::vector<OhlcvRecord>>> kept;
    for (auto& [tk, recs] : by_ticker) {
        std::vector<OhlcvRecord> row(t_total);
        bool ok = true;
        const OhlcvRecord* last = nullptr;
        for (std::size_t t = 0; t < t_total; ++t) {
            auto it = recs.find(panel.days[t]);
            if (it != recs.end()) {
                row[t] = it->second;
                last = &it->second;
            } else if (opts.forward_fill && last) {
                row[t] = *last;
                row[t].date = panel.days[t];
                row[t].open = row[t].high = row[t].low = row[t].close = last->close;
                row[t].volume = 0;
            } else {
                ok = false;  // gap with no fill source: reject ticker
                break;
            }
        }
        if (ok) kept.emplace_back(tk, std::move(row));
    }
    if (kept.empty()) throw std::runtime_error("load_ohlcv_csv: every ticker rejected");
    if (opts.min_usable_days > 0 && t_total < opts.min_usable_days)
        throw std::runtime_error("load_ohlcv_csv: only " + std::to_string(t_total) +
                                 " usable days, need " + std::to_string(opts.min_usable_days));

    std::size_t n = kept.size();
    panel.raw = Tensor::zeros({n, t_total, 5});
    panel.closes = Tensor::zeros({n, t_total});
    for (std::size_t i = 0; i < n; ++i) {
        panel.tickers.push_back(kept[i].first);
        for (std::size_t t = 0; t < t_total; ++t) {
            const OhlcvRecord& r = kept[i].second[t];
            double* cell = &panel.raw.data[(i * t_total + t) * 5];
            cell[0] = r.open;
            cell[1] = r.high;
            cell[2] = r.low;
            cell[3] = r.close;
            cell[4] = r.volume;
            panel.closes.data[i * t_total + t] = r.close;
        }
    }
    return panel;
}

void compute_features(StockPanel& panel, const IndicatorConfig& cfg) {
    std::size_t n = panel.n_stocks(), t_total = panel.n_days();
    std::size_t warmup = 0;
    for (auto w : cfg.windows) warmup = std::max(warmup, w);
    if (warmup >= t_total)
        throw std::runtime_error("compute_features: window " + std::to_string(warmup) +
                                 " exceeds available history " + std::to_string(t_total));

    std::vector<std::string> names = {"open", "high", "low", "close", "volume"};
    for (auto w : cfg.windows) {
        std::string k = std::to_string(w);
        names.push_back("ret_" + k);
        names.push_back("ma_ratio_" + k);
        names.push_back("vol_" + k);
        names.push_back("volume_ratio_" + k);
        names.push_back("rsi_" + k);
    }
    std::size_t f = names.size();
    std::size_t t_keep = t_total - warmup;
    Tensor feat = Tensor::zeros({n, t_keep, f});

    auto close_at = [&](std::size_t i, std::size_t t) { return panel.closes.data[i * t_total + t]; };
    auto volume_at = [&](std::size_t i, std::size_t t) {
        return panel.raw.data[(i * t_total + t) * 5 + 4];
    };

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t tt = 0; tt < t_keep; ++tt) {
            std::size_t t = tt + warmup;
            double* out = &feat.data[(i * t_keep + tt) * f];
            for (std::size_t a = 0; a < 5; ++a) out[a] = panel.raw.data[(i * t_total + t) * 5 + a];
            std::size_t col = 5;
            for (auto w : cfg.windows) {
                double c0 = close_at(i, t - w), ct = close_at(i, t);
                out[col++] = c0 != 0.0 ? (ct - c0) / c0 : 0.0;  // k-day return
                double ma = 0.0;
                for (std::size_t j = 0; j < w; ++j) ma += close_at(i, t - j);
                ma /= static_cast<double>(w);
                out[col++] = ma != 0.0 ? ct / ma : 0.0;  // MA ratio
                // rolling volatility: population std of the w daily returns ending at t
                double mu = 0.0;
                std::vector<double> rets(w);
                for (std::size_t j = 0; j < w; ++j) {
                    double prev = close_at(i, t - j - 1), cur = close_at(i, t - j);
                    rets[j] = prev != 0.0 ? cur / prev - 1.0 : 0.0;
                    mu += rets[j];
                }
                mu /= static_cast<double>(w);
                double var = 0.0;
                for (double rr : rets) var += (rr - mu) * (rr - mu);
                out[col++] = std::sqrt(var / static_cast<double>(w));
                double mv = 0.0;
                for (std::size_t j = 0; j < w; ++j) mv += volume_at(i, t - j);
                mv /= static_cast<double>(w);
                out[col++] = mv != 0.0 ? volume_at(i, t) / mv : 0.0;  // volume ratio
                double gain = 0.0, loss = 0.0;
                for (std::size_t j = 0; j < w; ++j) {
                    double d = close_at(i, t - j) - close_at(i, t - j - 1);
                    if (d > 0) gain += d;
                    else loss -= d;
                }
                out[col++] = (gain + loss) > 0.0 ? 100.0 * gain / (gain + loss) : 50.0;  // RSI
            }
        }
    }

    // Drop warm-up days uniformly from the panel's day axis.
    StockPanel trimmed;
    trimmed.tickers = panel.tickers;
    trimmed.days.assign(panel.days.begin() + static_cast<std::ptrdiff_t>(warmup), panel.days.end());
    trimmed.raw = Tensor::zeros({n, t_keep, 5});
    trimmed.closes = Tensor::zeros({n, t_keep});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t tt = 0; tt < t_keep; ++tt) {
            for (std::size_t a = 0; a < 5; ++a)
                trimmed.raw.data[(i * t_keep + tt) * 5 + a] =
                    panel.raw.data[(i * t_total + tt + warmup) * 5 + a];
            trimmed.closes.data[i * t_keep + tt] = panel.closes.data[i * t_total + tt + warmup];
        }
    trimmed.features = std::move(feat);
    trimmed.feature_names = std::move(names);
    trimmed.warmup_dropped = warmup;
    panel = std::move(trimmed);
}

Tensor make_labels(const StockPanel& panel, std::size_t d) {
    if (d < 1) throw std::runtime_error("make_labels: horizon must be >= 1");
    std::size_t n = panel.n_stocks(), t_total = panel.n_days();
    if (d >= t_total) throw std::runtime_error("make_labels: horizon exceeds panel length");
    std::size_t t_usable = t_total - d;
    Tensor labels = Tensor::zeros({n, t_usable});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < t_usable; ++t)
            labels.data[i * t_usable + t] =
                panel.closes.data[i * t_total + t + d] > panel.closes.data[i * t_total + t] ? 1.0 : 0.0;
    return labels;
}

DatasetSplit split_dataset(const StockPanel& panel, std::size_t lookback, std::size_t horizon,
                           double r_train, double r_val, double r_test) {
    if (r_train <= 0 || r_val <= 0 || r_test <= 0)
        throw std::runtime_error("split_dataset: ratios must be positive");
    std::size_t total = panel.n_days();
    double rsum = r_train + r_val + r_test;
    DatasetSplit s;
    std::size_t n_train = static_cast<std::size_t>(std::floor(total * r_train / rsum));
    std::size_t n_val = static_cast<std::size_t>(std::floor(total * r_val / rsum));
    s.train_end = n_train;
    s.val_end = n_train + n_val;
    s.test_end = total;
    std::size_t need = lookback + horizon;
    for (int sp = 0; sp < 3; ++sp)
        if (s.end(sp) - s.begin(sp) < need)
            throw std::runtime_error("split_dataset: split " + std::to_string(sp) + " has " +
                                     std::to_string(s.end(sp) - s.begin(sp)) +
                                     " days, cannot hold a (T=" + std::to_string(lookback) +
                                     ", d=" + std::to_string(horizon) + ") window");
    return s;
}

void normalize_split(DatasetSplit& split, StockPanel& panel) {
    std::size_t n = panel.n_stocks(), t_total = panel.n_days(), f = panel.n_features();
    for (int sp = 0; sp < 3; ++sp) {
        std::size_t b = split.begin(sp), e = split.end(sp);
        split.mean[sp] = Tensor::zeros({1, f});
        split.stddev[sp] = Tensor::zeros({1, f});
        double cnt = static_cast<double>(n * (e - b));
        for (std::size_t j = 0; j < f; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = b; t < e; ++t) mu += panel.features.data[(i * t_total + t) * f + j];
            mu /= cnt;
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = b; t < e; ++t) {
                    double d = panel.features.data[(i * t_total + t) * f + j] - mu;
                    var += d * d;
                }
            double sigma = std::sqrt(var / cnt);
            split.mean[sp][j] = mu;
            split.stddev[sp][j] = sigma;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = b; t < e; ++t) {
                    double& v = panel.features.data[(i * t_total + t) * f + j];
                    v = sigma < numerics::kDegenerateStd ? 0.0 : (v - mu) / sigma;
                }
        }
    }
}

std::vector<double> MockProvider::embed(const std::string& ticker, const std::string& date,
                                        const std::string& text) const {
    std::string key = ticker + "|" + date + "|" + text;
    std::uint64_t state = fnv1a64(key);
    Rng rng(state);
    std::vector<double> v(dim_);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

FileProvider::FileProvider(const std::string& tensor_path, const std::string& manifest_path) {
    table_ = read_tensor_file(tensor_path);
    if (table_.rank() != 2) throw std::runtime_error("FileProvider: embedding table must be 2-D");
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("FileProvider: cannot open manifest " + manifest_path);
    nlohmann::json j;
    in >> j;
    for (auto& [k, v] : j.items()) rows_[k] = v.get<std::size_t>();
}

std::vector<double> FileProvider::embed(const std::string& ticker, const std::string& date,
                                        const std::string&) const {
    auto it = rows_.find(ticker + "|" + date);
    if (it == rows_.end())
        throw std::runtime_error("FileProvider: no embedding for " + ticker + "|" + date);
    if (it->second >= table_.rows())
        throw std::runtime_error("FileProvider: manifest row out of range for " + ticker);
    std::vector<double> v(table_.cols());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = table_.at(it->second, j);
    return v;
}

RemoteProvider::RemoteProvider(std::string url, std::size_t dim, int retries)
    : url_(std::move(url)), dim_(dim), retries_(retries) {}

std::vector<double> RemoteProvider::embed(const std::string& ticker, const std::string& date,
                                          const std::string& text) const {
    // Split url into host part and path.
    auto pos = url_.find('/', url_.find("://") == std::string::npos ? 0 : url_.find("://") + 3);
    std::string host = pos == std::string::npos ? url_ : url_.substr(0, pos);
    std::string path = pos == std::string::npos ? "/" : url_.substr(pos);
    nlohmann::json req = {{"ticker", ticker}, {"date", date}, {"text", text}};
    std::string last_err;
    for (int attempt = 0; attempt <= retries_; ++attempt) {
        httplib::Client cli(host);
        cli.set_read_timeout(10, 0);
        auto res = cli.Post(path, req.dump(), "application/json");
        if (!res || res->status != 200) {
            last_err = res ? "HTTP " + std::to_string(res->status) : "connection failed";
            continue;
        }
        nlohmann::json body = nlohmann::json::parse(res->body, nullptr, false);
        if (body.is_discarded() || !body.contains("embedding")) {
            last_err = "malformed response body";
            continue;
        }
        std::vector<double> v = body["embedding"].get<std::vector<double>>();
        if (v.size() != dim_)
            throw std::runtime_error("RemoteProvider: expected dimension " + std::to_string(dim_) +
                                     ", got " + std::to_string(v.size()));
        return v;
    }
    throw std::runtime_error("RemoteProvider: request to " + url_ + " failed: " + last_err);
}

void attach_embeddings(StockPanel& panel, const EmbeddingProvider& news_provider,
                       const EmbeddingProvider& time_provider) {
    std::size_t n = panel.n_stocks(), t_total = panel.n_days();
    std::size_t dn = news_provider.dim(), dt = time_provider.dim();
    panel.news = Tensor::zeros({n, t_total, dn});
    panel.time_emb = Tensor::zeros({t_total, dt});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < t_total; ++t) {
            auto v = news_provider.embed(panel.tickers[i], panel.days[t]);
            if (v.size() != dn) throw std::runtime_error("attach_embeddings: news dim mismatch");
            std::copy(v.begin(), v.end(), panel.news.data.begin() +
                                              static_cast<std::ptrdiff_t>((i * t_total + t) * dn));
        }
    for (std::size_t t = 0; t < t_total; ++t) {
        auto v = time_provider.embed("", panel.days[t]);
        if (v.size() != dt) throw std::runtime_error("attach_embeddings: time dim mismatch");
        std::copy(v.begin(), v.end(),
                  panel.time_emb.data.begin() + static_cast<std::ptrdiff_t>(t * dt));
    }
}

}  // namespace h3m::dataio
