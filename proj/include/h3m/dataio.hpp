#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "h3m/tensor.hpp"

namespace h3m::dataio {

struct OhlcvRecord {
    std::string date;  // ISO-8601
    std::string ticker;
    double open = 0, high = 0, low = 0, close = 0, volume = 0;
};

// Aligned (stock x day) block. `raw` keeps the five base attributes for
// feature computation; `features`/`news`/`time_emb` are filled by later
// pipeline stages.
struct StockPanel {
    std::vector<std::string> tickers;  // N
    std::vector<std::string> days;     // T_total, ascending
    Tensor raw;       // N x T_total x 5 (open, high, low, close, volume)
    Tensor closes;    // N x T_total
    Tensor features;  // N x T_total x F after compute_features
    std::vector<std::string> feature_names;
    Tensor news;      // N x T_total x D_news
    Tensor time_emb;  // T_total x D_time
    std::size_t warmup_dropped = 0;

    std::size_t n_stocks() const { return tickers.size(); }
    std::size_t n_days() const { return days.size(); }
    std::size_t n_features() const { return feature_names.size(); }
    std::size_t day_index(const std::string& date) const;  // throws naming the date
};

struct LoadOptions {
    bool forward_fill = false;     // default: align on day intersection
    std::size_t min_usable_days = 0;  // reject ticker below this (T + d)
};

// CSV header: date,ticker,open,high,low,close,volume. Groups by ticker,
// sorts by date, aligns all tickers on a shared day axis.
StockPanel load_ohlcv_csv(const std::string& path, const LoadOptions& opts = {});

struct IndicatorConfig {
    std::vector<std::size_t> windows = {5, 10, 20};
};

// Fills panel.features with the 5 raw attributes plus
// {return, MA ratio, volatility, volume ratio, RSI} per window, dropping
// the warm-up prefix of the day axis uniformly across stocks.
void compute_features(StockPanel& panel, const IndicatorConfig& cfg = {});

// Label[n, t] = 1 iff close(t+d) > close(t); defined for t < T_total - d.
Tensor make_labels(const StockPanel& panel, std::size_t d);

struct DatasetSplit {
    // Contiguous day-index ranges: [0, train_end), [train_end, val_end),
    // [val_end, test_end).
    std::size_t train_end = 0, val_end = 0, test_end = 0;
    // Per-split feature statistics, each 1 x F.
    Tensor mean[3], stddev[3];

    std::size_t begin(int split) const { return split == 0 ? 0 : (split == 1 ? train_end : val_end); }
    std::size_t end(int split) const { return split == 0 ? train_end : (split == 1 ? val_end : test_end); }
};

// Chronological partition by day count; floors go to train then val,
// remainder to test. Throws if any split cannot hold one (T, d) window.
DatasetSplit split_dataset(const StockPanel& panel, std::size_t lookback, std::size_t horizon,
                           double r_train = 7, double r_val = 1, double r_test = 2);

// Z-scores panel.features in place, per feature, using statistics computed
// from the owning split only. Populates split.mean/stddev.
void normalize_split(DatasetSplit& split, StockPanel& panel);

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    // Returns a length-dim() vector for (ticker, date, text).
    virtual std::vector<double> embed(const std::string& ticker, const std::string& date,
                                      const std::string& text = "") const = 0;
};

// Deterministic pseudorandom vectors: FNV-1a of "ticker|date|text" seeds a
// splitmix64 stream, entries uniform in [-1, 1]. Bit-identical across runs
// and platforms.
class MockProvider : public EmbeddingProvider {
public:
    explicit MockProvider(std::size_t dim) : dim_(dim) {}
    std::size_t dim() const override { return dim_; }
    std::vector<double> embed(const std::string& ticker, const std::string& date,
                              const std::string& text) const override;

private:
    std::size_t dim_;
};

// Rows of a tensor file addressed through a JSON manifest
// {"ticker|date": row_index}.
class FileProvider : public EmbeddingProvider {
public:
    FileProvider(const std::string& tensor_path, const std::string& manifest_path);
    std::size_t dim() const override { return table_.cols(); }
    std::vector<double> embed(const std::string& ticker, const std::string& date,
                              const std::string& text) const override;

private:
    Tensor table_;
    std::map<std::string, std::size_t> rows_;
};

// HTTP POST {"ticker":..,"date":..,"text":..} -> {"embedding":[...]}.
class RemoteProvider : public EmbeddingProvider {
public:
    RemoteProvider(std::string url, std::size_t dim, int retries = 2);
    std::size_t dim() const override { return dim_; }
    std::vector<double> embed(const std::string& ticker, const std::string& date,
                              const std::string& text) const override;

private:
    std::string url_;
    std::size_t dim_;
    int retries_;
};

// Fills panel.news (per stock/day) and panel.time_emb (per day) from the
// given providers.
void attach_embeddings(StockPanel& panel, const EmbeddingProvider& news_provider,
                       const EmbeddingProvider& time_provider);

}  // namespace h3m::dataio
