#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "h3m/dataio.hpp"
#include "h3m/numerics.hpp"
#include "h3m/rng.hpp"

using namespace h3m;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    std::string path = (fs::temp_directory_path() / name).string();
    std::ofstream out(path);
    out << content;
    return path;
}

// Two tickers, five shared days, simple monotone closes.
std::string tiny_csv() {
    std::string s = "date,ticker,open,high,low,close,volume\n";
    const char* days[] = {"2024-01-01", "2024-01-02", "2024-01-03", "2024-01-04", "2024-01-05"};
    for (int t = 0; t < 5; ++t) {
        double ca = 100 + t, cb = 50 + 2 * t;
        s += std::string(days[t]) + ",AAA," + std::to_string(ca - 1) + "," + std::to_string(ca + 1) +
             "," + std::to_string(ca - 2) + "," + std::to_string(ca) + ",1000\n";
        s += std::string(days[t]) + ",BBB," + std::to_string(cb - 1) + "," + std::to_string(cb + 1) +
             "," + std::to_string(cb - 2) + "," + std::to_string(cb) + ",2000\n";
    }
    return s;
}

dataio::StockPanel synthetic_panel(std::size_t n, std::size_t t_total, std::uint64_t seed) {
    dataio::StockPanel p;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) p.tickers.push_back("S" + std::to_string(i));
    for (std::size_t t = 0; t < t_total; ++t) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "2020-%02zu-%02zu", 1 + t / 28, 1 + t % 28);
        p.days.push_back(buf);
    }
    p.closes = Tensor::zeros({n, t_total});
    p.raw = Tensor::zeros({n, t_total, 5});
    p.feature_names = {"f0", "f1"};
    p.features = Tensor::zeros({n, t_total, 2});
    for (auto& v : p.closes.data) v = rng.uniform(50, 150);
    for (auto& v : p.features.data) v = rng.uniform(-2, 2);
    return p;
}

}  // namespace

TEST_CASE("load_ohlcv_csv basic panel") {
    auto path = write_temp("h3m_tiny.csv", tiny_csv());
    auto panel = dataio::load_ohlcv_csv(path);
    CHECK(panel.n_stocks() == 2);
    CHECK(panel.n_days() == 5);
    CHECK(panel.tickers == std::vector<std::string>{"AAA", "BBB"});
    CHECK(panel.closes.at(0, 0) == doctest::Approx(100));
    CHECK(panel.closes.at(1, 4) == doctest::Approx(58));
    CHECK(panel.day_index("2024-01-03") == 2);
    CHECK_THROWS_WITH_AS(static_cast<void>(panel.day_index("2024-02-01")),
                         doctest::Contains("2024-02-01"), std::runtime_error);
}

TEST_CASE("day axis is the intersection by default") {
    std::string csv = tiny_csv();
    // BBB misses day 3: intersection should drop it for both tickers.
    std::string needle = "2024-01-03,BBB";
    auto pos = csv.find(needle);
    auto eol = csv.find('\n', pos);
    csv.erase(pos, eol - pos + 1);
    auto path = write_temp("h3m_gap.csv", csv);
    auto panel = dataio::load_ohlcv_csv(path);
    CHECK(panel.n_stocks() == 2);
    CHECK(panel.n_days() == 4);
    for (const auto& d : panel.days) CHECK(d != "2024-01-03");

    // forward_fill keeps the union and fills BBB's gap from the prior close
    dataio::LoadOptions opts;
    opts.forward_fill = true;
    auto filled = dataio::load_ohlcv_csv(path, opts);
    CHECK(filled.n_days() == 5);
    CHECK(filled.closes.at(1, 2) == doctest::Approx(52));  // day-2 close carried forward
}

TEST_CASE("malformed rows fail with line numbers") {
    auto bad_fields = write_temp("h3m_bad1.csv",
                                 "date,ticker,open,high,low,close,volume\n"
                                 "2024-01-01,AAA,1,2\n");
    CHECK_THROWS_WITH_AS(dataio::load_ohlcv_csv(bad_fields), doctest::Contains("line 2"),
                         std::runtime_error);

    auto bad_ohlc = write_temp("h3m_bad2.csv",
                               "date,ticker,open,high,low,close,volume\n"
                               "2024-01-01,AAA,10,9,11,10,100\n");  // high < low
    CHECK_THROWS_WITH_AS(dataio::load_ohlcv_csv(bad_ohlc), doctest::Contains("line 2"),
                         std::runtime_error);

    auto bad_header = write_temp("h3m_bad3.csv", "date,close\n");
    CHECK_THROWS_AS(dataio::load_ohlcv_csv(bad_header), std::runtime_error);
}

TEST_CASE("compute_features oracles with window 1") {
    auto path = write_temp("h3m_feat.csv", tiny_csv());
    auto panel = dataio::load_ohlcv_csv(path);
    dataio::IndicatorConfig cfg;
    cfg.windows = {1};
    dataio::compute_features(panel, cfg);
    CHECK(panel.warmup_dropped == 1);
    CHECK(panel.n_days() == 4);
    CHECK(panel.n_features() == 10);

    auto col = [&](const std::string& name) {
        for (std::size_t j = 0; j < panel.feature_names.size(); ++j)
            if (panel.feature_names[j] == name) return j;
        throw std::runtime_error("missing feature " + name);
    };
    // AAA closes 100,101,...: 1-day return at first kept day = (101-100)/100
    std::size_t f = panel.n_features();
    double ret = panel.features.data[0 * f + col("ret_1")];
    CHECK(ret == doctest::Approx(0.01).epsilon(1e-12));
    // BBB: (52-50)/50 = 0.04
    double retb = panel.features.data[(1 * panel.n_days() + 0) * f + col("ret_1")];
    CHECK(retb == doctest::Approx(0.04).epsilon(1e-12));
    // MA ratio with window 1 is exactly 1
    CHECK(panel.features.data[0 * f + col("ma_ratio_1")] == doctest::Approx(1.0));
    // volatility of a single return is 0
    CHECK(panel.features.data[0 * f + col("vol_1")] == doctest::Approx(0.0));
    // monotone rising closes: RSI = 100
    CHECK(panel.features.data[0 * f + col("rsi_1")] == doctest::Approx(100.0));
    // raw attributes preserved in the first five columns
    CHECK(panel.features.data[0 * f + col("close")] == doctest::Approx(101.0));
}

TEST_CASE("constant closes give zero returns and neutral RSI") {
    std::string s = "date,ticker,open,high,low,close,volume\n";
    for (int t = 0; t < 8; ++t) {
        char d[16];
        std::snprintf(d, sizeof d, "2024-01-%02d", t + 1);
        s += std::string(d) + ",AAA,100,100,100,100,500\n";
    }
    auto panel = dataio::load_ohlcv_csv(write_temp("h3m_const.csv", s));
    dataio::IndicatorConfig cfg;
    cfg.windows = {5};
    dataio::compute_features(panel, cfg);
    auto idx = [&](const char* n) {
        for (std::size_t j = 0; j < panel.feature_names.size(); ++j)
            if (panel.feature_names[j] == n) return j;
        FAIL("missing feature");
        return std::size_t{0};
    };
    for (std::size_t t = 0; t < panel.n_days(); ++t) {
        const double* row = &panel.features.data[t * panel.n_features()];
        CHECK(row[idx("ret_5")] == doctest::Approx(0.0));
        CHECK(row[idx("vol_5")] == doctest::Approx(0.0));
        CHECK(row[idx("rsi_5")] == doctest::Approx(50.0));
        CHECK(row[idx("volume_ratio_5")] == doctest::Approx(1.0));
    }
}

TEST_CASE("make_labels strict inequality") {
    auto panel = synthetic_panel(1, 4, 1);
    panel.closes = Tensor::matrix(1, 4, {100, 101, 100, 99});
    Tensor lab = dataio::make_labels(panel, 1);
    CHECK(lab.shape == std::vector<std::size_t>{1, 3});
    CHECK(lab[0] == 1.0);  // 100 -> 101
    CHECK(lab[1] == 0.0);  // 101 -> 100
    CHECK(lab[2] == 0.0);  // 100 -> 99

    panel.closes = Tensor::matrix(1, 4, {100, 100, 100, 100});
    Tensor flat = dataio::make_labels(panel, 2);
    for (double v : flat.data) CHECK(v == 0.0);  // equality is the "otherwise" branch

    // labels depend only on closes: perturbing features changes nothing
    auto p2 = synthetic_panel(3, 30, 2);
    Tensor l1 = dataio::make_labels(p2, 3);
    for (auto& v : p2.features.data) v += 5.0;
    Tensor l2 = dataio::make_labels(p2, 3);
    CHECK(l1.data == l2.data);
}

TEST_CASE("split_dataset ratios") {
    auto p100 = synthetic_panel(2, 100, 3);
    auto s = dataio::split_dataset(p100, 5, 2);
    CHECK(s.train_end == 70);
    CHECK(s.val_end == 80);
    CHECK(s.test_end == 100);

    auto p1423 = synthetic_panel(1, 1423, 4);
    auto s2 = dataio::split_dataset(p1423, 20, 10);
    CHECK(s2.train_end == 996);
    CHECK(s2.val_end == 996 + 142);
    CHECK(s2.test_end == 1423);

    auto p10 = synthetic_panel(1, 10, 5);
    CHECK_THROWS(dataio::split_dataset(p10, 20, 10));
}

TEST_CASE("normalize_split uses owning-split statistics only") {
    auto panel = synthetic_panel(3, 60, 6);
    // Shift the test segment so train and test stats must differ.
    auto s = dataio::split_dataset(panel, 3, 2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = s.val_end; t < s.test_end; ++t)
            for (std::size_t j = 0; j < 2; ++j)
                panel.features.data[(i * 60 + t) * 2 + j] += 10.0;

    dataio::normalize_split(s, panel);
    CHECK(std::abs(s.mean[0][0] - s.mean[2][0]) > 1.0);  // leak check
    // each split internally standardized
    for (int sp = 0; sp < 3; ++sp) {
        for (std::size_t j = 0; j < 2; ++j) {
            double mu = 0, var = 0, cnt = 3.0 * (s.end(sp) - s.begin(sp));
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t t = s.begin(sp); t < s.end(sp); ++t)
                    mu += panel.features.data[(i * 60 + t) * 2 + j];
            mu /= cnt;
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t t = s.begin(sp); t < s.end(sp); ++t) {
                    double d = panel.features.data[(i * 60 + t) * 2 + j] - mu;
                    var += d * d;
                }
            CHECK(std::abs(mu) < 1e-9);
            CHECK(std::abs(std::sqrt(var / cnt) - 1.0) < 1e-9);
        }
    }

    // constant feature maps to zeros
    auto pc = synthetic_panel(1, 30, 7);
    for (std::size_t t = 0; t < 30; ++t) pc.features.data[t * 2] = 4.2;
    auto sc = dataio::split_dataset(pc, 2, 1);
    dataio::normalize_split(sc, pc);
    for (std::size_t t = 0; t < 30; ++t) CHECK(pc.features.data[t * 2] == 0.0);
}

TEST_CASE("mock provider determinism") {
    dataio::MockProvider p(16);
    auto a = p.embed("AAPL", "2024-01-02", "");
    auto b = p.embed("AAPL", "2024-01-02", "");
    CHECK(a == b);
    CHECK(a.size() == 16);
    for (double v : a) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    auto c = p.embed("MSFT", "2024-01-02", "");
    CHECK(a != c);
    auto d = p.embed("AAPL", "2024-01-03", "");
    CHECK(a != d);
    // frozen oracle: first entry of the splitmix64 stream seeded by
    // fnv1a64("AAPL|2024-01-02|"), mapped to [-1, 1)
    Rng rng(fnv1a64("AAPL|2024-01-02|"));
    CHECK(a[0] == rng.uniform(-1.0, 1.0));
}

TEST_CASE("file provider round trip") {
    Tensor table = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    auto tpath = (fs::temp_directory_path() / "h3m_emb.bin").string();
    write_tensor_file(tpath, table, "f64");
    auto mpath = write_temp("h3m_emb.json", R"({"AAA|2024-01-01":0,"BBB|2024-01-01":1})");
    dataio::FileProvider p(tpath, mpath);
    CHECK(p.dim() == 3);
    CHECK(p.embed("BBB", "2024-01-01", "") == std::vector<double>{4, 5, 6});
    CHECK_THROWS_WITH_AS(static_cast<void>(p.embed("CCC", "2024-01-01", "")),
                         doctest::Contains("CCC|2024-01-01"), std::runtime_error);
}

TEST_CASE("remote provider over a local http server") {
    httplib::Server svr;
    std::atomic<int> wrong_dim{0};
    svr.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
        auto body = nlohmann::json::parse(req.body);
        std::string ticker = body.at("ticker");
        if (ticker == "SHORT") {
            res.set_content(R"({"embedding":[1.0]})", "application/json");
            ++wrong_dim;
            return;
        }
        nlohmann::json out;
        out["embedding"] = {1.5, -2.5, double(ticker.size())};
        res.set_content(out.dump(), "application/json");
    });
    int port = svr.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { svr.listen_after_bind(); });
    svr.wait_until_ready();

    dataio::RemoteProvider p("http://127.0.0.1:" + std::to_string(port) + "/embed", 3, 0);
    auto v = p.embed("AAA", "2024-01-01", "hello");
    CHECK(v == std::vector<double>{1.5, -2.5, 3.0});
    CHECK_THROWS_WITH_AS(static_cast<void>(p.embed("SHORT", "2024-01-01", "")),
                         doctest::Contains("dimension"), std::runtime_error);

    svr.stop();
    th.join();

    // dead endpoint fails after retries
    dataio::RemoteProvider dead("http://127.0.0.1:1/none", 3, 1);
    CHECK_THROWS(static_cast<void>(dead.embed("AAA", "2024-01-01", "")));
}

TEST_CASE("attach_embeddings fills panel tensors") {
    auto path = write_temp("h3m_att.csv", tiny_csv());
    auto panel = dataio::load_ohlcv_csv(path);
    dataio::MockProvider news(4), tprov(3);
    dataio::attach_embeddings(panel, news, tprov);
    CHECK(panel.news.shape == std::vector<std::size_t>{2, 5, 4});
    CHECK(panel.time_emb.shape == std::vector<std::size_t>{5, 3});
    // per-(ticker, day) vector matches a direct provider call
    auto direct = news.embed("BBB", panel.days[2], "");
    for (std::size_t k = 0; k < 4; ++k)
        CHECK(panel.news.data[(1 * 5 + 2) * 4 + k] == direct[k]);
}
