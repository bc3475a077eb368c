#include "h3m/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace h3m::numerics {

namespace {

struct AxisView {
    std::size_t outer, len, inner;
};

AxisView axis_view(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw std::runtime_error("axis out of range for tensor " + x.shape_str());
    AxisView v{1, x.shape[axis], 1};
    if (v.len == 0) throw std::runtime_error("empty axis");
    for (std::size_t i = 0; i < axis; ++i) v.outer *= x.shape[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) v.inner *= x.shape[i];
    return v;
}

void check_distribution(const std::vector<double>& p, const char* who) {
    double s = 0.0;
    for (double v : p) {
        if (v < 0.0) throw std::runtime_error(std::string(who) + ": negative probability entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
        throw std::runtime_error(std::string(who) + ": probabilities sum to " + std::to_string(s));
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
    ensure_finite(x, "softmax input");
    AxisView v = axis_view(x, axis);
    Tensor out = x;
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t in = 0; in < v.inner; ++in) {
            double mx = -1e308;
            for (std::size_t i = 0; i < v.len; ++i)
                mx = std::max(mx, x.data[(o * v.len + i) * v.inner + in]);
            double sum = 0.0;
            for (std::size_t i = 0; i < v.len; ++i) {
                double e = std::exp(x.data[(o * v.len + i) * v.inner + in] - mx);
                out.data[(o * v.len + i) * v.inner + in] = e;
                sum += e;
            }
            for (std::size_t i = 0; i < v.len; ++i)
                out.data[(o * v.len + i) * v.inner + in] /= sum;
        }
    return out;
}

Tensor zscore(const Tensor& x, std::size_t axis) {
    ensure_finite(x, "zscore input");
    AxisView v = axis_view(x, axis);
    Tensor out = x;
    double n = static_cast<double>(v.len);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t in = 0; in < v.inner; ++in) {
            double mu = 0.0;
            for (std::size_t i = 0; i < v.len; ++i)
                mu += x.data[(o * v.len + i) * v.inner + in];
            mu /= n;
            double var = 0.0;
            for (std::size_t i = 0; i < v.len; ++i) {
                double d = x.data[(o * v.len + i) * v.inner + in] - mu;
                var += d * d;
            }
            double sigma = std::sqrt(var / n);
            for (std::size_t i = 0; i < v.len; ++i) {
                std::size_t at = (o * v.len + i) * v.inner + in;
                out.data[at] = sigma < kDegenerateStd ? 0.0 : (x.data[at] - mu) / sigma;
            }
        }
    return out;
}

double kl_div(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::runtime_error("kl_div: length mismatch");
    check_distribution(p, "kl_div p");
    check_distribution(q, "kl_div q");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0) throw std::runtime_error("kl_div: q has zero mass where p > 0");
        s += p[i] * std::log(p[i] / q[i]);
    }
    return s;
}

double jsd(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw std::runtime_error("jsd: length mismatch");
    check_distribution(p, "jsd p");
    check_distribution(q, "jsd q");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) s += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) s += 0.5 * q[i] * std::log(q[i] / m);
    }
    return s;
}

double jsd_columns(const Tensor& h, std::size_t col_a, std::size_t col_b) {
    std::size_t r = h.rows();
    double s = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
        double pa = h.at(k, col_a), pb = h.at(k, col_b);
        double m = 0.5 * (pa + pb);
        if (pa > 0.0) s += 0.5 * pa * std::log(pa / m);
        if (pb > 0.0) s += 0.5 * pb * std::log(pb / m);
    }
    return s;
}

}  // namespace h3m::numerics
