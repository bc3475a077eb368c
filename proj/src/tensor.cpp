#include "h3m/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace h3m {

static std::size_t shape_product(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_product(shape) != data.size())
        throw std::runtime_error("Tensor: shape " + shape_str() + " does not match data length " +
                                 std::to_string(data.size()));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> d) {
    return Tensor({r, c}, std::move(d));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw std::runtime_error("Tensor: rows() on rank-" + std::to_string(rank()));
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw std::runtime_error("Tensor: cols() on rank-" + std::to_string(rank()));
    return shape[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

Tensor Tensor::reshaped(std::vector<std::size_t> s) const {
    if (shape_product(s) != data.size())
        throw std::runtime_error("Tensor: reshape to incompatible extent");
    return Tensor(std::move(s), data);
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void ensure_finite(const Tensor& t, const std::string& context) {
    for (double v : t.data)
        if (!std::isfinite(v))
            throw std::runtime_error(context + ": non-finite value in tensor " + t.shape_str());
}

void write_tensor_file(const std::string& path, const Tensor& t, const std::string& dtype) {
    if (dtype != "f32" && dtype != "f64")
        throw std::runtime_error("write_tensor_file: unsupported dtype " + dtype);
    nlohmann::json header;
    header["shape"] = t.shape;
    header["dtype"] = dtype;
    header["order"] = "row-major";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_tensor_file: cannot open " + path);
    out << header.dump() << "\n";
    if (dtype == "f32") {
        std::vector<float> buf(t.data.begin(), t.data.end());
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write_tensor_file: write failed for " + path);
}

Tensor read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_tensor_file: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("read_tensor_file: missing header in " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    std::vector<std::size_t> shape = header.at("shape").get<std::vector<std::size_t>>();
    std::string dtype = header.at("dtype").get<std::string>();
    std::string order = header.value("order", "row-major");
    if (order != "row-major")
        throw std::runtime_error("read_tensor_file: unsupported order " + order);
    std::size_t n = shape_product(shape);
    std::vector<double> data(n);
    if (dtype == "f32") {
        std::vector<float> buf(n);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw std::runtime_error("read_tensor_file: truncated payload in " + path);
        for (std::size_t i = 0; i < n; ++i) data[i] = buf[i];
    } else if (dtype == "f64") {
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw std::runtime_error("read_tensor_file: truncated payload in " + path);
    } else {
        throw std::runtime_error("read_tensor_file: unsupported dtype " + dtype);
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace h3m
