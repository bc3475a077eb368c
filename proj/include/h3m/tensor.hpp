#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace h3m {

// Dense row-major tensor of doubles. Shape product must always equal the
// data length; every factory below guarantees it.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor row(std::vector<double> v);                   // 1 x n
    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d);
    static Tensor identity(std::size_t n);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return data.size() == 1; }

    // 2-D accessors; throw on rank mismatch.
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    Tensor reshaped(std::vector<std::size_t> s) const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;
};

// Throws if any entry is non-finite; `context` names the producing op.
void ensure_finite(const Tensor& t, const std::string& context);

// Shared tensor file format: one JSON header line
// {"shape":[...],"dtype":"f32"|"f64","order":"row-major"}
// followed by raw little-endian IEEE-754 payload in row-major order.
void write_tensor_file(const std::string& path, const Tensor& t,
                       const std::string& dtype = "f32");
Tensor read_tensor_file(const std::string& path);

}  // namespace h3m
