#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace fedtp {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major numeric array, 64-bit. An empty shape denotes a scalar.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty, or same length as data

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor scalar(double v);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const;  // supports negative indices

    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }
    double& at2(int r, int c);
    double at2(int r, int c) const;

    void alloc_grad();
    void zero_grad();
    bool all_finite() const;

    void check_invariants() const;  // buffer/shape and grad/shape agreement
};

bool same_shape(const Tensor& a, const Tensor& b);

// Ordered so every iteration over parameters is deterministic.
using ParamSet = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, Tensor>;

double l2_norm(const std::vector<double>& v);
double param_set_l2(const ParamSet& a, const ParamSet& b);  // ||a - b|| over shared keys
double grad_map_l2(const GradMap& g);

}  // namespace fedtp
