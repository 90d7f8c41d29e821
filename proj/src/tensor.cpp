#include "fedtp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fedtp {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
    }
    data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    check_invariants();
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
}

int Tensor::dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw std::out_of_range("tensor dim index out of range");
    return shape[static_cast<std::size_t>(i)];
}

double& Tensor::at2(int r, int c) {
    int cols = dim(-1);
    return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
}

double Tensor::at2(int r, int c) const {
    int cols = dim(-1);
    return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
}

void Tensor::alloc_grad() {
    grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) grad.assign(data.size(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::check_invariants() const {
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
    }
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        throw std::invalid_argument("tensor buffer length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    if (!grad.empty() && grad.size() != data.size()) {
        throw std::invalid_argument("tensor grad length does not match data length");
    }
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double param_set_l2(const ParamSet& a, const ParamSet& b) {
    double s = 0.0;
    for (const auto& [name, ta] : a) {
        auto it = b.find(name);
        if (it == b.end()) continue;
        for (std::size_t i = 0; i < ta.data.size(); ++i) {
            double d = ta.data[i] - it->second.data[i];
            s += d * d;
        }
    }
    return std::sqrt(s);
}

double grad_map_l2(const GradMap& g) {
    double s = 0.0;
    for (const auto& [name, t] : g) {
        for (double x : t.data) s += x * x;
    }
    return std::sqrt(s);
}

}  // namespace fedtp
