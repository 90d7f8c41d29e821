#include "fedtp/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fedtp/rng.hpp"

namespace fedtp {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
    throw std::invalid_argument(op + ": " + msg);
}

// Last-two-axes view: (batch, rows, cols) with any leading axes folded into batch.
struct MatView {
    int batch, rows, cols;
};

MatView mat_view(const Shape& s, const char* op) {
    if (s.size() < 2) fail(op, "needs rank >= 2, got " + shape_str(s));
    int rows = s[s.size() - 2];
    int cols = s[s.size() - 1];
    int batch = 1;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
    return {batch, rows, cols};
}

// Last-axis view: (rows, cols).
std::pair<int, int> row_view(const Shape& s, const char* op) {
    if (s.empty()) fail(op, "needs rank >= 1");
    int cols = s.back();
    int rows = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
    return {rows, cols};
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

int checked_label(double v, int limit, const char* op) {
    double r = std::nearbyint(v);
    if (!std::isfinite(v) || std::fabs(v - r) > 1e-6 || r < 0 || r >= static_cast<double>(limit)) {
        fail(op, "index value " + std::to_string(v) + " is not an integer in [0," + std::to_string(limit) + ")");
    }
    return static_cast<int>(r);
}

void round_f32(std::vector<double>& buf) {
    for (double& v : buf) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

NodeId Tape::push(TapeNode n) {
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_id(NodeId id, const char* op) const {
    if (id < 0 || id >= size()) fail(op, "node id " + std::to_string(id) + " out of range");
}

NodeId Tape::output() const {
    if (nodes_.empty()) throw std::logic_error("tape is empty");
    return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Tape::value(NodeId id) const {
    check_id(id, "value");
    if (!evaluated_) throw std::logic_error("tape has not been evaluated");
    return nodes_[static_cast<std::size_t>(id)].value;
}

NodeId Tape::input(const std::string& name, Shape shape, bool requires_grad) {
    TapeNode n;
    n.op = OpKind::input;
    n.name = name;
    n.shape = std::move(shape);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    check_id(a, "matmul");
    check_id(b, "matmul");
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    Shape out;
    if (sa.size() == 2 && sb.size() == 2) {
        if (sa[1] != sb[0]) fail("matmul", "inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
        out = {sa[0], sb[1]};
    } else if (sa.size() == 3 && sb.size() == 2) {
        if (sa[2] != sb[0]) fail("matmul", "inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
        out = {sa[0], sa[1], sb[1]};
    } else if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[1])
            fail("matmul", "batched shapes incompatible: " + shape_str(sa) + " x " + shape_str(sb));
        out = {sa[0], sa[1], sb[2]};
    } else {
        fail("matmul", "unsupported ranks: " + shape_str(sa) + " x " + shape_str(sb));
    }
    TapeNode n;
    n.op = OpKind::matmul;
    n.in = {a, b, -1};
    n.shape = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    check_id(a, "add");
    check_id(b, "add");
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (!is_suffix(sb, sa)) fail("add", "shape " + shape_str(sb) + " is not broadcastable to " + shape_str(sa));
    TapeNode n;
    n.op = OpKind::add;
    n.in = {a, b, -1};
    n.shape = sa;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
    check_id(a, "mul");
    check_id(b, "mul");
    if (at(a).shape != at(b).shape)
        fail("mul", "shapes differ: " + shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
    TapeNode n;
    n.op = OpKind::mul;
    n.in = {a, b, -1};
    n.shape = at(a).shape;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double s) {
    check_id(a, "scale");
    TapeNode n;
    n.op = OpKind::scale;
    n.in = {a, -1, -1};
    n.alpha = s;
    n.shape = at(a).shape;
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
    check_id(a, "transpose");
    Shape s = at(a).shape;
    if (s.size() < 2) fail("transpose", "needs rank >= 2, got " + shape_str(s));
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    TapeNode n;
    n.op = OpKind::transpose;
    n.in = {a, -1, -1};
    n.shape = std::move(s);
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::row_softmax(NodeId a) {
    check_id(a, "row_softmax");
    if (at(a).shape.empty()) fail("row_softmax", "needs rank >= 1");
    TapeNode n;
    n.op = OpKind::row_softmax;
    n.in = {a, -1, -1};
    n.shape = at(a).shape;
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    check_id(x, "layer_norm");
    check_id(gamma, "layer_norm");
    check_id(beta, "layer_norm");
    const Shape& sx = at(x).shape;
    if (sx.empty()) fail("layer_norm", "needs rank >= 1");
    int d = sx.back();
    if (at(gamma).shape != Shape{d} || at(beta).shape != Shape{d})
        fail("layer_norm", "gamma/beta must have shape (" + std::to_string(d) + ")");
    TapeNode n;
    n.op = OpKind::layer_norm;
    n.in = {x, gamma, beta};
    n.alpha = eps;
    n.shape = sx;
    n.requires_grad = at(x).requires_grad || at(gamma).requires_grad || at(beta).requires_grad;
    return push(std::move(n));
}

NodeId Tape::gelu(NodeId a) {
    check_id(a, "gelu");
    TapeNode n;
    n.op = OpKind::gelu;
    n.in = {a, -1, -1};
    n.shape = at(a).shape;
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
    check_id(a, "relu");
    TapeNode n;
    n.op = OpKind::relu;
    n.in = {a, -1, -1};
    n.shape = at(a).shape;
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::embed_lookup(NodeId table, NodeId ids) {
    check_id(table, "embed_lookup");
    check_id(ids, "embed_lookup");
    const Shape& st = at(table).shape;
    const Shape& si = at(ids).shape;
    if (st.size() != 2) fail("embed_lookup", "table must be rank 2, got " + shape_str(st));
    if (si.empty() || si.size() > 2) fail("embed_lookup", "ids must be rank 1 or 2, got " + shape_str(si));
    if (at(ids).requires_grad) fail("embed_lookup", "ids are not differentiable");
    Shape out = si;
    out.push_back(st[1]);
    TapeNode n;
    n.op = OpKind::embed_lookup;
    n.in = {table, ids, -1};
    n.shape = std::move(out);
    n.requires_grad = at(table).requires_grad;
    return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, Shape shape) {
    check_id(a, "reshape");
    if (shape_numel(shape) != shape_numel(at(a).shape))
        fail("reshape", "element count mismatch: " + shape_str(at(a).shape) + " -> " + shape_str(shape));
    TapeNode n;
    n.op = OpKind::reshape;
    n.in = {a, -1, -1};
    n.shape = std::move(shape);
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::concat(NodeId a, NodeId b, int axis) {
    check_id(a, "concat");
    check_id(b, "concat");
    if (axis != 0 && axis != 1) fail("concat", "axis must be 0 (rows) or 1 (cols)");
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    Shape out;
    if (sa.size() == sb.size() && (sa.size() == 2 || sa.size() == 3)) {
        out = sa;
        std::size_t cat = sa.size() - (axis == 0 ? 2 : 1);
        for (std::size_t i = 0; i < sa.size(); ++i) {
            if (i == cat) continue;
            if (sa[i] != sb[i]) fail("concat", "shapes incompatible: " + shape_str(sa) + " + " + shape_str(sb));
        }
        out[cat] = sa[cat] + sb[cat];
    } else if (sa.size() == 2 && sb.size() == 3 && axis == 0) {
        // first operand broadcast over the batch axis (class-token prepend)
        if (sa[1] != sb[2]) fail("concat", "shapes incompatible: " + shape_str(sa) + " + " + shape_str(sb));
        out = {sb[0], sa[0] + sb[1], sb[2]};
    } else {
        fail("concat", "unsupported ranks: " + shape_str(sa) + " + " + shape_str(sb));
    }
    TapeNode n;
    n.op = OpKind::concat;
    n.in = {a, b, -1};
    n.axis = axis;
    n.shape = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

NodeId Tape::slice(NodeId a, int axis, int start, int len) {
    check_id(a, "slice");
    if (axis != 0 && axis != 1) fail("slice", "axis must be 0 (rows) or 1 (cols)");
    const Shape& sa = at(a).shape;
    if (sa.size() < 2) fail("slice", "needs rank >= 2, got " + shape_str(sa));
    std::size_t cut = sa.size() - (axis == 0 ? 2 : 1);
    if (start < 0 || len <= 0 || start + len > sa[cut])
        fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of " +
                          shape_str(sa));
    Shape out = sa;
    out[cut] = len;
    TapeNode n;
    n.op = OpKind::slice;
    n.in = {a, -1, -1};
    n.axis = axis;
    n.start = start;
    n.len = len;
    n.shape = std::move(out);
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::mean_all(NodeId a) {
    check_id(a, "mean_all");
    TapeNode n;
    n.op = OpKind::mean_all;
    n.in = {a, -1, -1};
    n.shape = {};
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::mean_rows(NodeId a) {
    check_id(a, "mean_rows");
    const Shape& sa = at(a).shape;
    if (sa.size() < 2) fail("mean_rows", "needs rank >= 2, got " + shape_str(sa));
    Shape out = sa;
    out.erase(out.end() - 2);
    TapeNode n;
    n.op = OpKind::mean_rows;
    n.in = {a, -1, -1};
    n.shape = std::move(out);
    n.requires_grad = at(a).requires_grad;
    return push(std::move(n));
}

NodeId Tape::sum_all(NodeId a) {
    double n = static_cast<double>(shape_numel(at(a).shape));
    return scale(mean_all(a), n);
}

NodeId Tape::cross_entropy(NodeId logits, NodeId labels) {
    check_id(logits, "cross_entropy");
    check_id(labels, "cross_entropy");
    const Shape& sl = at(logits).shape;
    const Shape& sy = at(labels).shape;
    if (sl.size() < 2) fail("cross_entropy", "logits need rank >= 2, got " + shape_str(sl));
    Shape want(sl.begin(), sl.end() - 1);
    if (sy != want)
        fail("cross_entropy", "labels shape " + shape_str(sy) + " does not match logits " + shape_str(sl));
    if (at(labels).requires_grad) fail("cross_entropy", "labels are not differentiable");
    TapeNode n;
    n.op = OpKind::cross_entropy;
    n.in = {logits, labels, -1};
    n.shape = {};
    n.requires_grad = at(logits).requires_grad;
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

Tensor forward_eval(Tape& tape, const std::map<std::string, Tensor>& inputs, NodeId out) {
    if (tape.nodes_.empty()) throw std::logic_error("forward_eval: tape is empty");
    if (out < 0) out = tape.output();
    tape.check_id(out, "forward_eval");

    for (auto& n : tape.nodes_) {
        n.grad.clear();
        auto in_val = [&](int k) -> const Tensor& { return tape.nodes_[static_cast<std::size_t>(n.in[k])].value; };

        switch (n.op) {
            case OpKind::input: {
                auto it = inputs.find(n.name);
                if (it == inputs.end()) throw std::invalid_argument("forward_eval: input '" + n.name + "' not bound");
                if (it->second.shape != n.shape)
                    throw std::invalid_argument("forward_eval: input '" + n.name + "' expected shape " +
                                                shape_str(n.shape) + ", got " + shape_str(it->second.shape));
                n.value = it->second;
                break;
            }
            case OpKind::matmul: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                n.value = Tensor(n.shape);
                if (a.rank() == 3 && b.rank() == 3) {
                    int B = a.shape[0], m = a.shape[1], k = a.shape[2], c = b.shape[2];
                    for (int i = 0; i < B; ++i) {
                        MapC A(a.data.data() + static_cast<std::ptrdiff_t>(i) * m * k, m, k);
                        MapC Bm(b.data.data() + static_cast<std::ptrdiff_t>(i) * k * c, k, c);
                        MapM C(n.value.data.data() + static_cast<std::ptrdiff_t>(i) * m * c, m, c);
                        C.noalias() = A * Bm;
                    }
                } else {
                    int k = b.shape[0], c = b.shape[1];
                    int m = static_cast<int>(a.size() / k);
                    MapC A(a.data.data(), m, k);
                    MapC Bm(b.data.data(), k, c);
                    MapM C(n.value.data.data(), m, c);
                    C.noalias() = A * Bm;
                }
                break;
            }
            case OpKind::add: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                n.value = a;
                n.value.shape = n.shape;
                std::size_t nb = b.data.size();
                for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += b.data[i % nb];
                break;
            }
            case OpKind::mul: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                n.value = a;
                for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= b.data[i];
                break;
            }
            case OpKind::scale: {
                n.value = in_val(0);
                for (double& v : n.value.data) v *= n.alpha;
                break;
            }
            case OpKind::transpose: {
                const Tensor& a = in_val(0);
                MatView v = mat_view(a.shape, "transpose");
                n.value = Tensor(n.shape);
                for (int b = 0; b < v.batch; ++b) {
                    const double* src = a.data.data() + static_cast<std::ptrdiff_t>(b) * v.rows * v.cols;
                    double* dst = n.value.data.data() + static_cast<std::ptrdiff_t>(b) * v.rows * v.cols;
                    for (int i = 0; i < v.rows; ++i)
                        for (int j = 0; j < v.cols; ++j) dst[j * v.rows + i] = src[i * v.cols + j];
                }
                break;
            }
            case OpKind::row_softmax: {
                const Tensor& a = in_val(0);
                auto [rows, cols] = row_view(a.shape, "row_softmax");
                n.value = Tensor(n.shape);
                for (int r = 0; r < rows; ++r) {
                    const double* x = a.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    double* y = n.value.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    double mx = x[0];
                    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                    double s = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        y[j] = std::exp(x[j] - mx);
                        s += y[j];
                    }
                    for (int j = 0; j < cols; ++j) y[j] /= s;
                }
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& x = in_val(0);
                const Tensor& g = in_val(1);
                const Tensor& b = in_val(2);
                auto [rows, cols] = row_view(x.shape, "layer_norm");
                n.value = Tensor(n.shape);
                for (int r = 0; r < rows; ++r) {
                    const double* xr = x.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    double* yr = n.value.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    double mu = 0.0;
                    for (int j = 0; j < cols; ++j) mu += xr[j];
                    mu /= cols;
                    double var = 0.0;
                    for (int j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= cols;
                    double inv = 1.0 / std::sqrt(var + n.alpha);
                    for (int j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * inv * g.data[j] + b.data[j];
                }
                break;
            }
            case OpKind::gelu: {
                n.value = in_val(0);
                for (double& v : n.value.data) v = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                break;
            }
            case OpKind::relu: {
                n.value = in_val(0);
                for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
                break;
            }
            case OpKind::embed_lookup: {
                const Tensor& t = in_val(0);
                const Tensor& ids = in_val(1);
                int V = t.shape[0], d = t.shape[1];
                n.value = Tensor(n.shape);
                for (std::size_t p = 0; p < ids.data.size(); ++p) {
                    int id = checked_label(ids.data[p], V, "embed_lookup");
                    std::copy_n(t.data.data() + static_cast<std::ptrdiff_t>(id) * d, d,
                                n.value.data.data() + static_cast<std::ptrdiff_t>(p) * d);
                }
                break;
            }
            case OpKind::reshape: {
                n.value = in_val(0);
                n.value.shape = n.shape;
                break;
            }
            case OpKind::concat: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                n.value = Tensor(n.shape);
                MatView vo = mat_view(n.shape, "concat");
                bool bcast = a.rank() == 2 && b.rank() == 3;
                MatView va = bcast ? MatView{1, a.shape[0], a.shape[1]} : mat_view(a.shape, "concat");
                for (int bb = 0; bb < vo.batch; ++bb) {
                    const double* pa = a.data.data() +
                                       static_cast<std::ptrdiff_t>(bcast ? 0 : bb) * va.rows * va.cols;
                    double* po = n.value.data.data() + static_cast<std::ptrdiff_t>(bb) * vo.rows * vo.cols;
                    if (n.axis == 0) {
                        std::ptrdiff_t na = static_cast<std::ptrdiff_t>(va.rows) * va.cols;
                        std::copy_n(pa, na, po);
                        const double* pb = b.data.data() +
                                           static_cast<std::ptrdiff_t>(bb) * (vo.rows - va.rows) * vo.cols;
                        std::copy_n(pb, static_cast<std::ptrdiff_t>(vo.rows - va.rows) * vo.cols, po + na);
                    } else {
                        int ca = va.cols, cb = vo.cols - ca;
                        const double* pb = b.data.data() + static_cast<std::ptrdiff_t>(bb) * vo.rows * cb;
                        for (int r = 0; r < vo.rows; ++r) {
                            std::copy_n(pa + static_cast<std::ptrdiff_t>(r) * ca, ca,
                                        po + static_cast<std::ptrdiff_t>(r) * vo.cols);
                            std::copy_n(pb + static_cast<std::ptrdiff_t>(r) * cb, cb,
                                        po + static_cast<std::ptrdiff_t>(r) * vo.cols + ca);
                        }
                    }
                }
                break;
            }
            case OpKind::slice: {
                const Tensor& a = in_val(0);
                MatView va = mat_view(a.shape, "slice");
                n.value = Tensor(n.shape);
                for (int bb = 0; bb < va.batch; ++bb) {
                    const double* pa = a.data.data() + static_cast<std::ptrdiff_t>(bb) * va.rows * va.cols;
                    if (n.axis == 0) {
                        double* po = n.value.data.data() + static_cast<std::ptrdiff_t>(bb) * n.len * va.cols;
                        std::copy_n(pa + static_cast<std::ptrdiff_t>(n.start) * va.cols,
                                    static_cast<std::ptrdiff_t>(n.len) * va.cols, po);
                    } else {
                        double* po = n.value.data.data() + static_cast<std::ptrdiff_t>(bb) * va.rows * n.len;
                        for (int r = 0; r < va.rows; ++r)
                            std::copy_n(pa + static_cast<std::ptrdiff_t>(r) * va.cols + n.start, n.len,
                                        po + static_cast<std::ptrdiff_t>(r) * n.len);
                    }
                }
                break;
            }
            case OpKind::mean_all: {
                const Tensor& a = in_val(0);
                double s = 0.0;
                for (double v : a.data) s += v;
                n.value = Tensor::scalar(s / static_cast<double>(a.size()));
                break;
            }
            case OpKind::mean_rows: {
                const Tensor& a = in_val(0);
                MatView v = mat_view(a.shape, "mean_rows");
                n.value = Tensor(n.shape);
                for (int b = 0; b < v.batch; ++b) {
                    const double* pa = a.data.data() + static_cast<std::ptrdiff_t>(b) * v.rows * v.cols;
                    double* po = n.value.data.data() + static_cast<std::ptrdiff_t>(b) * v.cols;
                    for (int i = 0; i < v.rows; ++i)
                        for (int j = 0; j < v.cols; ++j) po[j] += pa[i * v.cols + j];
                    for (int j = 0; j < v.cols; ++j) po[j] /= v.rows;
                }
                break;
            }
            case OpKind::cross_entropy: {
                const Tensor& l = in_val(0);
                const Tensor& y = in_val(1);
                auto [rows, cols] = row_view(l.shape, "cross_entropy");
                double total = 0.0;
                for (int r = 0; r < rows; ++r) {
                    const double* x = l.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    int cls = checked_label(y.data[static_cast<std::size_t>(r)], cols, "cross_entropy");
                    double mx = x[0];
                    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                    double s = 0.0;
                    for (int j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
                    total += mx + std::log(s) - x[cls];
                }
                n.value = Tensor::scalar(total / rows);
                break;
            }
        }
        if (tape.precision_ == Precision::f32) round_f32(n.value.data);
    }
    tape.evaluated_ = true;
    return tape.nodes_[static_cast<std::size_t>(out)].value;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradMap backward(Tape& tape, NodeId loss) {
    if (!tape.evaluated_) throw std::logic_error("backward: run forward_eval first");
    if (loss < 0) loss = tape.output();
    tape.check_id(loss, "backward");
    TapeNode& top = tape.nodes_[static_cast<std::size_t>(loss)];
    if (top.value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(top.value.shape));

    // reachability from the loss, restricted to grad-requiring paths
    std::vector<char> live(tape.nodes_.size(), 0);
    live[static_cast<std::size_t>(loss)] = top.requires_grad ? 1 : 0;
    for (NodeId i = loss; i >= 0; --i) {
        if (!live[static_cast<std::size_t>(i)]) continue;
        const TapeNode& n = tape.nodes_[static_cast<std::size_t>(i)];
        for (NodeId j : n.in)
            if (j >= 0 && tape.nodes_[static_cast<std::size_t>(j)].requires_grad) live[static_cast<std::size_t>(j)] = 1;
    }

    for (std::size_t i = 0; i < tape.nodes_.size(); ++i) {
        if (live[i]) tape.nodes_[i].grad.assign(tape.nodes_[i].value.data.size(), 0.0);
    }
    if (live[static_cast<std::size_t>(loss)]) top.grad[0] = 1.0;

    auto grad_of = [&](NodeId id) -> std::vector<double>* {
        TapeNode& n = tape.nodes_[static_cast<std::size_t>(id)];
        return n.grad.empty() ? nullptr : &n.grad;
    };

    for (NodeId i = loss; i >= 0; --i) {
        TapeNode& n = tape.nodes_[static_cast<std::size_t>(i)];
        if (n.grad.empty()) continue;
        if (tape.precision_ == Precision::f32) round_f32(n.grad);
        const std::vector<double>& g = n.grad;
        auto in_node = [&](int k) -> TapeNode& { return tape.nodes_[static_cast<std::size_t>(n.in[k])]; };

        switch (n.op) {
            case OpKind::input:
                break;
            case OpKind::matmul: {
                TapeNode& na = in_node(0);
                TapeNode& nb = in_node(1);
                const Tensor& a = na.value;
                const Tensor& b = nb.value;
                auto* ga = grad_of(n.in[0]);
                auto* gb = grad_of(n.in[1]);
                if (a.rank() == 3 && b.rank() == 3) {
                    int B = a.shape[0], m = a.shape[1], k = a.shape[2], c = b.shape[2];
                    for (int bb = 0; bb < B; ++bb) {
                        MapC A(a.data.data() + static_cast<std::ptrdiff_t>(bb) * m * k, m, k);
                        MapC Bm(b.data.data() + static_cast<std::ptrdiff_t>(bb) * k * c, k, c);
                        MapC G(g.data() + static_cast<std::ptrdiff_t>(bb) * m * c, m, c);
                        if (ga) MapM(ga->data() + static_cast<std::ptrdiff_t>(bb) * m * k, m, k).noalias() +=
                            G * Bm.transpose();
                        if (gb) MapM(gb->data() + static_cast<std::ptrdiff_t>(bb) * k * c, k, c).noalias() +=
                            A.transpose() * G;
                    }
                } else {
                    int k = b.shape[0], c = b.shape[1];
                    int m = static_cast<int>(a.size() / k);
                    MapC A(a.data.data(), m, k);
                    MapC Bm(b.data.data(), k, c);
                    MapC G(g.data(), m, c);
                    if (ga) MapM(ga->data(), m, k).noalias() += G * Bm.transpose();
                    if (gb) MapM(gb->data(), k, c).noalias() += A.transpose() * G;
                }
                break;
            }
            case OpKind::add: {
                if (auto* ga = grad_of(n.in[0]))
                    for (std::size_t p = 0; p < g.size(); ++p) (*ga)[p] += g[p];
                if (auto* gb = grad_of(n.in[1])) {
                    std::size_t nb = gb->size();
                    for (std::size_t p = 0; p < g.size(); ++p) (*gb)[p % nb] += g[p];
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& a = in_node(0).value;
                const Tensor& b = in_node(1).value;
                if (auto* ga = grad_of(n.in[0]))
                    for (std::size_t p = 0; p < g.size(); ++p) (*ga)[p] += g[p] * b.data[p];
                if (auto* gb = grad_of(n.in[1]))
                    for (std::size_t p = 0; p < g.size(); ++p) (*gb)[p] += g[p] * a.data[p];
                break;
            }
            case OpKind::scale: {
                if (auto* ga = grad_of(n.in[0]))
                    for (std::size_t p = 0; p < g.size(); ++p) (*ga)[p] += n.alpha * g[p];
                break;
            }
            case OpKind::transpose: {
                if (auto* ga = grad_of(n.in[0])) {
                    MatView v = mat_view(n.shape, "transpose");  // rows/cols of the output
                    for (int b = 0; b < v.batch; ++b) {
                        const double* gs = g.data() + static_cast<std::ptrdiff_t>(b) * v.rows * v.cols;
                        double* gd = ga->data() + static_cast<std::ptrdiff_t>(b) * v.rows * v.cols;
                        for (int i = 0; i < v.rows; ++i)
                            for (int j = 0; j < v.cols; ++j) gd[j * v.rows + i] += gs[i * v.cols + j];
                    }
                }
                break;
            }
            case OpKind::row_softmax: {
                if (auto* ga = grad_of(n.in[0])) {
                    auto [rows, cols] = row_view(n.shape, "row_softmax");
                    for (int r = 0; r < rows; ++r) {
                        const double* s = n.value.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                        const double* gr = g.data() + static_cast<std::ptrdiff_t>(r) * cols;
                        double dot = 0.0;
                        for (int j = 0; j < cols; ++j) dot += gr[j] * s[j];
                        double* gd = ga->data() + static_cast<std::ptrdiff_t>(r) * cols;
                        for (int j = 0; j < cols; ++j) gd[j] += s[j] * (gr[j] - dot);
                    }
                }
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& x = in_node(0).value;
                const Tensor& gm = in_node(1).value;
                auto [rows, cols] = row_view(x.shape, "layer_norm");
                auto* gx = grad_of(n.in[0]);
                auto* gg = grad_of(n.in[1]);
                auto* gb = grad_of(n.in[2]);
                std::vector<double> xhat(static_cast<std::size_t>(cols));
                for (int r = 0; r < rows; ++r) {
                    const double* xr = x.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    const double* gr = g.data() + static_cast<std::ptrdiff_t>(r) * cols;
                    double mu = 0.0;
                    for (int j = 0; j < cols; ++j) mu += xr[j];
                    mu /= cols;
                    double var = 0.0;
                    for (int j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= cols;
                    double inv = 1.0 / std::sqrt(var + n.alpha);
                    for (int j = 0; j < cols; ++j) xhat[static_cast<std::size_t>(j)] = (xr[j] - mu) * inv;
                    if (gb)
                        for (int j = 0; j < cols; ++j) (*gb)[static_cast<std::size_t>(j)] += gr[j];
                    if (gg)
                        for (int j = 0; j < cols; ++j)
                            (*gg)[static_cast<std::size_t>(j)] += gr[j] * xhat[static_cast<std::size_t>(j)];
                    if (gx) {
                        double m1 = 0.0, m2 = 0.0;
                        for (int j = 0; j < cols; ++j) {
                            double dxh = gr[j] * gm.data[static_cast<std::size_t>(j)];
                            m1 += dxh;
                            m2 += dxh * xhat[static_cast<std::size_t>(j)];
                        }
                        m1 /= cols;
                        m2 /= cols;
                        double* gd = gx->data() + static_cast<std::ptrdiff_t>(r) * cols;
                        for (int j = 0; j < cols; ++j) {
                            double dxh = gr[j] * gm.data[static_cast<std::size_t>(j)];
                            gd[j] += (dxh - m1 - xhat[static_cast<std::size_t>(j)] * m2) * inv;
                        }
                    }
                }
                break;
            }
            case OpKind::gelu: {
                if (auto* ga = grad_of(n.in[0])) {
                    const Tensor& x = in_node(0).value;
                    for (std::size_t p = 0; p < g.size(); ++p) {
                        double v = x.data[p];
                        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                        (*ga)[p] += g[p] * (cdf + v * pdf);
                    }
                }
                break;
            }
            case OpKind::relu: {
                if (auto* ga = grad_of(n.in[0])) {
                    const Tensor& x = in_node(0).value;
                    for (std::size_t p = 0; p < g.size(); ++p)
                        if (x.data[p] > 0.0) (*ga)[p] += g[p];
                }
                break;
            }
            case OpKind::embed_lookup: {
                if (auto* gt = grad_of(n.in[0])) {
                    const Tensor& t = in_node(0).value;
                    const Tensor& ids = in_node(1).value;
                    int V = t.shape[0], d = t.shape[1];
                    for (std::size_t p = 0; p < ids.data.size(); ++p) {
                        int id = checked_label(ids.data[p], V, "embed_lookup");
                        for (int j = 0; j < d; ++j)
                            (*gt)[static_cast<std::size_t>(id) * d + static_cast<std::size_t>(j)] +=
                                g[p * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                    }
                }
                break;
            }
            case OpKind::reshape: {
                if (auto* ga = grad_of(n.in[0]))
                    for (std::size_t p = 0; p < g.size(); ++p) (*ga)[p] += g[p];
                break;
            }
            case OpKind::concat: {
                const Tensor& a = in_node(0).value;
                MatView vo = mat_view(n.shape, "concat");
                bool bcast = a.rank() == 2 && in_node(1).value.rank() == 3;
                MatView va = bcast ? MatView{1, a.shape[0], a.shape[1]} : mat_view(a.shape, "concat");
                auto* ga = grad_of(n.in[0]);
                auto* gb = grad_of(n.in[1]);
                for (int bb = 0; bb < vo.batch; ++bb) {
                    const double* gs = g.data() + static_cast<std::ptrdiff_t>(bb) * vo.rows * vo.cols;
                    if (n.axis == 0) {
                        std::ptrdiff_t na = static_cast<std::ptrdiff_t>(va.rows) * va.cols;
                        if (ga) {
                            double* gd = ga->data() + (bcast ? 0 : static_cast<std::ptrdiff_t>(bb) * na);
                            for (std::ptrdiff_t p = 0; p < na; ++p) gd[p] += gs[p];
                        }
                        if (gb) {
                            std::ptrdiff_t nb = static_cast<std::ptrdiff_t>(vo.rows - va.rows) * vo.cols;
                            double* gd = gb->data() + static_cast<std::ptrdiff_t>(bb) * nb;
                            for (std::ptrdiff_t p = 0; p < nb; ++p) gd[p] += gs[na + p];
                        }
                    } else {
                        int ca = va.cols, cb = vo.cols - ca;
                        for (int r = 0; r < vo.rows; ++r) {
                            if (ga) {
                                double* gd = ga->data() + (static_cast<std::ptrdiff_t>(bb) * vo.rows + r) * ca;
                                for (int j = 0; j < ca; ++j) gd[j] += gs[static_cast<std::ptrdiff_t>(r) * vo.cols + j];
                            }
                            if (gb) {
                                double* gd = gb->data() + (static_cast<std::ptrdiff_t>(bb) * vo.rows + r) * cb;
                                for (int j = 0; j < cb; ++j)
                                    gd[j] += gs[static_cast<std::ptrdiff_t>(r) * vo.cols + ca + j];
                            }
                        }
                    }
                }
                break;
            }
            case OpKind::slice: {
                if (auto* ga = grad_of(n.in[0])) {
                    MatView va = mat_view(in_node(0).value.shape, "slice");
                    for (int bb = 0; bb < va.batch; ++bb) {
                        double* gd = ga->data() + static_cast<std::ptrdiff_t>(bb) * va.rows * va.cols;
                        if (n.axis == 0) {
                            const double* gs = g.data() + static_cast<std::ptrdiff_t>(bb) * n.len * va.cols;
                            for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(n.len) * va.cols; ++p)
                                gd[static_cast<std::ptrdiff_t>(n.start) * va.cols + p] += gs[p];
                        } else {
                            const double* gs = g.data() + static_cast<std::ptrdiff_t>(bb) * va.rows * n.len;
                            for (int r = 0; r < va.rows; ++r)
                                for (int j = 0; j < n.len; ++j)
                                    gd[static_cast<std::ptrdiff_t>(r) * va.cols + n.start + j] +=
                                        gs[static_cast<std::ptrdiff_t>(r) * n.len + j];
                        }
                    }
                }
                break;
            }
            case OpKind::mean_all: {
                if (auto* ga = grad_of(n.in[0])) {
                    double s = g[0] / static_cast<double>(ga->size());
                    for (double& v : *ga) v += s;
                }
                break;
            }
            case OpKind::mean_rows: {
                if (auto* ga = grad_of(n.in[0])) {
                    MatView v = mat_view(in_node(0).value.shape, "mean_rows");
                    for (int b = 0; b < v.batch; ++b) {
                        const double* gs = g.data() + static_cast<std::ptrdiff_t>(b) * v.cols;
                        double* gd = ga->data() + static_cast<std::ptrdiff_t>(b) * v.rows * v.cols;
                        for (int i = 0; i < v.rows; ++i)
                            for (int j = 0; j < v.cols; ++j) gd[i * v.cols + j] += gs[j] / v.rows;
                    }
                }
                break;
            }
            case OpKind::cross_entropy: {
                if (auto* gl = grad_of(n.in[0])) {
                    const Tensor& l = in_node(0).value;
                    const Tensor& y = in_node(1).value;
                    auto [rows, cols] = row_view(l.shape, "cross_entropy");
                    double scale_g = g[0] / rows;
                    for (int r = 0; r < rows; ++r) {
                        const double* x = l.data.data() + static_cast<std::ptrdiff_t>(r) * cols;
                        double* gd = gl->data() + static_cast<std::ptrdiff_t>(r) * cols;
                        int cls = checked_label(y.data[static_cast<std::size_t>(r)], cols, "cross_entropy");
                        double mx = x[0];
                        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                        double s = 0.0;
                        for (int j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
                        for (int j = 0; j < cols; ++j) {
                            double p = std::exp(x[j] - mx) / s;
                            gd[j] += scale_g * (p - (j == cls ? 1.0 : 0.0));
                        }
                    }
                }
                break;
            }
        }
    }

    GradMap out;
    for (auto& n : tape.nodes_) {
        if (n.op == OpKind::input && n.requires_grad && !n.grad.empty()) {
            Tensor t(n.shape.empty() ? Shape{} : n.shape);
            t.data = n.grad;
            if (tape.precision_ == Precision::f32) round_f32(t.data);
            out[n.name] = std::move(t);
        }
    }
    return out;
}

void sgd_step(ParamSet& params, const GradMap& grads, double lr) {
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("sgd_step: gradient for unknown parameter '" + name + "'");
        Tensor& p = it->second;
        if (p.shape != g.shape)
            throw std::invalid_argument("sgd_step: gradient shape " + shape_str(g.shape) + " does not match '" +
                                        name + "' " + shape_str(p.shape));
        for (double v : g.data) {
            if (!std::isfinite(v)) throw std::runtime_error("sgd_step: non-finite gradient for parameter '" + name + "'");
        }
        for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] -= lr * g.data[i];
    }
}

GradCheckReport grad_check_report(const DifferentiableFn& f, const ParamSet& params, double eps,
                                  int max_coords_per_param, std::uint64_t probe_seed) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");
    GradMap analytic = f.grad(params);
    ParamSet work = params;
    GradCheckReport rep;
    for (auto& [name, p] : work) {
        const Tensor* a = nullptr;
        if (auto it = analytic.find(name); it != analytic.end()) a = &it->second;

        std::vector<std::size_t> coords;
        std::size_t count = p.data.size();
        if (max_coords_per_param > 0 && static_cast<std::size_t>(max_coords_per_param) < count) {
            Rng rng(derive_seed(probe_seed, "grad_check", hash_tag(name)));
            for (int k = 0; k < max_coords_per_param; ++k)
                coords.push_back(static_cast<std::size_t>(rng.uniform_int(static_cast<int>(count))));
        } else {
            coords.resize(count);
            for (std::size_t i = 0; i < count; ++i) coords[i] = i;
        }

        for (std::size_t c : coords) {
            double saved = p.data[c];
            p.data[c] = saved + eps;
            double fp = f.value(work);
            p.data[c] = saved - eps;
            double fm = f.value(work);
            p.data[c] = saved;
            double fd = (fp - fm) / (2.0 * eps);
            double an = a ? a->data[c] : 0.0;
            double rel;
            if (!std::isfinite(fd) || !std::isfinite(an)) {
                rel = std::numeric_limits<double>::infinity();
            } else {
                rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-12});
            }
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = name + "[" + std::to_string(c) + "]";
            }
        }
    }
    return rep;
}

double grad_check(const DifferentiableFn& f, const ParamSet& params, double eps, int max_coords_per_param,
                  std::uint64_t probe_seed) {
    return grad_check_report(f, params, eps, max_coords_per_param, probe_seed).max_rel_err;
}

}  // namespace fedtp
