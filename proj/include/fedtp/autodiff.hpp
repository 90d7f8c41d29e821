#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedtp/tensor.hpp"

namespace fedtp {

// Reverse-mode autodiff over a recorded operation tape. The graph is built
// once (shapes fixed at build time), then forward_eval binds named leaves and
// evaluates the whole tape; backward replays it in reverse. Ops treat the
// last two axes as a matrix and broadcast any leading batch axis.

enum class OpKind : std::uint8_t {
    input,         // named leaf, bound at eval time
    matmul,        // (m,k)x(k,n); (B,m,k)x(k,n); (B,m,k)x(B,k,n)
    add,           // suffix-broadcast on second operand
    mul,           // elementwise, equal shapes
    scale,         // alpha * x
    transpose,     // swap last two axes
    row_softmax,   // softmax over last axis, row-max subtracted
    layer_norm,    // normalize last axis; inputs x, gamma, beta
    gelu,          // exact erf form
    relu,
    embed_lookup,  // (V,d) table, integer-valued ids -> rows
    reshape,
    concat,        // axis 0 = rows (-2), 1 = cols (-1); 2D first operand broadcasts over batch
    slice,         // axis as for concat
    mean_all,      // scalar mean of all entries
    mean_rows,     // mean over axis -2
    cross_entropy, // mean NLL of row-softmax vs integer labels
};

enum class Precision : std::uint8_t { f64, f32 };

using NodeId = int;

struct TapeNode {
    OpKind op;
    std::array<NodeId, 3> in{-1, -1, -1};
    int axis = 0;
    int start = 0;
    int len = 0;
    double alpha = 0.0;  // scale factor / layer-norm epsilon
    std::string name;    // leaves only
    Shape shape;
    bool requires_grad = false;
    Tensor value;                 // owned buffer for computed nodes
    const Tensor* bound = nullptr;  // leaves reference the caller's tensor
    std::vector<double> grad;
};

class Tape {
public:
    Tape() = default;
    explicit Tape(Precision p) : precision_(p) {}

    NodeId input(const std::string& name, Shape shape, bool requires_grad = false);

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId transpose(NodeId a);
    NodeId row_softmax(NodeId a);
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
    NodeId gelu(NodeId a);
    NodeId relu(NodeId a);
    NodeId embed_lookup(NodeId table, NodeId ids);
    NodeId reshape(NodeId a, Shape shape);
    NodeId concat(NodeId a, NodeId b, int axis);
    NodeId slice(NodeId a, int axis, int start, int len);
    NodeId mean_all(NodeId a);
    NodeId mean_rows(NodeId a);
    NodeId sum_all(NodeId a);  // composed: numel * mean_all
    NodeId cross_entropy(NodeId logits, NodeId labels);

    int size() const { return static_cast<int>(nodes_.size()); }
    const TapeNode& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    NodeId output() const;
    Precision precision() const { return precision_; }

    const Tensor& value(NodeId id) const;

    friend Tensor forward_eval(Tape&, const std::map<std::string, const Tensor*>&, NodeId);
    friend GradMap backward(Tape&, NodeId);

private:
    NodeId push(TapeNode n);
    TapeNode& at(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
    void check_id(NodeId id, const char* op) const;

    std::vector<TapeNode> nodes_;
    Precision precision_ = Precision::f64;
    bool evaluated_ = false;
};

using Bindings = std::map<std::string, const Tensor*>;

// Evaluates every node in record order after binding named leaves. Returns a
// copy of `out`'s value (the last node when out < 0). Intermediate values stay
// on the tape for backward; output buffers are reused across evaluations, and
// bound tensors are referenced, not copied, so they must outlive backward().
Tensor forward_eval(Tape& tape, const Bindings& inputs, NodeId out = -1);
Tensor forward_eval(Tape& tape, const std::map<std::string, Tensor>& inputs, NodeId out = -1);

// d(loss)/d(leaf) for every requires_grad leaf reachable from `loss`.
// Leaves that do not participate in the graph are absent, not zero-filled.
GradMap backward(Tape& tape, NodeId loss = -1);

// p <- p - lr * g, elementwise; params without a gradient entry are unchanged.
void sgd_step(ParamSet& params, const GradMap& grads, double lr);

struct DifferentiableFn {
    std::function<double(const ParamSet&)> value;
    std::function<GradMap(const ParamSet&)> grad;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Central finite differences vs analytic gradient. max_coords_per_param caps
// the probed coordinates per parameter tensor (0 = all), chosen from a
// deterministic stream so large models stay checkable.
GradCheckReport grad_check_report(const DifferentiableFn& f, const ParamSet& params, double eps,
                                  int max_coords_per_param = 0, std::uint64_t probe_seed = 0);
double grad_check(const DifferentiableFn& f, const ParamSet& params, double eps,
                  int max_coords_per_param = 0, std::uint64_t probe_seed = 0);

}  // namespace fedtp
