#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cda/tensor.hpp"

namespace cda {

class Graph;

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    scalar_mul,
    scalar_div,
    exp,
    log,
    relu,
    sum,
    mean,
    matmul,
    transpose,
    reshape,
    slice_rows,
    affine,
    conv2d,
    max_pool,
    batch_norm,
    batch_norm_eval,
    l2_normalize_rows,
    sq_euclidean_cdist,
};

const char* op_name(OpKind kind);

struct OpAttrs {
    double scalar = 0.0;   // scalar_mul / scalar_div constant
    int axis = -1;         // sum: -1 all, 0 columns-out, 1 rows-out
    int stride = 1;        // conv2d / max_pool
    int pad = 0;           // conv2d zero padding
    int kh = 0, kw = 0;    // max_pool window
    double eps = 0.0;      // batch_norm / l2_normalize_rows floor
};

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Value {
    Graph* graph = nullptr;
    int id = -1;

    const Tensor& val() const;
    const Shape& shape() const;
};

using GradMap = std::unordered_map<int, Tensor>;

// One training step's computation tape. Nodes are appended in topological
// order and cache their forward value at construction; backward() walks the
// tape once in reverse. Graphs are built, differentiated and discarded
// per step.
class Graph {
public:
    Value constant(Tensor t) { return add_leaf(std::move(t), false); }
    Value input(Tensor t) { return add_leaf(std::move(t), true); }

    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value scalar_mul(Value x, double c);
    Value scalar_div(Value x, double c);
    Value exp(Value x);
    Value log(Value x);
    Value relu(Value x);
    Value sum(Value x, int axis = -1);
    Value mean(Value x);
    Value matmul(Value a, Value b);
    Value transpose(Value x);
    Value reshape(Value x, Shape shape);
    // Rows [begin, end) of a 2-D tensor.
    Value slice_rows(Value x, size_t begin, size_t end);
    // x: (N, in), w: (in, out), b: (out) -> (N, out)
    Value affine(Value x, Value w, Value b);
    // x: (N, H, W, Cin), w: (KH, KW, Cin, Cout), b: (Cout); zero padding.
    Value conv2d(Value x, Value w, Value b, int stride, int pad);
    Value max_pool(Value x, int kh, int kw, int stride);
    // Per-channel batch statistics over all leading axes; requires >= 2
    // reduced entries. Batch mean/var are cached on the node (aux tensors)
    // so callers can maintain running averages.
    Value batch_norm(Value x, Value gamma, Value beta, double eps);
    Value batch_norm_eval(Value x, Value gamma, Value beta, const Tensor& mean, const Tensor& var,
                          double eps);
    Value l2_normalize_rows(Value x, double eps = 1e-12);
    // a: (N, d), b: (M, d) -> (N, M) of squared Euclidean distances.
    Value sq_euclidean_cdist(Value a, Value b);

    // Generic dispatcher mirroring the typed builders; used by the gradient
    // suite to enumerate op kinds uniformly.
    Value apply_op(OpKind kind, const std::vector<Value>& inputs, const OpAttrs& attrs);

    // Reverse-mode sweep from a scalar loss. Returns gradients for
    // requires-grad leaves only; leaves not reachable from the loss are
    // absent from the map.
    GradMap backward(Value loss) const;

    const Tensor& value(int id) const { return nodes_[id].value; }
    const Tensor& aux0(int id) const { return nodes_[id].aux0; }
    const Tensor& aux1(int id) const { return nodes_[id].aux1; }
    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<int> inputs;
        Tensor value;
        OpAttrs attrs;
        bool requires_grad = false;
        // Op-specific forward byproducts reused by backward.
        Tensor aux0, aux1;
        std::vector<int> iaux;
    };

    Value add_leaf(Tensor t, bool requires_grad);
    Value push(Node node);
    void backward_node(int id, const Tensor& gout, std::vector<Tensor>& grads,
                       std::vector<char>& has_grad) const;
    static void accumulate(Tensor& into, bool& present, const Tensor& g);

    std::vector<Node> nodes_;
};

} // namespace cda
