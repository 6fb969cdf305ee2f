#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "camspoof/tensor.hpp"

namespace camspoof {

using NodeId = int;

enum class Padding { Valid, Same };

enum class OpKind {
    Input,
    Conv2d,
    Relu,
    AvgPool2d,
    ConcatChannels,
    Dense,
    Softmax,
    CrossEntropy,
    MeanSpatial,
    Add,
    Mul,
    SumAll,
};

// Record of executed primitives in topological order. Forward methods
// append a node holding the computed value plus whatever the backward
// rule needs; backward() replays the record in reverse.
class Tape {
  public:
    NodeId input(Tensor value);

    // Cross-correlation of input [N,C,H,W] with kernel [F,C,kh,kw] plus
    // per-filter bias. `Same` zero-pads (odd kernel extents required),
    // `Valid` shrinks the output.
    NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, Padding padding);
    NodeId relu(NodeId x);
    // Mean over non-overlapping 2x2 windows; spatial extents must be even.
    NodeId avg_pool2d(NodeId x);
    NodeId concat_channels(NodeId a, NodeId b);
    // Affine map x[N,D] * w[D,M] + b[M].
    NodeId dense(NodeId x, NodeId w, NodeId b);
    // Row softmax with max subtraction, rows of [N,K], K >= 2.
    NodeId softmax(NodeId logits);
    // Mean over the batch of -ln(probs[label]). When probs comes straight
    // from a softmax node the backward pass uses the fused (p - onehot)/N
    // rule against the logits.
    NodeId cross_entropy(NodeId probs, std::vector<int> labels);
    // Mean over the spatial extents: [N,C,H,W] -> [N,C].
    NodeId mean_spatial(NodeId x);
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId sum_all(NodeId x);

    const Tensor& value(NodeId id) const;
    OpKind kind(NodeId id) const;
    int node_count() const { return static_cast<int>(nodes_.size()); }

    // Reverse sweep from a scalar terminal. Returns one gradient per
    // requested node; a node with no path to the terminal gets zeros.
    // All produced gradients are checked finite.
    std::unordered_map<NodeId, Tensor> backward(NodeId terminal,
                                                const std::vector<NodeId>& requested) const;

  private:
    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        Tensor value;
        Padding padding = Padding::Valid;
        std::vector<int> labels;
        int consumers = 0;
    };

    NodeId append(Node node);
    const Node& node(NodeId id) const;
    void check_id(NodeId id, const char* context) const;

    // deque keeps value() references stable while later ops append
    std::deque<Node> nodes_;
};

// Central-difference gradient of a scalar function, (f(x+h e_i) - f(x-h e_i))
// divided by the realized float32 step. The accumulation is double; this is
// the independent oracle the analytic backward rules are checked against.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h);

}  // namespace camspoof
