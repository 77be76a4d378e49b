#pragma once

#include "cdsr/tensor.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <vector>

/// Minimal reverse-mode automatic differentiation over float tensors.
///
/// Every op returns a Var holding its value. When any input requires a
/// gradient the result records its inputs and a backward closure; otherwise
/// nothing is recorded, so inference runs without graph overhead.
namespace cdsr::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    /// Double-precision copy of a scalar result, kept by reductions so the
    /// loss is not rounded to float before it is reported. NaN when unset.
    double scalar = std::numeric_limits<double>::quiet_NaN();

    /// Gradient accumulator, zero-initialised on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;

    static Var constant(Tensor value);
    /// Leaf that accumulates a gradient.
    static Var parameter(Tensor value);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    /// Accumulated gradient; empty when no gradient reached this node.
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    float item() const;
    /// The double-precision scalar when the producing op kept one, else item().
    double scalar() const;

    const std::shared_ptr<Node>& node() const noexcept { return node_; }
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every reachable node.
void backward(const Var& root);

// x: [N,C,H,W], w: [O,C,k,k], bias: [O] or undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int padding);
// x: [..., K], w: [O, K], bias: [O] or undefined -> [..., O].
Var linear(const Var& x, const Var& w, const Var& bias);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, float eps = 1e-5f);

Var silu(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var sigmoid(const Var& x);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, float s);
/// x: [N,C,H,W] plus v: [N,C] broadcast over space.
Var add_channel(const Var& x, const Var& v);
Var concat_channels(const Var& a, const Var& b);
Var upsample_nearest2x(const Var& x);
/// Pads H and W by `pad` on each side, repeating the edge values.
Var pad_replicate(const Var& x, int pad);
Var reshape(const Var& x, Shape shape);

/// [N,C,H,W] -> [N,H*W,C]
Var to_tokens(const Var& x);
/// [N,H*W,C] -> [N,C,H,W]
Var from_tokens(const Var& x, int height, int width);

/// Batched product: a [N,M,K] times b [N,K,P], or b [N,P,K] transposed.
Var matmul(const Var& a, const Var& b, bool transpose_b);
/// Max-subtracted softmax over the last dimension.
Var softmax_rows(const Var& x);

/// Mean squared difference over all elements; scalar result of shape [1].
Var mse(const Var& a, const Var& b);

} // namespace cdsr::ag
