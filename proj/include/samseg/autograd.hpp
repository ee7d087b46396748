#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Tensors are row-major and carry an explicit shape. Image-like tensors use
// [C, H, W]; token sequences use [N, C]. A graph is recorded only while
// gradient mode is on and at least one input requires a gradient, so
// inference under NoGradGuard allocates no graph and is safe to run from
// several threads against shared parameters.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace samseg::ag {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

Index numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
    Shape shape;
    Vector value;
    Vector grad;  // empty until a gradient reaches the node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    /// Adds `g` into this node's gradient (allocating it on first use).
    void accumulate(const Vector& g);
    template <typename Derived>
    void accumulate_expr(const Eigen::MatrixBase<Derived>& g) {
        if (!requires_grad) return;
        if (grad.size() == 0) grad = Vector::Zero(value.size());
        grad += g;
    }
};

class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Shape shape, Vector value);
    static Var parameter(Shape shape, Vector value);
    static Var zeros(Shape shape);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    Index dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    Index numel() const { return node_->value.size(); }
    const Vector& value() const { return node_->value; }
    Vector& mutable_value() { return node_->value; }
    const Vector& grad() const { return node_->grad; }
    Vector& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    double item() const { return node_->value(0); }

    /// 2-D view of a rank-2 tensor, or [C, H*W] for rank 3.
    ConstMatMap matrix() const;

    const std::shared_ptr<Node>& node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

/// Builds an op result. When recording, `backward` receives the result node
/// (with its gradient populated) and must push gradients into `parents`.
Var make_result(Shape shape, Vector value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Runs reverse accumulation from a scalar.
void backward(const Var& loss);

// Elementwise and structural ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var gelu(const Var& x);
Var relu(const Var& x);
Var reshape(const Var& x, Shape shape);
Var transpose(const Var& x);
Var sum(const Var& x);
/// sum_i x_i * w_i with constant weights.
Var weighted_sum(const Var& x, const Vector& weights);

// Matrix ops on [N, C] sequences.
Var matmul(const Var& a, const Var& b);
/// x[N, in] * W[out, in]^T + b[out]
Var linear(const Var& x, const Var& weight, const Var& bias);
Var add_row_vector(const Var& x, const Var& row);
Var softmax_rows(const Var& x);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var slice_rows(const Var& x, Index begin, Index count);
Var slice_cols(const Var& x, Index begin, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);

// Image ops on [C, H, W].
Var conv2d(const Var& x, const Var& weight, const Var& bias, Index stride = 1, Index padding = 0);
/// Kernel 2, stride 2; weight [C_in, C_out, 2, 2].
Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias);
Var instance_norm(const Var& x, double eps = 1e-5);
Var upsample_nearest2x(const Var& x);
Var add_channel_bias(const Var& x, const Var& bias);
/// v[C] broadcast to [C, H, W].
Var broadcast_channels(const Var& v, Index height, Index width);
/// [C, H, W] -> [H*W, C]
Var image_to_sequence(const Var& x);
/// [H*W, C] -> [C, H, W]
Var sequence_to_image(const Var& x, Index height, Index width);

}  // namespace samseg::ag
