#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace prefopt {

struct Node;

/// Dense row-major float64 tensor with shared storage and reverse-mode autodiff.
///
/// Copies are shallow: they alias the same value and gradient buffers. Ops record
/// a graph node on their output whenever gradients are enabled and at least one
/// input requires them. A graph lives for one forward/backward pass; leaf tensors
/// (parameters) persist across passes and accumulate gradients until zero_grad().
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor of(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(data); }
    int numel() const;
    int rows() const;
    int cols() const;
    double item() const;
    double at(int r, int c) const;
    std::string shape_str() const;

    const std::vector<double>& values() const { return *data; }
    std::vector<double>& values() { return *data; }
    const std::vector<double>& grad_values() const;

    void zero_grad();

    /// Shares values with this tensor but owns a fresh zeroed gradient buffer.
    /// Used for per-worker gradient accumulation over shared parameters.
    Tensor grad_alias() const;
};

struct Node {
    std::vector<Tensor> parents;
    std::function<void()> backprop;
    bool done = false;
};

/// Thread-local gradient mode. Disable around pure-inference passes.
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

// ---- forward ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_bias(const Tensor& m, const Tensor& bias);  // [R,C] + [C]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
Tensor row_softmax(const Tensor& m);
Tensor row_log_softmax(const Tensor& m);
/// Square [T,T]; row t is a softmax over columns 0..t, zeros above the diagonal.
Tensor causal_row_softmax(const Tensor& m);
Tensor gather_cols(const Tensor& m, const std::vector<int>& idx);  // -> [R]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);  // -> [len(ids), d]
Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]
Tensor slice_rows(const Tensor& m, int row_begin, int n_rows);
Tensor stack_scalars(const std::vector<Tensor>& xs);  // -> [n]

/// Fused multi-head causal self-attention over a batch of equal-length rows.
/// q, k, v are [batch*seq_len, d_model]; output has the same shape.
Tensor multihead_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  int batch, int seq_len, int n_heads);

/// Reverse-mode pass from a scalar loss. Populates grad on every requires_grad
/// leaf reachable from the loss. Each graph may be consumed exactly once; a
/// second backward through any of its nodes is rejected. Leaf gradients
/// accumulate across graphs until zero_grad().
void backward(const Tensor& loss);

}  // namespace prefopt
