#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vsum/common.hpp"

// Reverse-mode automatic differentiation on dense row-major tensors of
// 64-bit reals. Each op builds a node in a dynamic graph; backward() runs
// the closures in reverse topological order. One graph per computation,
// no shared mutable state across graphs.
namespace vsum::ad {

// Probabilities are floored at this value before any log, so KL and CE stay
// finite when a class collapses to zero mass.
inline constexpr double kProbFloor = 1e-12;

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // accumulates into parents' grads
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->values.size()); }
  int64_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
  int64_t cols() const { return node_->shape.back(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->values; }
  std::span<double> values_mut() { return node_->values; }
  std::span<const double> grad() const { return node_->grad; }
  double item() const;

  void zero_grad();
  // Leaf copy of the same values, detached from any graph.
  Tensor detached(bool requires_grad = false) const;

  Node* node() const { return node_.get(); }
  std::shared_ptr<Node> handle() const { return node_; }

  friend Tensor make_op(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(Node&)> backward_fn);

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               std::function<void(Tensor::Node&)> backward_fn);

// Runs reverse-mode accumulation from a scalar root.
void backward(const Tensor& root);

// --- ops --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m x k] * [k x n]
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);                              // -> scalar
Tensor tanh_op(const Tensor& a);
// x: [B x n] or [n]; bias: [n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// Row-wise layer norm with learned gain/bias of width n, eps 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Row-wise tempered softmax with max-subtraction.
Tensor softmax_rows(const Tensor& logits, double temperature);
// Mean over rows of -ln(probs[row, gold[row]]), probs floored at kProbFloor.
Tensor cross_entropy_rows(const Tensor& probs, const std::vector<int>& gold);
// Mean over rows of sum_i p*ln(p/q), q constant (no gradient into the target).
Tensor kl_rows(const Tensor& p, const Tensor& q_const);
// 1-D inputs, scalar output in [-1, 1]; gradient flows to both operands.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// --- distributions (spec-level single-sample API) ----------------------

// A categorical distribution over K >= 2 classes. probs is a 1-D tensor so
// losses stay differentiable through softmax.
struct Distribution {
  Tensor probs;

  static Distribution from(std::vector<double> probs);  // validates invariants
  int classes() const { return static_cast<int>(probs.size()); }
  double prob(int k) const { return probs.values()[static_cast<size_t>(k)]; }
  std::vector<double> to_vector() const {
    return {probs.values().begin(), probs.values().end()};
  }
  int argmax() const;
};

Distribution softmax(const Tensor& logits, double temperature);
Tensor cross_entropy(const Distribution& pred, int gold);
Tensor kl_divergence(const Distribution& p, const Distribution& q);

// Central-difference check of reverse-mode gradients; returns the max
// elementwise relative error. f must map x to a scalar and be pure.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace vsum::ad
