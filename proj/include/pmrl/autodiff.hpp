#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "pmrl/array.hpp"

namespace pmrl::ad {

class Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the dynamically recorded DAG. The backprop closure scatters
// this node's grad into its parents' grads.
class Node {
 public:
  Array value;
  Array grad;  // allocated lazily by backward()
  bool requires_grad = false;  // trainable leaf
  bool needs_grad = false;     // requires_grad or depends on one
  std::vector<NodePtr> parents;
  std::function<void()> backprop;
  const char* op = "leaf";
  std::uint64_t visit_tag = 0;  // backward() traversal epoch

  explicit Node(Array v) : value(std::move(v)) {}

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Array(value.shape());
  }
  void zero_grad() { grad = Array(); }
  double scalar() const { return value[0]; }
};

// Graph recording is process-global and confined to the training thread.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

NodePtr constant(Array v);
NodePtr constant(double v);
NodePtr param(Array v);  // trainable leaf

// Elementwise (same shape).
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr neg(const NodePtr& a);
NodePtr scale(const NodePtr& a, double s);
NodePtr add_scalar(const NodePtr& a, double s);

NodePtr sigmoid(const NodePtr& a);
NodePtr tanh_(const NodePtr& a);
NodePtr exp_(const NodePtr& a);
NodePtr log_(const NodePtr& a);
NodePtr leaky_relu(const NodePtr& a, double slope = 0.1);
NodePtr square(const NodePtr& a);
NodePtr reciprocal(const NodePtr& a);

// Reductions / contractions.
NodePtr sum(const NodePtr& a);
NodePtr mean(const NodePtr& a);
NodePtr dot(const NodePtr& a, const NodePtr& b);
NodePtr matmul(const NodePtr& a, const NodePtr& b);

// softmax along `axis`, stabilized by max subtraction.
NodePtr softmax(const NodePtr& logits, std::size_t axis);

// [C_in,H,W] x [C_out,C_in,k,k] -> [C_out,H',W'], cross-correlation.
NodePtr conv2d(const NodePtr& input, const NodePtr& kernel, std::size_t stride,
               std::size_t padding);

// [C,H,W] -> [C,2H,2W], nearest neighbor.
NodePtr upsample2x(const NodePtr& a);

NodePtr reshape(const NodePtr& a, std::vector<std::size_t> shape);

// a * s with s a scalar node (broadcast).
NodePtr scale_node(const NodePtr& a, const NodePtr& s);

// 1-D utilities.
NodePtr concat(const std::vector<NodePtr>& parts);
NodePtr slice(const NodePtr& a, std::size_t start, std::size_t len);
NodePtr index(const NodePtr& a, std::size_t i);
NodePtr stack_scalars(const std::vector<NodePtr>& scalars);

// out[c] = sum_j w_j * fm[c, y_j, x_j]; the taps are fixed data, gradient
// flows into the feature map only.
struct GatherTap {
  std::size_t y, x;
  double w;
};
NodePtr linear_gather(const NodePtr& featmap, const std::vector<GatherTap>& taps);

// sum_i w_i * scalars_i  (scalar result).
NodePtr weighted_sum(const std::vector<NodePtr>& scalars,
                     const std::vector<double>& weights);

// Populates grads of every needs_grad ancestor of a scalar root. Repeated
// calls accumulate. With release_intermediates, non-leaf grads are zeroed
// after the pass so shared subgraphs can be backpropped again safely.
void backward(const NodePtr& root);
void backward(const NodePtr& root, bool release_intermediates);

}  // namespace pmrl::ad
