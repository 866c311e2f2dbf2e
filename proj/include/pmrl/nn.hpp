#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pmrl/autodiff.hpp"

namespace pmrl::nn {

using ad::NodePtr;

// y = W x + b, with W [m,n], x [n], b [m].
NodePtr linear(const NodePtr& w, const NodePtr& x, const NodePtr& b);

struct GruWeights {
  NodePtr wz, bz;  // update gate
  NodePtr wr, br;  // reset gate
  NodePtr wh, bh;  // candidate state
};

// Conventional GRU update:
//   z = sigmoid(Wz [x,h] + bz), r = sigmoid(Wr [x,h] + br)
//   htil = tanh(Wh [x, r*h] + bh), h' = (1-z)*h + z*htil
NodePtr gru_cell(const NodePtr& x, const NodePtr& h, const GruWeights& w);

// Leaky-relu MLP, optionally sigmoid-terminated.
struct Mlp {
  std::vector<NodePtr> ws;
  std::vector<NodePtr> bs;
  bool sigmoid_out = false;
  NodePtr forward(const NodePtr& x) const;
};

// Named trainable parameters plus Adam state. One store owns all weights
// of the pipeline; checkpoints serialize it losslessly.
class ParamStore {
 public:
  NodePtr create(const std::string& name, std::vector<std::size_t> shape,
                 std::mt19937_64& rng, double stddev);
  NodePtr create_zeros(const std::string& name,
                       std::vector<std::size_t> shape);
  NodePtr create_from(const std::string& name, Array value);

  bool has(const std::string& name) const { return params_.count(name) > 0; }
  NodePtr get(const std::string& name) const;
  const std::map<std::string, NodePtr>& all() const { return params_; }

  void zero_grads();
  void ensure_grads();  // allocates zero grads where backward never reached

  // Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8); zeroes grads after.
  // Throws if any parameter has no gradient array.
  void adam_step(double lr);
  std::uint64_t step_count() const { return step_; }

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  std::map<std::string, NodePtr> params_;
  std::map<std::string, Array> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace pmrl::nn
