#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cart/rng.hpp"

namespace cart::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::string name;  // non-empty for parameters
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
  }
};

// Value handle onto the recorded computation graph. Copying a Tensor copies
// the handle, not the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor constant(const Shape& s, float v, bool requires_grad = false);
  static Tensor from_vector(const Shape& s, std::vector<float> data, bool requires_grad = false);
  static Tensor randn(const Shape& s, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<float>& value() { return node_->value; }
  const std::vector<float>& value() const { return node_->value; }
  const std::vector<float>& grad() const { return node_->grad; }
  float item() const;

  // Same values, no recorded history.
  Tensor detach() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable node with requires_grad; leaves keep them until zeroed.
void backward(const Tensor& loss);

}  // namespace cart::ad
