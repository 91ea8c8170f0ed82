#include "cart/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "cart/errors.hpp"

namespace cart::ad {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value.assign(static_cast<size_t>(shape_numel(s)), 0.0f);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::constant(const Shape& s, float v, bool requires_grad) {
  Tensor t = zeros(s, requires_grad);
  std::fill(t.value().begin(), t.value().end(), v);
  return t;
}

Tensor Tensor::from_vector(const Shape& s, std::vector<float> data, bool requires_grad) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(s)) {
    throw ShapeError("from_vector: data length " + std::to_string(data.size()) + " does not match shape " + shape_str(s));
  }
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(s, requires_grad);
  for (auto& v : t.value()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->value = node_->value;
  n->requires_grad = false;
  return Tensor(n);
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  // Post-order DFS; reverse gives a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* node = stack.back().first;
    const size_t next_input = stack.back().second;
    if (next_input < node->inputs.size()) {
      stack.back().second = next_input + 1;
      Node* child = node->inputs[next_input].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace cart::ad
