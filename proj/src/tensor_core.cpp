#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "perc/tensor.hpp"

namespace perc {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<S>(shape_numel(shape), S(0)),
                   requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  return from_data(shape, std::vector<S>(shape_numel(shape), value),
                   requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::from_data(Shape shape, std::vector<S> data,
                               bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                " does not match data length " +
                                std::to_string(data.size()));
  for (int d : shape)
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dim");
  auto node = std::make_shared<detail::Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::randn(Shape shape, Rng& rng, S stddev,
                           bool requires_grad) {
  std::vector<S> data(shape_numel(shape));
  rng.fill_normal(data.data(), data.size(), stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename S>
void Tensor<S>::set_requires_grad(bool v) {
  if (!node_->leaf)
    throw std::invalid_argument("requires_grad can only change on leaves");
  node_->requires_grad = v;
}

template <typename S>
std::span<const S> Tensor<S>::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no grad");
  return node_->grad;
}

template <typename S>
std::span<S> Tensor<S>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename S>
void Tensor<S>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor");
  return node_->value[0];
}

template <typename S>
Tensor<S> Tensor<S>::clone_detached(bool requires_grad) const {
  return from_data(node_->shape, node_->value, requires_grad);
}

template <typename S>
void backward(Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar");
  auto root = loss.node();
  if (!root->requires_grad)
    throw std::invalid_argument("backward: loss has no recorded graph");

  // iterative post-order DFS; reverse of the result is topological
  std::vector<detail::Node<S>*> order;
  std::unordered_set<detail::Node<S>*> seen;
  struct Frame {
    detail::Node<S>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::Node<S>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && seen.insert(p).second)
        stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, S(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<S>* n = *it;
    if (n->backward_fn) {
      n->backward_fn(*n);
      n->backward_fn = nullptr;  // graph is consumed
      n->parents.clear();
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(Tensor<float>&);
template void backward<double>(Tensor<double>&);

}  // namespace perc
