#include <string>

#include "ctxedit/autodiff.hpp"

namespace ctxedit {

template <typename T>
const typename BasicTape<T>::Node& BasicTape<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw std::out_of_range("variable " + std::to_string(v.id) + " is not on this tape");
  }
  return nodes_[v.id];
}

template <typename T>
typename BasicTape<T>::Node& BasicTape<T>::node(Var v) {
  return const_cast<Node&>(std::as_const(*this).node(v));
}

template <typename T>
Var BasicTape<T>::leaf(TensorT value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var BasicTape<T>::record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.leaf = false;
  for (Var in : inputs) {
    if (node(in).requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
typename BasicTape<T>::TensorT& BasicTape<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = TensorT(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
const typename BasicTape<T>::TensorT& BasicTape<T>::grad(Var v) {
  return grad_buffer(v);
}

template <typename T>
void BasicTape<T>::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     shape_str(root.value.shape()));
  }
  if (!root.requires_grad) return;
  for (Node& n : nodes_) {
    if (!n.leaf) n.has_grad = false;
  }
  grad_buffer(loss)[0] += T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.leaf || !n.has_grad || !n.backward) continue;
    n.backward(*this, Var{static_cast<std::uint32_t>(i)});
  }
}

template <typename T>
void BasicTape<T>::zero_grad() {
  for (Node& n : nodes_) n.has_grad = false;
}

template class BasicTape<double>;
template class BasicTape<long double>;

}  // namespace ctxedit
