#pragma once

#include <functional>
#include <vector>

#include "comad/errors.hpp"
#include "comad/tensor.hpp"

namespace comad {

// Reverse-mode tape. Ops append backward closures in execution order, which
// is a valid topological order by construction; backward() walks the list in
// reverse exactly once. One tape accepts recordings from a single logical
// thread; the active tape is thread-local.
template <typename T>
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
  // Gradients accumulate into each tensor's grad buffer; tensors the loss
  // never touched keep an empty (all-zero) gradient.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss has shape " + shape_str(loss.shape()) +
                          ", expected a scalar");
    if (nodes_.empty())
      throw ContractError("backward: tape is empty");
    loss.grad().assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  // RAII activation; ops record only while a scope is alive.
  class Scope {
  public:
    explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

  private:
    Tape* prev_;
  };

private:
  static thread_local Tape* active_;
  std::vector<std::function<void()>> nodes_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

}  // namespace comad
