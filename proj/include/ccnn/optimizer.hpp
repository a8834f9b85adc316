#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ccnn/core.hpp"
#include "ccnn/tensor.hpp"

namespace ccnn {

// Named handle to one parameter tensor. Running batchnorm statistics are
// enumerated with trainable = false so they are checkpointed but never
// stepped.
template <typename T>
struct param_ref {
  std::string name;
  tensor<T>* value = nullptr;
  bool trainable = true;
};

// SGD with a momentum buffer per parameter:
//   v <- momentum * v + g
//   p <- p - lr * v
template <typename T>
class sgd {
 public:
  sgd(T lr, T momentum) : lr_(lr), momentum_(momentum) {
    require(lr > T(0), "sgd: learning rate must be positive");
  }

  void set_lr(T lr) {
    require(lr > T(0), "sgd: learning rate must be positive");
    lr_ = lr;
  }
  T lr() const { return lr_; }

  // grads[i] pairs with params[i]; empty grads are skipped (parameter not
  // reached by the loss this step).
  void step(const std::vector<param_ref<T>>& params, const std::vector<const tensor<T>*>& grads) {
    require(params.size() == grads.size(), "sgd: params/grads size mismatch");
    if (buffers_.empty()) {
      buffers_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i)
        if (params[i].trainable)
          buffers_[i] = tensor<T>(params[i].value->n, params[i].value->h, params[i].value->w,
                                  params[i].value->c);
    }
    for (size_t i = 0; i < params.size(); ++i) {
      if (!params[i].trainable || grads[i] == nullptr || grads[i]->empty()) continue;
      tensor<T>& p = *params[i].value;
      const tensor<T>& g = *grads[i];
      tensor<T>& v = buffers_[i];
      for (size_t j = 0; j < p.size(); ++j) {
        if (!std::isfinite(static_cast<double>(g.v[j])))
          throw error("sgd: non-finite gradient in " + params[i].name);
        v.v[j] = momentum_ * v.v[j] + g.v[j];
        p.v[j] -= lr_ * v.v[j];
      }
    }
  }

 private:
  T lr_;
  T momentum_;
  std::vector<tensor<T>> buffers_;
};

}  // namespace ccnn
