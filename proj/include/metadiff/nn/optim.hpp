#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "metadiff/nn/tensor.hpp"

namespace metadiff::nn {

inline constexpr double kDefaultLearningRate = 1e-4;

/// Cosine annealing from lr0 at epoch 0 to 0 at epoch == total_epochs.
inline double lr_at(int epoch, int total_epochs, double lr0 = kDefaultLearningRate) {
  if (total_epochs <= 0) throw std::invalid_argument("lr_at: total_epochs must be positive");
  if (epoch < 0 || epoch > total_epochs)
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(total_epochs) + "]");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

template <typename T>
class Adam {
 public:
  Adam(ParameterList<T> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->grad.zero();
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i];
        const double mi = beta1_ * m[i] + (1.0 - beta1_) * g;
        const double vi = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        p.value[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
      }
    }
  }

  long long steps() const { return t_; }
  void set_steps(long long t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const ParameterList<T>& parameters() const { return params_; }

 private:
  ParameterList<T> params_;
  std::vector<Tensor<T>> m_, v_;
  double beta1_, beta2_, eps_;
  long long t_ = 0;
};

}  // namespace metadiff::nn
