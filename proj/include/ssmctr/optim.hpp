#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmctr/features.hpp"
#include "ssmctr/models.hpp"

namespace ssmctr {

enum class OptimizerKind { Sgd, Adam };

inline std::string_view name_of(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? "sgd" : "adam";
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

namespace detail {

/// Calls fn(begin, end) for each contiguous range of entries to update:
/// touched rows for tables, the whole tensor otherwise.
template <typename F>
void for_each_updated_range(const ParamRef& p, F&& fn) {
  if (p.touched) {
    const std::size_t width = p.tensor->size() / p.tensor->dim(0);
    for (auto r : p.touched->rows) fn(r * width, (r + 1) * width);
  } else {
    fn(std::size_t{0}, p.tensor->size());
  }
}

inline void clear_grad(ParamRef& p) {
  if (!p.tensor->has_grad()) return;
  auto g = p.tensor->grad();
  for_each_updated_range(p, [&](std::size_t b, std::size_t e) {
    std::fill(g.begin() + static_cast<long>(b), g.begin() + static_cast<long>(e), 0.0);
  });
  if (p.touched) p.touched->clear();
}

}  // namespace detail

/// Plain gradient descent; tables are updated only on touched rows.
class Sgd {
 public:
  explicit Sgd(OptimizerConfig c) : config_(c) {}

  void step(std::span<ParamRef> params) {
    for (auto& p : params) {
      if (p.trainable && p.tensor->has_grad()) {
        auto w = p.tensor->data();
        auto g = p.tensor->grad();
        detail::for_each_updated_range(p, [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) w[i] -= config_.lr * g[i];
        });
      }
      detail::clear_grad(p);
    }
  }

 private:
  OptimizerConfig config_;
};

/// Bias-corrected Adam. Tables get the lazy sparse update: moments and
/// weights of untouched rows are left alone. The step counter is global.
class Adam {
 public:
  explicit Adam(OptimizerConfig c) : config_(c) {}

  void step(std::span<ParamRef> params) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
      if (p.trainable && p.tensor->has_grad()) {
        State& s = state_[p.name];
        if (s.m.size() != p.tensor->size()) {
          s.m.assign(p.tensor->size(), 0.0);
          s.v.assign(p.tensor->size(), 0.0);
        }
        auto w = p.tensor->data();
        auto g = p.tensor->grad();
        detail::for_each_updated_range(p, [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) {
            s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
            s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double mhat = s.m[i] / c1;
            const double vhat = s.v[i] / c2;
            w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
          }
        });
      }
      detail::clear_grad(p);
    }
  }

  std::size_t steps() const { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  OptimizerConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, State> state_;
};

/// Either optimizer behind one interface.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig c) : kind_(c.kind), sgd_(c), adam_(c) {}
  void step(std::span<ParamRef> params) {
    if (kind_ == OptimizerKind::Sgd) {
      sgd_.step(params);
    } else {
      adam_.step(params);
    }
  }

 private:
  OptimizerKind kind_;
  Sgd sgd_;
  Adam adam_;
};

}  // namespace ssmctr
