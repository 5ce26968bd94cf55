#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "voxseg/tensor.hpp"

namespace voxseg {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
  bool amsgrad = true;
};

// AdamW with decoupled weight decay and the AMSGrad max-of-second-moment rule.
// Update order per element:
//   p *= 1 - lr*wd
//   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2;  vmax = max(vmax, v)
//   p -= lr * (m / (1-b1^t)) / (sqrt(vmax / (1-b2^t)) + eps)
template <class T>
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

  template <class Net>
  void step(Net& net) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    net.visit_params([&](const std::string& name, Tensor<T>& p, Tensor<T>& g) {
      State& st = states_[name];
      if (st.m.data.empty()) {
        st.m.resize_like(p);
        st.v.resize_like(p);
        if (cfg_.amsgrad) st.vmax.resize_like(p);
      }
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        double pv = double(p.data[i]) * (1.0 - cfg_.lr * cfg_.weight_decay);
        const double gv = double(g.data[i]);
        const double m = cfg_.beta1 * double(st.m.data[i]) + (1.0 - cfg_.beta1) * gv;
        const double v = cfg_.beta2 * double(st.v.data[i]) + (1.0 - cfg_.beta2) * gv * gv;
        st.m.data[i] = T(m);
        st.v.data[i] = T(v);
        double vden = v;
        if (cfg_.amsgrad) {
          vden = std::max(double(st.vmax.data[i]), v);
          st.vmax.data[i] = T(vden);
        }
        pv -= cfg_.lr * (m / bc1) / (std::sqrt(vden / bc2) + cfg_.eps);
        p.data[i] = T(pv);
      }
    });
  }

 private:
  struct State {
    Tensor<T> m, v, vmax;
  };
  AdamWConfig cfg_;
  std::unordered_map<std::string, State> states_;
  std::int64_t t_ = 0;
};

}  // namespace voxseg
