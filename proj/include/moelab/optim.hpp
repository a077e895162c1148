#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/errors.hpp"

namespace moelab {

// A named, possibly frozen, trainable tensor. Freezing clears
// requires_grad so no gradient is ever accumulated and the optimizer
// leaves the value bytes untouched.
template <typename T>
struct Parameter {
  std::string name;
  ad::Var<T> var;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Mat<T> value, bool frozen_ = false)
      : name(std::move(n)), var(ad::make_var(std::move(value), !frozen_)), frozen(frozen_) {}

  void set_frozen(bool f) {
    frozen = f;
    var->requires_grad = !f;
    if (f) var->zero_grad();
  }
  Mat<T>& value() { return var->value; }
  const Mat<T>& value() const { return var->value; }
  Mat<T>& grad() { return var->grad; }
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam. Moment state is keyed by parameter name so a
// parameter keeps its slot across phases.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(std::vector<Parameter<T>*> params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (Parameter<T>* p : params) {
      if (p->frozen || !p->var->requires_grad) continue;
      if (p->var->grad.empty()) continue;  // no gradient flowed this step
      Mat<T>& g = p->var->grad;
      Mat<T>& v = p->var->value;
      State& st = states_[p->name];
      if (st.m.empty()) {
        st.m.assign(v.size(), 0.0);
        st.v.assign(v.size(), 0.0);
      }
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = double(g[i]);
        if (std::isnan(gi)) {
          throw DivergenceError("AdamW: NaN gradient in parameter '" + p->name + "'");
        }
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        double upd = cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                cfg_.weight_decay * double(v[i]));
        v[i] = T(double(v[i]) - upd);
      }
    }
  }

  void zero_grad(std::vector<Parameter<T>*> params) {
    for (Parameter<T>* p : params) p->var->zero_grad();
  }

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::map<std::string, State> states_;
  long t_ = 0;
};

}  // namespace moelab
