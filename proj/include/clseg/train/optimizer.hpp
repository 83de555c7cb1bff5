#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>

#include "clseg/nn/param_store.hpp"

namespace clseg {

enum class OptimizerKind { Adam, SgdMomentum };

inline std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::Adam ? "adam" : "sgd-momentum";
}

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "sgd-momentum") return OptimizerKind::SgdMomentum;
    raise(ErrorCode::ConfigInvalid, "unknown optimizer: " + s);
}

/// Adam / SGD-momentum over a ParamStore. Parameters in the skip set are left
/// completely untouched: no update and no optimizer-state change, which is
/// what the freeze contract requires.
template <typename T>
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

    void step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
              const std::set<std::string>& skip = {}) {
        for (auto& [name, p] : params.entries()) {
            if (skip.count(name)) continue;
            const Tensor<T>& g = grads.at(name);
            if (kind_ == OptimizerKind::Adam) {
                auto& st = state_[name];
                if (st.m.numel() == 0) {
                    st.m = Tensor<T>(p.shape());
                    st.v = Tensor<T>(p.shape());
                }
                ++st.t;
                double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
                double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
                for (size_t i = 0; i < p.numel(); ++i) {
                    st.m[i] = static_cast<T>(beta1_ * st.m[i] + (1.0 - beta1_) * g[i]);
                    st.v[i] = static_cast<T>(beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i]);
                    double mhat = st.m[i] / bc1;
                    double vhat = st.v[i] / bc2;
                    p[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
                }
            } else {
                auto& st = state_[name];
                if (st.m.numel() == 0) st.m = Tensor<T>(p.shape());
                for (size_t i = 0; i < p.numel(); ++i) {
                    st.m[i] = static_cast<T>(momentum_ * st.m[i] + g[i]);
                    p[i] -= static_cast<T>(lr_ * st.m[i]);
                }
            }
        }
    }

private:
    struct State {
        Tensor<T> m;
        Tensor<T> v;
        int64_t t = 0;
    };

    OptimizerKind kind_;
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    double momentum_ = 0.9;
    std::map<std::string, State> state_;
};

}  // namespace clseg
