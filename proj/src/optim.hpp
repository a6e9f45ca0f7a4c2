#pragma once

// internal: optimizer steps shared by base pre-training and adapter training

#include "tlm/common.hpp"
#include "tlm/model.hpp"

#include <map>
#include <string>

namespace tlm::detail {

struct AdamState {
    std::map<std::string, MatD> m, v;
    int64_t t = 0; // bias-correction step, bumped once per optimizer step
};

inline void sgd_step(ParamRef p, const MatD& g, double lr) {
    const double* gd = g.data();
    for (size_t i = 0; i < p.elements; ++i) {
        p.data[i] = static_cast<float>(static_cast<double>(p.data[i]) - lr * gd[i]);
    }
}

inline void adam_step(ParamRef p, const std::string& name, const MatD& g, double lr,
                      AdamState& st) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    MatD& m = st.m.try_emplace(name, MatD::Zero(g.rows(), g.cols())).first->second;
    MatD& v = st.v.try_emplace(name, MatD::Zero(g.rows(), g.cols())).first->second;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    const double* md = m.data();
    const double* vd = v.data();
    for (size_t i = 0; i < p.elements; ++i) {
        const double mhat = md[i] / bc1;
        const double vhat = vd[i] / bc2;
        p.data[i] = static_cast<float>(static_cast<double>(p.data[i]) -
                                       lr * mhat / (std::sqrt(vhat) + eps));
    }
}

} // namespace tlm::detail
