#include "mvb/gradcheck.hpp"

#include <cmath>

namespace mvb {

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h) {
    if (!(h > 0.0 && h <= 1e-2)) throw InputError("grad_check: h must be in (0, 1e-2]");
    for (const auto& p : params)
        if (!p.requires_grad())
            throw InputError("grad_check: all params must have requires_grad set");

    // Analytic pass.
    for (const auto& p : params) p.impl()->grad.clear();
    Tensor loss = f();
    if (!std::isfinite(loss.item_f64())) throw EvalError("grad_check: objective is not finite");
    loss.backward();

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (p.has_grad())
            analytic.push_back(p.grad_vec());
        else
            analytic.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }

    double worst = 0.0;
    NoGradGuard ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        float* d = p.data();
        int64_t n = p.numel();
        for (int64_t i = 0; i < n; ++i) {
            float orig = d[i];
            float hi = static_cast<float>(static_cast<double>(orig) + h);
            float lo = static_cast<float>(static_cast<double>(orig) - h);
            d[i] = hi;
            double f_hi = f().item_f64();
            d[i] = lo;
            double f_lo = f().item_f64();
            d[i] = orig;
            if (!std::isfinite(f_hi) || !std::isfinite(f_lo))
                throw EvalError("grad_check: objective is not finite under perturbation");
            double fd = (f_hi - f_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
            double a = analytic[pi][static_cast<size_t>(i)];
            double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace mvb
