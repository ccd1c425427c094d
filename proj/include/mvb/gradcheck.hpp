#ifndef MVB_GRADCHECK_HPP
#define MVB_GRADCHECK_HPP

#include "mvb/tensor.hpp"

#include <functional>

namespace mvb {

// Compares reverse-mode gradients against central finite differences for
// every coordinate of every tensor in `params`. `f` must rebuild the scalar
// objective from the current parameter values and be deterministic.
// Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
// The difference quotient uses the actually-representable perturbed values
// and f64 arithmetic. Throws EvalError if f is non-finite.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h);

}  // namespace mvb

#endif
