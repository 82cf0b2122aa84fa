#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dadm/autodiff.hpp"

namespace dadm {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    /// Input index and flat coordinate of the worst mismatch.
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    bool passed = true;

    std::string summary() const;
};

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

/// Builds a scalar on the given tape from variables bound to the inputs.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Reverse-mode gradient of `f` at `points` against central differences,
/// coordinate by coordinate. Throws NumericError if f is non-scalar or
/// non-finite anywhere it is evaluated.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& points, double step = 1e-5,
                           double tol = 1e-4);

/// Coordinates of a parameter to probe: params[param][index].
struct ParamCoord {
    std::size_t param;
    std::size_t index;
};

/// Same comparison for weights held in Parameters. `f` must bind the
/// parameters through Tape::param. Values are perturbed in place and
/// restored before returning.
GradCheckReport grad_check_params(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                                  const std::vector<ParamCoord>& coords, double step = 1e-5, double tol = 1e-4);

}  // namespace dadm
