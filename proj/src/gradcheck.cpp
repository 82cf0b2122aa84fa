#include "dadm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dadm/errors.hpp"

namespace dadm {

namespace {

double scalar_value(const Var& v) {
    if (v.size() != 1) throw NumericError("grad_check: function returned shape " + shape_str(v.shape()));
    const double x = v.value()[0];
    if (!std::isfinite(x)) throw NumericError("grad_check: function value is not finite");
    return x;
}

void note(GradCheckReport& r, std::size_t input, std::size_t coord, double a, double n, double tol) {
    const double e = relative_error(a, n);
    if (r.coordinates++ == 0 || e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst_input = input;
        r.worst_coord = coord;
        r.analytic = a;
        r.numeric = n;
    }
    if (e > tol) r.passed = false;
}

}  // namespace

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "pass" : "FAIL") << " max_rel_err=" << max_rel_error << " coords=" << coordinates
       << " worst=(" << worst_input << "," << worst_coord << ") analytic=" << analytic << " numeric=" << numeric;
    return os.str();
}

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& points, double step, double tol) {
    if (!(step > 0.0)) throw ConfigError("grad_check: step must be positive");
    auto evaluate = [&](const std::vector<Tensor>& at) {
        Tape tape(false);
        std::vector<Var> vars;
        for (const auto& t : at) vars.push_back(tape.variable(t));
        return scalar_value(f(tape, vars));
    };

    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& t : points) vars.push_back(tape.variable(t));
        const Var out = f(tape, vars);
        scalar_value(out);
        const Gradients g = tape.backward(out);
        for (const auto& v : vars) analytic.push_back(g.of(v));
    }

    GradCheckReport report;
    std::vector<Tensor> probe = points;
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t k = 0; k < points[i].size(); ++k) {
            const double x0 = points[i][k];
            probe[i][k] = x0 + step;
            const double fp = evaluate(probe);
            probe[i][k] = x0 - step;
            const double fm = evaluate(probe);
            probe[i][k] = x0;
            note(report, i, k, analytic[i][k], (fp - fm) / (2.0 * step), tol);
        }
    }
    return report;
}

GradCheckReport grad_check_params(const std::function<Var(Tape&)>& f, const std::vector<Parameter*>& params,
                                  const std::vector<ParamCoord>& coords, double step, double tol) {
    if (!(step > 0.0)) throw ConfigError("grad_check_params: step must be positive");
    std::vector<Tensor> analytic;
    {
        Tape tape;
        const Var out = f(tape);
        scalar_value(out);
        const Gradients g = tape.backward(out);
        for (const Parameter* p : params) analytic.push_back(g.of(*p));
    }
    auto evaluate = [&] {
        Tape tape(false);
        return scalar_value(f(tape));
    };

    GradCheckReport report;
    for (const ParamCoord& c : coords) {
        if (c.param >= params.size() || c.index >= params[c.param]->value.size())
            throw ShapeError("grad_check_params: coordinate out of range");
        double& slot = params[c.param]->value[c.index];
        const double x0 = slot;
        slot = x0 + step;
        const double fp = evaluate();
        slot = x0 - step;
        const double fm = evaluate();
        slot = x0;
        note(report, c.param, c.index, analytic[c.param][c.index], (fp - fm) / (2.0 * step), tol);
    }
    return report;
}

}  // namespace dadm
