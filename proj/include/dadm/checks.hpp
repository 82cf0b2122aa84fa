#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dadm/mim.hpp"

namespace dadm {

/// Outcome of one registered finite-difference check.
struct CheckResult {
    std::string module;
    std::string name;
    bool passed = false;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t coordinates = 0;
    std::string detail;  // worst coordinate summary
};

/// "tensor", "mim", "losses", "model".
const std::vector<std::string>& gradcheck_modules();

/// Runs the registered checks of `module` ("all" runs every module).
/// `points` random evaluation points are drawn per shallow check. Throws
/// ConfigError for an unknown module.
std::vector<CheckResult> run_gradchecks(const std::string& module, std::uint64_t seed = 1, std::size_t points = 5);

/// Monte Carlo mean of cos(theta), theta ~ N(mu, sigma), against the closed
/// form exp(-sigma^2 / 2) cos(mu).
struct CosineExpectation {
    double monte_carlo = 0.0;
    double analytic = 0.0;
    double abs_error = 0.0;
};
/// Throws ConfigError for sigma < 0 or n < 1e5.
CosineExpectation validate_cosine_expectation(double mu, double sigma, std::size_t n, std::uint64_t seed);

/// MINE on a bivariate standard Gaussian with correlation rho.
struct MiBenchResult {
    double analytic = 0.0;  // -0.5 ln(1 - rho^2)
    double estimate = 0.0;
    std::vector<double> trace;
};
MiBenchResult mi_bench(double rho, std::size_t n, const MineOptions& opt, std::uint64_t seed);

/// Cosine-expectation identities and the PG-IRM contraction identity.
std::vector<CheckResult> validate_identities(std::uint64_t seed = 1);

}  // namespace dadm
