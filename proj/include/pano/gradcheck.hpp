#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pano/tensor.hpp"

namespace pano {

// Compares the tape gradient of a scalar-valued function against central
// finite differences. Returns max over elements of
//   |analytic - central| / max(1, |central|).
// fn must be deterministic; step must lie in (0, 0.1].
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double step);

struct GradCheckCase {
    std::string name;
    // Builds seeded random inputs and returns the max relative error.
    std::function<double(std::mt19937&)> run;
};

// Every differentiable op and every pipeline loss, checked on random inputs
// with extents <= 8 at step 1e-3.
const std::vector<GradCheckCase>& gradcheck_suite();

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Runs the whole suite with a fixed seed; tolerance per case.
std::vector<GradCheckReport> run_gradcheck_suite(unsigned seed = 17, double tolerance = 1e-3);

}  // namespace pano
