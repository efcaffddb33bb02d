#include "pano/gradcheck.hpp"

#include <cmath>

#include "pano/errors.hpp"

namespace pano {

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double step) {
    if (!(step > 0.0) || step > 0.1)
        throw ConfigError("grad_check: step must lie in (0, 0.1], got " + std::to_string(step));

    Tensor xg = x.clone(/*requires_grad=*/true);
    Tensor y = fn(xg);
    if (y.numel() != 1)
        throw DimensionError("grad_check: fn must return a scalar");
    if (!std::isfinite(y.item()))
        throw NumericError("grad_check: fn returned a non-finite value");
    y.backward();
    std::vector<float> analytic(xg.grad().begin(), xg.grad().end());
    if (analytic.empty()) analytic.assign(x.numel(), 0.0f);  // fn independent of x

    double max_rel = 0.0;
    Tensor probe = x.clone(false);
    auto buf = probe.raw_data();
    NoGradGuard ng;
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const float saved = buf[i];
        buf[i] = static_cast<float>(saved + step);
        const double fp = fn(probe).item();
        buf[i] = static_cast<float>(saved - step);
        const double fm = fn(probe).item();
        buf[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: fn returned a non-finite value during probing");
        const double fd = (fp - fm) / (2.0 * step);
        const double rel = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

std::vector<GradCheckReport> run_gradcheck_suite(unsigned seed, double tolerance) {
    std::vector<GradCheckReport> reports;
    for (const auto& c : gradcheck_suite()) {
        std::mt19937 rng(seed);
        GradCheckReport r;
        r.name = c.name;
        r.max_rel_err = c.run(rng);
        r.pass = r.max_rel_err < tolerance;
        reports.push_back(std::move(r));
    }
    return reports;
}

}  // namespace pano
