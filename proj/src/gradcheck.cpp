#include "prefopt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace prefopt {

double grad_check(const std::function<Tensor()>& forward, const std::vector<Tensor>& params,
                  double h, Rng rng, int n_coords) {
    if (params.empty()) throw std::invalid_argument("grad_check: no parameters");
    if (h <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

    std::size_t total = 0;
    for (const auto& p : params) total += p.data->size();

    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
    Tensor loss = forward();
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("grad_check: non-finite loss at base point");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad_values());

    // Pick coordinates without replacement when feasible.
    std::vector<std::size_t> coords;
    if (total <= static_cast<std::size_t>(n_coords)) {
        coords.resize(total);
        for (std::size_t i = 0; i < total; ++i) coords[i] = i;
    } else {
        std::vector<std::size_t> all(total);
        for (std::size_t i = 0; i < total; ++i) all[i] = i;
        for (int i = 0; i < n_coords; ++i) {
            const std::size_t j = i + rng.next_below(total - i);
            std::swap(all[i], all[j]);
            coords.push_back(all[i]);
        }
    }

    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t flat : coords) {
        std::size_t pi = 0, offset = flat;
        while (offset >= params[pi].data->size()) {
            offset -= params[pi].data->size();
            ++pi;
        }
        auto& values = *params[pi].data;
        const double saved = values[offset];

        values[offset] = saved + h;
        const double f_plus = forward().item();
        values[offset] = saved - h;
        const double f_minus = forward().item();
        values[offset] = saved;

        if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
            throw std::runtime_error("grad_check: non-finite evaluation at parameter " +
                                     std::to_string(pi) + " coordinate " + std::to_string(offset));

        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double a = analytic[pi][offset];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace prefopt
