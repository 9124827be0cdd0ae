#pragma once

// Seeded random fills and a central-difference gradient checker, shared by the
// self-test command and the test suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msfs/autograd.hpp"
#include "msfs/params.hpp"
#include "msfs/tensor.hpp"

namespace msfs::check {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
void randomize(Var<T>& v, std::mt19937_64& rng, double lo = -0.5, double hi = 0.5) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : v.mutable_value().values()) x = static_cast<T>(dist(rng));
}

/// Moves every zero-initialized or identity-initialized parameter off its
/// start value so that degenerate paths (zero scales, unit norms, zero
/// biases) do not hide errors. Attention temperatures and scales stay positive.
template <typename T>
void perturb(ParameterStore<T>& store, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto [name, v] : store.entries()) {
        const bool temperature = name.ends_with(".beta") && name.find("norm") == std::string::npos;
        if (name.ends_with("gamma") || name.find("lambda") != std::string::npos || temperature)
            randomize(v, rng, 0.5, 1.5);
        else if (name.ends_with("bias") || name.ends_with("beta"))
            randomize(v, rng, -0.3, 0.3);
    }
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// Relative error with a small absolute floor on the denominator so that
/// entries whose true gradient is ~0 are judged on absolute error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backprop gradients of the scalar `f()` with central differences.
/// `samples` entries are drawn uniformly over all scalars of `vars`
/// (every scalar when samples == 0).
inline GradCheckResult gradcheck(const std::function<Var<double>()>& f,
                                 const std::vector<std::pair<std::string, Var<double>>>& vars,
                                 std::size_t samples = 0, std::uint64_t seed = 1, double step = 1e-4) {
    for (auto [_, v] : vars) v.zero_grad();
    auto loss = f();
    backward(loss);

    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (std::size_t i = 0; i < vars.size(); ++i)
        for (std::size_t j = 0; j < vars[i].second.value().size(); ++j) entries.emplace_back(i, j);
    if (samples && samples < entries.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(samples);
    }

    GradCheckResult res;
    NoGradGuard ng;
    for (auto [i, j] : entries) {
        Var<double> v = vars[i].second;
        const double analytic = v.has_grad() ? v.grad()[j] : 0.0;
        const double saved = v.value()[j];
        v.mutable_value()[j] = saved + step;
        const double fp = f().value()[0];
        v.mutable_value()[j] = saved - step;
        const double fm = f().value()[0];
        v.mutable_value()[j] = saved;
        const double numeric = (fp - fm) / (2 * step);
        const double err = relative_error(analytic, numeric);
        ++res.checked;
        if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst = vars[i].first + "[" + std::to_string(j) + "] analytic=" + std::to_string(analytic) +
                        " numeric=" + std::to_string(numeric);
        }
    }
    return res;
}

} // namespace msfs::check
