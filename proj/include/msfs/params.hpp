#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msfs/autograd.hpp"
#include "msfs/ops.hpp"

namespace msfs {

/// Named trainable arrays, enumerated in insertion order.
template <typename T>
class ParameterStore {
public:
    Var<T> add(const std::string& path, Tensor<T> init) {
        if (index_.count(path)) throw ConfigError("duplicate parameter path: " + path);
        index_.emplace(path, entries_.size());
        entries_.emplace_back(path, Var<T>::leaf(std::move(init)));
        return entries_.back().second;
    }

    bool contains(const std::string& path) const { return index_.count(path) != 0; }

    Var<T> get(const std::string& path) const {
        auto it = index_.find(path);
        if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
        return entries_[it->second].second;
    }

    const std::vector<std::pair<std::string, Var<T>>>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : entries_) n += v.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, v] : entries_) v.zero_grad();
    }

    /// Copies values from another store with identical paths and shapes.
    template <typename U>
    void assign_from(const ParameterStore<U>& other) {
        for (const auto& [path, src] : other.entries()) {
            auto dst = get(path);
            if (dst.shape() != src.shape())
                throw CheckpointError("parameter " + path + " has shape " + shape_string(dst.shape()) +
                                      " but source provides " + shape_string(src.shape()));
            dst.mutable_value() = src.value().template cast<T>();
        }
    }

private:
    std::vector<std::pair<std::string, Var<T>>> entries_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
struct ConvParams {
    Var<T> weight;
    Var<T> bias;  // may be undefined

    Var<T> operator()(const Var<T>& x, std::size_t stride = 1) const {
        const std::size_t k = weight.shape()[2];
        return conv2d(x, weight, bias, stride, k / 2);
    }
    std::size_t out_channels() const { return weight.shape()[0]; }
};

template <typename T>
struct LayerNormParams {
    Var<T> gamma;
    Var<T> beta;

    Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
};

/// Creates parameters under a path prefix. Convolution weights are drawn
/// uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases start at zero and
/// layer-norm affines at (1, 0). Values are drawn in double precision so
/// float and double builds from the same seed hold the same numbers.
template <typename T>
class ParamBuilder {
public:
    ParamBuilder(ParameterStore<T>& store, std::mt19937_64& rng, std::string prefix = {})
        : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

    ParamBuilder scope(const std::string& name) const {
        return ParamBuilder(*store_, *rng_, prefix_.empty() ? name : prefix_ + "." + name);
    }

    std::string path(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

    Var<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor<T> t(std::move(shape));
        for (auto& v : t.values()) v = static_cast<T>(dist(*rng_));
        return store_->add(path(name), std::move(t));
    }

    Var<T> constant(const std::string& name, Shape shape, T value) {
        return store_->add(path(name), Tensor<T>(std::move(shape), value));
    }

    ConvParams<T> conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, bool bias = true) {
        ConvParams<T> p;
        p.weight = uniform(name + ".weight", {cout, cin, k, k}, cin * k * k);
        if (bias) p.bias = constant(name + ".bias", {cout}, T(0));
        return p;
    }

    LayerNormParams<T> norm(const std::string& name, std::size_t c) {
        return {constant(name + ".gamma", {c}, T(1)), constant(name + ".beta", {c}, T(0))};
    }

    std::mt19937_64& rng() { return *rng_; }
    ParameterStore<T>& store() { return *store_; }

private:
    ParameterStore<T>* store_;
    std::mt19937_64* rng_;
    std::string prefix_;
};

} // namespace msfs
