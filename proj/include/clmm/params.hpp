#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "clmm/random.hpp"
#include "clmm/tensor.hpp"

namespace clmm {

// Ordered (name, tensor) view over a model's trainable state. Tensors are
// handles, so mutating through the list mutates the model.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline std::size_t count_parameters(const NamedParams& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

// Uniform in ±sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(numel_of(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor glorot_matrix(std::size_t in, std::size_t out, Rng& rng) { return glorot({in, out}, in, out, rng); }

inline Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

inline void zero_grads(const NamedParams& params) {
    for (const auto& [name, t] : params) const_cast<Tensor&>(t).zero_grad();
}

// Copies values from `src` into `dst`, matching by position and shape.
inline void copy_values(const NamedParams& src, NamedParams& dst) {
    if (src.size() != dst.size()) throw ContractError("copy_values: parameter count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].second.shape() != dst[i].second.shape()) {
            throw ContractError("copy_values: shape drift at " + src[i].first);
        }
        auto out = dst[i].second.mutable_values();
        auto in = src[i].second.values();
        std::copy(in.begin(), in.end(), out.begin());
    }
}

// Deep copy of a model: every parameter handle replaced by fresh storage.
template <typename Model>
Model clone_model(const Model& model) {
    Model copy = model;
    for (auto& ref : copy.parameter_refs()) *ref.second = ref.second->clone();
    return copy;
}

template <typename Model>
NamedParams named_parameters(Model& model) {
    NamedParams out;
    for (auto& ref : model.parameter_refs()) out.emplace_back(ref.first, *ref.second);
    return out;
}

} // namespace clmm
