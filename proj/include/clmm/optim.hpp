#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "clmm/params.hpp"

namespace clmm {

struct SgdConfig {
    double learning_rate = 1e-3;
    double momentum = 0.0;
};

// SGD with heavy-ball momentum: v ← μ·v + g; θ ← θ − lr·v.
class Sgd {
public:
    explicit Sgd(SgdConfig cfg) : cfg_(cfg) {
        if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ConfigError("sgd momentum must lie in [0,1)");
        if (!(cfg.learning_rate > 0.0)) throw ConfigError("sgd learning rate must be positive");
    }

    const SgdConfig& config() const { return cfg_; }

    // Applies one update to every parameter; a parameter without a gradient
    // is treated as having zero gradient. Gradients are cleared afterwards.
    void step(NamedParams& params) {
        for (auto& [name, p] : params) {
            auto& v = velocity_[name];
            if (v.empty()) v.assign(p.numel(), 0.0);
            if (v.size() != p.numel()) {
                throw DimensionError("sgd: velocity for " + name + " has " + std::to_string(v.size()) +
                                     " entries, parameter has " + std::to_string(p.numel()));
            }
            auto theta = p.mutable_values();
            const auto g = p.grad();
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double gi = g.empty() ? 0.0 : g[i];
                v[i] = cfg_.momentum * v[i] + gi;
                theta[i] -= cfg_.learning_rate * v[i];
            }
            p.zero_grad();
        }
    }

    const std::unordered_map<std::string, std::vector<double>>& velocity() const { return velocity_; }
    std::unordered_map<std::string, std::vector<double>>& velocity() { return velocity_; }

private:
    SgdConfig cfg_;
    std::unordered_map<std::string, std::vector<double>> velocity_;
};

// Functional single-tensor form: returns the updated parameter values.
inline std::vector<double> sgd_step(std::span<const double> theta, std::span<const double> grad,
                                    std::vector<double>& velocity, const SgdConfig& cfg) {
    if (theta.size() != grad.size() || theta.size() != velocity.size()) {
        throw DimensionError("sgd_step: parameter/gradient/velocity sizes differ (" + std::to_string(theta.size()) +
                             ", " + std::to_string(grad.size()) + ", " + std::to_string(velocity.size()) + ")");
    }
    std::vector<double> out(theta.begin(), theta.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + grad[i];
        out[i] -= cfg.learning_rate * velocity[i];
    }
    return out;
}

} // namespace clmm
