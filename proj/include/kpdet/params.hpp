#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kpdet/autograd.hpp"
#include "kpdet/rng.hpp"

namespace kpdet {

/// Ordered name -> parameter table. Iteration order is registration order,
/// which keeps optimizer updates and checkpoints deterministic.
class ParamRegistry {
public:
    ag::Var add(const std::string& name, Tensor init) {
        for (const auto& [n, v] : items_) {
            if (n == name) throw ParameterError("duplicate parameter name: " + name);
        }
        ag::Var v = ag::leaf(std::move(init));
        items_.emplace_back(name, v);
        return v;
    }

    const std::vector<std::pair<std::string, ag::Var>>& items() const { return items_; }

    ag::Var find(const std::string& name) const {
        for (const auto& [n, v] : items_) {
            if (n == name) return v;
        }
        throw StateError("unknown parameter: " + name);
    }

    void zero_grads() {
        for (auto& [n, v] : items_) {
            if (v->grad.same_shape(v->value)) {
                for (std::size_t i = 0; i < v->grad.size(); ++i) v->grad[i] = 0.0;
            }
        }
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [name, v] : items_) n += v->value.size();
        return n;
    }

private:
    std::vector<std::pair<std::string, ag::Var>> items_;
};

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out,
                             std::vector<std::size_t> shape, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

} // namespace kpdet
