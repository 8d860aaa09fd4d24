#pragma once

#include <cmath>
#include <vector>

#include "udavt/params.hpp"

namespace udavt {

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// velocity, matching v = m*v + g + wd*p; p -= lr*v. Velocity buffers are
// keyed by parameter name so adding params mid-run (projection head, second
// classifier) is safe.
template <class S>
class SgdT {
  public:
    void step(ParamStoreT<S>& params, double lr, double weight_decay, double momentum) {
        if (lr < 0) throw ConfigError("sgd: negative learning rate " + std::to_string(lr));
        for (auto& e : params.entries()) {
            if (e.frozen) continue;
            if (!e.tensor.has_grad()) continue;  // untouched this step
            auto& p = e.tensor.data();
            auto& g = e.tensor.grad();
            auto& v = velocity_[e.name];
            if (v.size() != p.size()) v.assign(p.size(), S(0));
            for (size_t i = 0; i < p.size(); ++i) {
                S upd = static_cast<S>(momentum) * v[i] + g[i] + static_cast<S>(weight_decay) * p[i];
                v[i] = upd;
                p[i] -= static_cast<S>(lr) * upd;
            }
        }
    }

    void reset() { velocity_.clear(); }

  private:
    std::unordered_map<std::string, std::vector<S>> velocity_;
};

inline double cosine_lr(double base_lr, int epoch, int total_epochs) {
    if (total_epochs <= 0) throw ConfigError("cosine_lr: total_epochs must be positive");
    if (epoch < 0 || epoch > total_epochs)
        throw PreconditionError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0," +
                                std::to_string(total_epochs) + "]");
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

}  // namespace udavt
