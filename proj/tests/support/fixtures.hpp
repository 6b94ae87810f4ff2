#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "gwmoe/model.hpp"
#include "gwmoe/rng.hpp"

namespace gwmoe::testing {

inline ModelConfig tiny_config(HeadType head = HeadType::next_token, std::size_t n_experts = 4, std::size_t k = 2) {
    MoELayerConfig layer;
    layer.n_experts = n_experts;
    layer.top_k = k;
    layer.d_ff = 5;
    auto c = ModelConfig::uniform(7, 4, 2, 2, 3, layer, head);
    c.n_classes = 3;
    c.init_scale = 0.5;
    return c;
}

inline std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> t(n);
    for (auto& v : t) v = static_cast<int>(rng.below(vocab));
    return t;
}

/// Sets each layer's h_star halfway between the n-th and (n+1)-th largest
/// routing entropy of `tokens`, layer by layer, with an unlimited slot budget.
inline void broadcast_top_n(Model& model, std::span<const int> tokens, std::size_t n) {
    model.set_max_num_slots(std::numeric_limits<std::size_t>::max());
    for (std::size_t l = 0; l < model.n_layers(); ++l) model.set_layer_h_star(l, 1e9);
    for (std::size_t l = 0; l < model.n_layers(); ++l) {
        ForwardOptions o;
        o.mode = Mode::train;
        o.gw = true;
        auto out = model.forward(tokens, o);
        std::vector<double> h;
        for (const auto& d : out.traces[l].decisions) h.push_back(d.entropy);
        std::sort(h.begin(), h.end(), std::greater<>());
        model.set_layer_h_star(l, 0.5 * (h[n - 1] + h[n]));
    }
}

}  // namespace gwmoe::testing
