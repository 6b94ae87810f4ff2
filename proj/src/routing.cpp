#include "gwmoe/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"
#include "gwmoe/ops.hpp"

namespace gwmoe {

RouterScores route_scores(const Tensor& router_weights, const Tensor& hidden, int layer_id) {
    if (router_weights.rank() != 2 || hidden.rank() != 2 || hidden.dim(1) != router_weights.dim(0))
        throw DimensionError("route_scores: hidden " + shape_str(hidden.shape()) + " vs router " +
                             shape_str(router_weights.shape()));
    return RouterScores{ops::softmax(ops::matmul(hidden, router_weights), -1), layer_id};
}

void validate_scores(const RouterScores& scores) {
    if (scores.scores.rank() != 2) throw DataError("router scores must be [tokens, experts]");
    for (std::size_t t = 0; t < scores.tokens(); ++t) {
        double total = 0.0;
        for (double g : scores.row(t)) {
            if (!(g >= 0.0 && g <= 1.0))
                throw DataError("router score row " + std::to_string(t) + " has entry outside [0,1]");
            total += g;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw DataError("router score row " + std::to_string(t) + " sums to " + io::format_double(total));
    }
}

double row_entropy(std::span<const double> row) {
    // summed in ascending order
    std::vector<double> sorted(row.begin(), row.end());
    std::sort(sorted.begin(), sorted.end());
    double h = 0.0;
    for (double g : sorted)
        if (g > 0.0) h -= g * std::log(g);
    const double cap = std::log(static_cast<double>(row.size()));
    return std::clamp(h, 0.0, cap);
}

Tensor entropy(const RouterScores& scores) {
    validate_scores(scores);
    Tensor out({scores.tokens()});
    for (std::size_t t = 0; t < scores.tokens(); ++t) out[t] = row_entropy(scores.row(t));
    return out;
}

Tensor normalized_entropy(const RouterScores& scores) {
    if (scores.scores.rank() != 2 || scores.experts() < 2)
        throw ConfigError("normalized entropy requires at least 2 experts");
    Tensor h = entropy(scores);
    const double ln_n = std::log(static_cast<double>(scores.experts()));
    for (double& v : h.data()) v = std::min(v / ln_n, 1.0);
    return h;
}

TopKSelection top_k_row(std::span<const double> row, std::size_t k, bool renormalize) {
    const std::size_t n = row.size();
    if (k < 1 || k > n)
        throw ConfigError("top-k: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    order.resize(k);
    TopKSelection sel;
    sel.indices = order;
    sel.weights.reserve(k);
    double total = 0.0;
    for (auto i : order) {
        sel.weights.push_back(row[i]);
        total += row[i];
    }
    if (renormalize && total > 0.0)
        for (double& w : sel.weights) w /= total;
    return sel;
}

std::vector<TopKSelection> top_k_select(const RouterScores& scores, std::size_t k, bool renormalize) {
    std::vector<TopKSelection> out;
    out.reserve(scores.tokens());
    for (std::size_t t = 0; t < scores.tokens(); ++t) out.push_back(top_k_row(scores.row(t), k, renormalize));
    return out;
}

double nearest_rank(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw InsufficientDataError("quantile of an empty sample");
    const double n = static_cast<double>(sorted.size());
    // the epsilon absorbs representation error in p*n (0.95*100 etc.)
    auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

EntropyCalibration calibrate_h_star(std::vector<double> sample_entropies, double quantile, int layer_id) {
    if (sample_entropies.size() < kMinCalibrationSamples)
        throw InsufficientDataError("calibration needs at least " + std::to_string(kMinCalibrationSamples) +
                                    " entropy samples, got " + std::to_string(sample_entropies.size()));
    if (!(quantile >= 0.0 && quantile < 1.0))
        throw ConfigError("calibration quantile must lie in [0,1), got " + io::format_double(quantile));
    require_finite(sample_entropies, "calibration sample");
    std::sort(sample_entropies.begin(), sample_entropies.end());
    EntropyCalibration cal;
    cal.layer_id = layer_id;
    cal.quantile = quantile;
    cal.h_star = nearest_rank(sample_entropies, 1.0 - quantile);
    cal.sample_entropies = std::move(sample_entropies);
    return cal;
}

std::vector<bool> allocate_slots(std::span<const double> entropies, double h_star, SlotBudget budget) {
    std::vector<std::size_t> qualifiers;
    for (std::size_t t = 0; t < entropies.size(); ++t)
        if (entropies[t] >= h_star) qualifiers.push_back(t);
    if (qualifiers.size() > budget.max_num_slots) {
        std::stable_sort(qualifiers.begin(), qualifiers.end(),
                         [&](std::size_t a, std::size_t b) { return entropies[a] > entropies[b]; });
        qualifiers.resize(budget.max_num_slots);
    }
    std::vector<bool> mask(entropies.size(), false);
    for (auto t : qualifiers) mask[t] = true;
    return mask;
}

std::size_t perturb_uncertain(std::vector<RouterDecision>& decisions, std::size_t n_experts, double h_star,
                              PerturbMode mode, Rng& rng) {
    std::vector<bool> uncertain(decisions.size());
    for (std::size_t i = 0; i < decisions.size(); ++i) uncertain[i] = decisions[i].entropy >= h_star;
    return perturb_tokens(decisions, n_experts, uncertain, mode, rng);
}

std::size_t perturb_tokens(std::vector<RouterDecision>& decisions, std::size_t n_experts,
                           const std::vector<bool>& uncertain, PerturbMode mode, Rng& rng) {
    if (uncertain.size() != decisions.size())
        throw ContractError("perturbation mask has " + std::to_string(uncertain.size()) + " entries for " +
                            std::to_string(decisions.size()) + " tokens");
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < decisions.size(); ++i)
        if (uncertain[i]) targets.push_back(i);
    if (mode == PerturbMode::control) {
        targets = rng.distinct(targets.size(), decisions.size());
        std::sort(targets.begin(), targets.end());
    }

    for (auto i : targets) {
        auto& d = decisions[i];
        const std::size_t k = d.selected_experts.size();
        if (k == 0 || k > n_experts) throw ContractError("perturbation needs 1..N selected experts per token");
        d.selected_experts = rng.distinct(k, n_experts);
        d.combine_weights.assign(k, 1.0 / static_cast<double>(k));
        d.mode = DispatchMode::top_k;
        d.perturbed = true;
    }
    return targets.size();
}

void write_calibration_csv(const std::filesystem::path& path, std::span<const EntropyCalibration> calibrations,
                           std::size_t n_experts) {
    io::CsvWriter csv(path, {"layer_id", "n_samples", "quantile", "h_star", "mean_H", "mean_Hnorm", "p5", "p95"});
    const double ln_n = std::log(static_cast<double>(n_experts));
    for (const auto& c : calibrations) {
        const auto& s = c.sample_entropies;
        const double mean_h = s.empty() ? 0.0 : std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
        csv.row({std::to_string(c.layer_id), std::to_string(s.size()), io::format_double(c.quantile),
                 io::format_double(c.h_star), io::format_double(mean_h), io::format_double(mean_h / ln_n),
                 io::format_double(nearest_rank(s, 0.05)), io::format_double(nearest_rank(s, 0.95))});
    }
}

}  // namespace gwmoe
