#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gwmoe/rng.hpp"
#include "gwmoe/tensor.hpp"

namespace gwmoe {

/// Router probabilities for a token group: [tokens, experts], rows sum to 1.
struct RouterScores {
    Tensor scores;
    int layer_id = 0;

    std::size_t tokens() const { return scores.dim(0); }
    std::size_t experts() const { return scores.dim(1); }
    std::span<const double> row(std::size_t t) const {
        return scores.data().subspan(t * experts(), experts());
    }
};

enum class DispatchMode { top_k, broadcast };

struct RouterDecision {
    std::size_t token_index = 0;
    double entropy = 0.0;             // nats
    double normalized_entropy = 0.0;  // entropy / ln N
    std::vector<std::size_t> selected_experts;
    std::vector<double> combine_weights;
    DispatchMode mode = DispatchMode::top_k;
    bool perturbed = false;  // experts replaced at random, weights fixed at 1/K
};

struct EntropyCalibration {
    int layer_id = 0;
    std::vector<double> sample_entropies;  // ascending
    double h_star = 0.0;
    double quantile = 0.05;
};

struct SlotBudget {
    std::size_t max_num_slots = 0;
};

struct TopKSelection {
    std::vector<std::size_t> indices;  // descending score, ties to the lower index
    std::vector<double> weights;
};

/// softmax(hidden[tokens,d] . router_weights[d,N]) row-wise, recorded on the tape.
RouterScores route_scores(const Tensor& router_weights, const Tensor& hidden, int layer_id = 0);

/// Throws DataError unless every row is a probability vector (sum within 1e-9).
void validate_scores(const RouterScores& scores);

/// -sum g ln g with 0 ln 0 = 0, clamped into [0, ln N].
double row_entropy(std::span<const double> row);

/// Per-token entropy in nats, detached from the tape.
Tensor entropy(const RouterScores& scores);

/// Per-token entropy / ln N. Requires N >= 2.
Tensor normalized_entropy(const RouterScores& scores);

TopKSelection top_k_row(std::span<const double> row, std::size_t k, bool renormalize);
std::vector<TopKSelection> top_k_select(const RouterScores& scores, std::size_t k, bool renormalize = false);

/// Nearest-rank (1 - quantile) order statistic of the sample.
/// Requires at least kMinCalibrationSamples values.
EntropyCalibration calibrate_h_star(std::vector<double> sample_entropies, double quantile = 0.05, int layer_id = 0);
inline constexpr std::size_t kMinCalibrationSamples = 20;

/// Broadcast mask: entropy >= h_star, capped at the budget by keeping the
/// highest-entropy qualifiers (ties to the lower token index).
std::vector<bool> allocate_slots(std::span<const double> entropies, double h_star, SlotBudget budget);

enum class PerturbMode { uncertain, control };

/// Replaces the experts of uncertain tokens (or, in control mode, of an equally
/// sized uniform random token subset) with K distinct random experts at weight
/// 1/K. Returns the number of tokens perturbed.
std::size_t perturb_uncertain(std::vector<RouterDecision>& decisions, std::size_t n_experts, double h_star,
                              PerturbMode mode, Rng& rng);
/// Same with the uncertain set given explicitly (one flag per decision).
std::size_t perturb_tokens(std::vector<RouterDecision>& decisions, std::size_t n_experts,
                           const std::vector<bool>& uncertain, PerturbMode mode, Rng& rng);

/// Nearest-rank p-quantile (p in [0,1]) of an ascending sample.
double nearest_rank(std::span<const double> sorted, double p);

/// Writes `layer_id,n_samples,quantile,h_star,mean_H,mean_Hnorm,p5,p95`.
void write_calibration_csv(const std::filesystem::path& path, std::span<const EntropyCalibration> calibrations,
                           std::size_t n_experts);

}  // namespace gwmoe
