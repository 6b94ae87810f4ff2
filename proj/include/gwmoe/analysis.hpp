#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gwmoe/data.hpp"
#include "gwmoe/model.hpp"
#include "gwmoe/training.hpp"

namespace gwmoe {

/// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
struct SeedStats {
    std::size_t n = 0;
    double mean = 0.0;
    double std = 0.0;
};
SeedStats seed_stats(std::span<const double> values);

struct ConditionResult {
    std::string name;
    std::vector<std::uint64_t> seeds;
    std::vector<double> values;  // aligned with seeds
    SeedStats stats;
};

/// Free-form CSV table shipped with a report (per-run rows, plot data...).
struct Table {
    std::string name;  // file stem
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

struct ExperimentReport {
    std::string id;
    std::map<std::string, std::string> config;
    std::vector<ConditionResult> conditions;
    std::vector<Table> tables;
    std::vector<std::string> notes;

    void add(const std::string& name, std::vector<std::uint64_t> seeds, std::vector<double> values);
    /// Throws ContractError for an unknown condition.
    const ConditionResult& condition(const std::string& name) const;
    const Table& table(const std::string& name) const;
};

/// config.txt, runs.csv (condition,seed,value), summary.csv
/// (condition,n,mean,std), summary.txt and one CSV per table.
void write_report(const std::filesystem::path& dir, const ExperimentReport& report);

/// Runs fn(0..n-1) on up to `threads` workers. Rethrows the lowest-index exception.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------- entropy

struct LayerEntropyStats {
    int layer_id = 0;
    std::size_t tokens = 0;
    double bottom_mean = 0.0;  // mean H_norm of the lowest `tail` fraction
    double mean = 0.0;
    double top_mean = 0.0;  // mean H_norm of the highest `tail` fraction
    double bottom_quantile = 0.0;  // nearest-rank boundary values
    double top_quantile = 0.0;
};

/// Normalized-entropy tail means per layer. Tails hold ceil(tail * n) tokens.
/// Throws InsufficientDataError on an empty dump.
std::vector<LayerEntropyStats> entropy_report(const ScoreDump& dump, double tail = 0.05);
std::vector<LayerEntropyStats> entropy_report(const Model& model, const Dataset& data, double tail = 0.05);
Table entropy_table(std::span<const LayerEntropyStats> stats);

// ----------------------------------------------------------- perturbation

struct PerturbationConfig {
    std::optional<double> h_star;  // default: each layer's own h_star
    std::size_t n_repeats = 5;
    std::uint64_t seed = 0;
    std::vector<bool> layers;  // empty = every layer
    std::size_t batch_size = 64;
    std::size_t threads = 1;
};

/// Conditions: baseline (plain Top-K), uncertain_random, control_random, and
/// the per-seed deltas delta_uncertain / delta_control against the baseline.
/// Both perturbed conditions share the repetition seeds.
struct PerturbationOutcome {
    ExperimentReport report;
    std::vector<std::size_t> uncertain_counts;  // tokens perturbed per repeat
    std::vector<std::size_t> control_counts;
};
PerturbationOutcome perturbation_experiment(const Model& model, const Dataset& data, const PerturbationConfig& config);

// --------------------------------------------------------- uncertain ratio

struct UncertainRatio {
    double before = 0.0;  // fraction of (token, layer) pairs with H >= h_star
    double after = 0.0;
    double ratio = 1.0;  // after / before; 1 when both are 0
    std::vector<double> before_per_layer, after_per_layer;
};

/// h_star defaults to each layer's h_star in `before`. Throws ContractError if
/// the two models do not share a configuration.
UncertainRatio uncertain_ratio_tracking(const Model& before, const Model& after, const Dataset& data,
                                        std::optional<double> h_star = std::nullopt, std::size_t batch_size = 64);

// --------------------------------------------------------------- ablations

struct RunSettings {
    TrainConfig train;  // seed is replaced per run
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t threads = 1;
    std::size_t eval_batch_size = 64;
};

/// Fine-tunes once per (train K, seed) and evaluates each result at every eval
/// K. Conditions are named "train_k=A/eval_k=B"; table "topk_grid" has one row
/// per eval K and one column per train K holding the seed mean.
ExperimentReport topk_grid_ablation(const Model& base, const Dataset& train_data, const Dataset& eval_data,
                                    std::span<const std::size_t> train_ks, std::span<const std::size_t> eval_ks,
                                    const RunSettings& settings);

/// Evaluates each GW checkpoint with broadcast_at_inference off ("top_k") and
/// on ("broadcast"). `seeds` labels the checkpoints.
ExperimentReport inference_broadcast_ablation(std::span<const Model> checkpoints,
                                              std::span<const std::uint64_t> seeds, const Dataset& eval_data,
                                              std::size_t batch_size = 64);

/// One GW run per (h_star, seed) with a fixed slot budget plus one standard
/// run per seed. Table "fig5_hstar_sweep": h_star,seed,metric,baseline_metric.
ExperimentReport h_star_sweep(const Model& base, const Dataset& train_data, const Dataset& eval_data,
                              std::span<const double> h_values, std::size_t max_num_slots,
                              const RunSettings& settings);

/// Standard vs GW fine-tuning, final metric per seed ("standard", "gw").
ExperimentReport method_comparison(const Model& base, const Dataset& train_data, const Dataset& eval_data,
                                   const RunSettings& settings, const HStarSource& h_star,
                                   std::optional<std::size_t> max_num_slots = std::nullopt,
                                   std::vector<Model>* trained_standard = nullptr,
                                   std::vector<Model>* trained_gw = nullptr);

// ---------------------------------------------------------- token report

struct BroadcastTokenRow {
    int token = 0;
    std::string label;
    std::size_t count = 0;
};

struct BroadcastTokenTable {
    std::string part;  // "decoder" for causal models, "encoder" for classifiers
    std::vector<BroadcastTokenRow> rows;
};

/// Printable form of a token id (characters for byte vocabularies).
std::string token_label(int token, TaskId task);

/// Ranks broadcast tokens pooled over layers. `per_layer` holds the token id of
/// every broadcast decision (TrainMetrics::broadcast_tokens). Throws
/// ContractError when no layer traces are given.
BroadcastTokenTable broadcast_token_report(const std::vector<std::vector<int>>& per_layer, HeadType head,
                                           TaskId task, std::size_t top_n = 50);

/// Token ids of broadcast rows in a trace CSV, grouped by layer id. A trace
/// without broadcast rows gives one empty layer.
std::vector<std::vector<int>> read_broadcast_tokens(const std::filesystem::path& trace_csv);

/// fig3_broadcast_tokens (decoder) or fig4_broadcast_tokens (encoder).
Table token_table(const BroadcastTokenTable& table);

}  // namespace gwmoe
