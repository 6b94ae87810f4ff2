#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gwmoe/data.hpp"
#include "gwmoe/model.hpp"
#include "gwmoe/optim.hpp"

namespace gwmoe {

enum class Method { standard, gw };

const char* to_string(Method method);
Method method_from_string(const std::string& s);

/// Where GW training gets its per-layer h_star.
struct HStarSource {
    enum class Kind { calibrate, fixed } kind = Kind::calibrate;
    double value = 0.0;      // Kind::fixed
    double quantile = 0.05;  // Kind::calibrate
    bool pooled = false;     // one threshold from all layers' entropies

    static HStarSource calibrated(double quantile = 0.05, bool pooled = false) {
        return {Kind::calibrate, 0.0, quantile, pooled};
    }
    static HStarSource fixed_value(double h) { return {Kind::fixed, h, 0.05, false}; }
};

/// Which parameters the optimizer may touch.
enum class TrainScope { all, experts };

struct TrainConfig {
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    std::size_t epochs = 3;
    double warmup_fraction = 0.10;
    std::uint64_t seed = 1;
    bool freeze_router = true;
    Method method = Method::standard;
    std::optional<HStarSource> h_star_source;
    /// Unset: ceil(0.05 * average tokens per batch).
    std::optional<std::size_t> max_num_slots;
    TrainScope scope = TrainScope::all;

    std::filesystem::path checkpoint_path;  // empty: no file written
    std::filesystem::path step_csv_path;    // per-step metrics CSV
    std::filesystem::path trace_csv_path;   // broadcast decisions CSV
    std::filesystem::path nan_dump_path;    // offending batch on NaN loss

    void validate() const;
};

struct StepRecord {
    std::size_t step = 0;  // 1-based
    std::size_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t tokens = 0;
    std::vector<std::size_t> broadcast;  // per layer
    std::size_t expert_calls = 0;        // all layers
};

struct TrainMetrics {
    std::vector<StepRecord> steps;
    std::vector<double> epoch_loss;  // mean step loss per epoch
    double seconds = 0.0;
    double samples_per_sec = 0.0;
    std::size_t samples = 0;
    std::size_t max_num_slots = 0;  // effective budget (0 for standard)
    std::vector<double> h_star;     // per layer, GW only
    std::vector<std::size_t> broadcast_totals;  // per layer
    std::size_t expert_call_total = 0;
    /// Token id of every broadcast decision, per layer, in training order.
    std::vector<std::vector<int>> broadcast_tokens;
    std::optional<double> final_eval;
};

struct TrainResult {
    Checkpoint checkpoint;  // trained model, optimizer moments, metadata
    TrainMetrics metrics;
};

/// Eval-mode forwards over `data`; per-layer (or pooled) nearest-rank
/// thresholds, written into the model. Throws InsufficientDataError when a
/// layer sees fewer than kMinCalibrationSamples tokens.
std::vector<EntropyCalibration> calibrate_from_base(Model& model, const Dataset& data, double quantile = 0.05,
                                                    std::size_t batch_size = 64, bool pooled = false);

/// Per-layer routing entropies of every token in `data` under eval mode.
std::vector<std::vector<double>> collect_entropies(const Model& model, const Dataset& data,
                                                   std::size_t batch_size = 64);

/// Fine-tunes a copy of `base`. GW calibration (when requested) uses
/// `calibration_data`, or the training set when null.
TrainResult train(const Model& base, const Dataset& data, const TrainConfig& config,
                  const Dataset* calibration_data = nullptr);

struct EvalOptions {
    std::size_t batch_size = 64;
    std::optional<PerturbMode> perturb;
    std::optional<double> perturb_h_star;  // default: each layer's h_star
    std::uint64_t perturb_seed = 0;
    std::vector<bool> perturb_layers;  // empty = all layers
    bool keep_traces = false;
};

struct EvalResult {
    Metric metric = Metric::accuracy;
    double value = 0.0;  // accuracy / exact match in [0,1], or perplexity
    double mean_loss = 0.0;
    std::size_t predictions = 0;
    std::size_t correct = 0;
    std::size_t tokens = 0;
    std::vector<std::size_t> expert_calls;  // per layer
    std::size_t broadcast_count = 0;
    std::vector<std::size_t> perturbed;  // per (batch, layer), batch-major
    std::vector<DispatchTrace> traces;   // only with keep_traces
};

/// Deterministic eval-mode metric. Throws ConfigError when the dataset does
/// not fit the model (head, sequence length, vocabulary or classes).
EvalResult evaluate(const Model& model, const Dataset& data, const EvalOptions& options = {});

/// ceil(0.05 * average tokens per batch)
std::size_t default_max_num_slots(double average_tokens_per_batch);

}  // namespace gwmoe
