#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gwmoe/autograd.hpp"
#include "gwmoe/routing.hpp"
#include "gwmoe/tensor.hpp"

namespace gwmoe {

struct MoELayerConfig {
    std::size_t n_experts = 8;
    std::size_t top_k = 1;       // experts per token while training
    std::size_t top_k_eval = 0;  // 0 means "same as top_k"
    std::size_t d_model = 64;
    std::size_t d_ff = 128;
    std::optional<double> h_star;  // nats; unset until calibrated
    std::size_t max_num_slots = 0;
    bool renormalize_topk = false;
    bool broadcast_at_inference = false;
    bool freeze_router = true;

    std::size_t eval_k() const { return top_k_eval ? top_k_eval : top_k; }
    /// Throws ConfigError on K outside [1,N], h_star outside [0, ln N], etc.
    void validate() const;
};

/// Two-layer GELU feed-forward expert: gelu(x W_in + b_in) W_out + b_out.
struct ExpertFFN {
    Tensor w_in;   // [d_model, d_ff]
    Tensor b_in;   // [d_ff]
    Tensor w_out;  // [d_ff, d_model]
    Tensor b_out;  // [d_model]

    Tensor forward(const Tensor& x) const;
    std::vector<Tensor> parameters() const { return {w_in, b_in, w_out, b_out}; }
};

struct DispatchTrace {
    int layer_id = 0;
    std::size_t batch_id = 0;
    std::vector<RouterDecision> decisions;  // one per token, in token order
    std::vector<int> token_ids;             // filled by the model when known
    Tensor scores;                          // detached router probabilities [tokens, N]
    std::vector<std::size_t> expert_calls;  // tokens processed per expert
    std::size_t broadcast_count = 0;
    std::size_t perturbed_count = 0;

    std::size_t total_calls() const;
};

/// Random expert reassignment applied at evaluation time.
struct Perturbation {
    PerturbMode mode = PerturbMode::uncertain;
    double h_star = 0.0;
    std::uint64_t seed = 0;
    std::vector<bool> uncertain;  // empty: entropy >= h_star in this pass
};

struct DispatchOptions {
    std::size_t top_k = 1;
    bool broadcast = false;  // entropy gate + slot budget active
    std::size_t batch_id = 0;
    std::optional<Perturbation> perturbation;
};

struct LayerOutput {
    Tensor output;
    DispatchTrace trace;
};

/// Mixture-of-experts FFN block with entropy-gated broadcast dispatch.
///
/// Certain tokens go to their Top-K experts. While training, tokens whose
/// routing entropy reaches h_star (at most max_num_slots per call) are sent to
/// every expert and mixed with the full score row. Evaluation is plain Top-K
/// unless broadcast_at_inference is set.
class MoELayer {
public:
    /// Zero-initialized parameters.
    MoELayer(MoELayerConfig config, int layer_id);
    /// Normal(0, init_scale^2) weights, zero biases, drawn from rng in a fixed order.
    MoELayer(MoELayerConfig config, int layer_id, Rng& rng, double init_scale = 0.02);

    const MoELayerConfig& config() const { return config_; }
    MoELayerConfig& config() { return config_; }
    int layer_id() const { return layer_id_; }

    Tensor& router() { return router_; }
    const Tensor& router() const { return router_; }
    std::vector<ExpertFFN>& experts() { return experts_; }
    const std::vector<ExpertFFN>& experts() const { return experts_; }

    /// Entropy-gated dispatch with the training K. Requires a calibrated h_star.
    LayerOutput forward_train(const Tensor& hidden, std::size_t batch_id = 0) const;
    /// Plain Top-K dispatch with the training K (standard fine-tuning).
    LayerOutput forward_standard(const Tensor& hidden, std::size_t batch_id = 0) const;
    /// Top-K with top_k_eval; broadcasts only if broadcast_at_inference.
    LayerOutput forward_eval(const Tensor& hidden, std::size_t batch_id = 0,
                             std::optional<Perturbation> perturbation = std::nullopt) const;
    LayerOutput forward(const Tensor& hidden, const DispatchOptions& options) const;

    /// Oracle path: evaluates every expert on every token and masks with the
    /// weights implied by `trace`'s decisions. Same outputs and gradients as
    /// the sparse path, computed without gather/scatter.
    Tensor forward_dense_reference(const Tensor& hidden, const DispatchTrace& trace) const;

    /// router first, then each expert's (w_in, b_in, w_out, b_out).
    std::vector<Tensor> parameters() const;
    std::vector<std::string> parameter_names(const std::string& prefix) const;

private:
    MoELayerConfig config_;
    int layer_id_ = 0;
    Tensor router_;  // [d_model, N]
    std::vector<ExpertFFN> experts_;
};

struct ExpertGradientRow {
    std::size_t expert = 0;
    double grad_norm = 0.0;
    std::size_t tokens_routed = 0;
};

/// Per-expert L2 norm of accumulated parameter gradients. Throws
/// ContractError unless `tape` has completed a backward pass.
std::vector<ExpertGradientRow> gradient_flow_report(const Tape& tape, const MoELayer& layer,
                                                    const DispatchTrace& trace);

/// CSV: batch_id,layer_id,token_index,entropy,mode,experts,weights,token_id
/// (experts and weights are ';'-joined lists; token_id is -1 when unknown).
void write_trace_csv_header(std::ostream& out);
void write_trace_csv_rows(std::ostream& out, const DispatchTrace& trace, bool broadcast_only = false);

const char* to_string(DispatchMode mode);

}  // namespace gwmoe
