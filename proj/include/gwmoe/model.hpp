#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gwmoe/moe_layer.hpp"
#include "gwmoe/routing.hpp"
#include "gwmoe/tensor.hpp"

namespace gwmoe {

/// next_token: causal decoder, one prediction per position over the vocabulary.
/// classification: bidirectional encoder, mean-pooled, one label per sequence.
enum class HeadType { next_token, classification };

const char* to_string(HeadType head);
HeadType head_from_string(const std::string& s);

struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t seq_len = 32;
    std::size_t n_classes = 2;  // classification head only
    HeadType head = HeadType::next_token;
    double init_scale = 0.02;
    std::vector<MoELayerConfig> layers;

    /// n_layers copies of `layer` with d_model filled in.
    static ModelConfig uniform(std::size_t vocab, std::size_t d_model, std::size_t n_layers, std::size_t n_heads,
                               std::size_t seq_len, const MoELayerConfig& layer, HeadType head = HeadType::next_token);
    /// vocab 256, d_model 64, 2 layers, 4 heads, N=8, K=2, d_ff 128, seq_len 32.
    static ModelConfig desk_default();

    bool causal() const { return head == HeadType::next_token; }
    std::size_t output_size() const { return head == HeadType::next_token ? vocab_size : n_classes; }
    void validate() const;
};

enum class Mode { train, eval };

struct ForwardOptions {
    Mode mode = Mode::eval;
    /// Train mode only: entropy-gated broadcast (needs h_star) vs plain Top-K.
    bool gw = true;
    std::size_t batch_id = 0;
    /// Eval-time random expert reassignment; h_star defaults to each layer's.
    /// Uncertain tokens are taken from the unperturbed pass; both modes
    /// perturb the same number of tokens in every layer.
    std::optional<PerturbMode> perturb;
    std::optional<double> perturb_h_star;
    std::uint64_t perturb_seed = 0;
    std::vector<bool> perturb_layers;  // empty = every layer
};

struct ModelOutput {
    Tensor logits;  // [batch*seq_len, vocab] or [batch, n_classes]
    std::vector<DispatchTrace> traces;  // one per layer
};

struct TransformerBlock {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;  // [d_model, d_model]
    Tensor ln2_gain, ln2_bias;
    MoELayer moe;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Pre-norm transformer whose FFN blocks are mixture-of-experts layers.
class Model {
public:
    /// Deterministic init from seed: normal(0, init_scale^2) weights, unit LN gains, zero biases.
    static Model build(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    /// tokens holds batch*seq_len ids, sequence-major.
    ModelOutput forward(std::span<const int> tokens, const ForwardOptions& options = {}) const;

    std::vector<NamedTensor> named_parameters() const;
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;
    static std::size_t expected_parameter_count(const ModelConfig& config);
    /// Expert evaluations per token across all layers in plain eval mode.
    static std::size_t expected_eval_calls_per_token(const ModelConfig& config);

    std::size_t n_layers() const { return blocks_.size(); }
    const MoELayer& moe(std::size_t layer) const { return blocks_.at(layer).moe; }
    /// Router weight tensors, one per layer.
    std::vector<Tensor> router_parameters() const;

    /// Stores per-layer calibrations and copies each h_star into its layer config.
    void set_calibrations(std::vector<EntropyCalibration> calibrations);
    const std::vector<EntropyCalibration>& calibrations() const { return calibrations_; }
    /// Overrides h_star for every layer (global single-constant mode).
    void set_h_star(double h_star);
    void set_max_num_slots(std::size_t slots);
    /// Training K for every layer.
    void set_top_k(std::size_t k);
    void set_top_k_eval(std::size_t k);
    void set_broadcast_at_inference(bool on);
    void set_freeze_router(bool on);
    void set_layer_h_star(std::size_t layer, std::optional<double> h_star);

    /// Deep copy: parameters are not shared with the source.
    Model clone() const;

private:
    Model() = default;
    void update_layers(const std::function<void(MoELayerConfig&)>& fn);

    ModelConfig config_;
    Tensor tok_emb_;  // [vocab, d]
    Tensor pos_emb_;  // [seq_len, d]
    std::vector<TransformerBlock> blocks_;
    Tensor lnf_gain_, lnf_bias_;
    Tensor head_w_;  // [d, out]
    Tensor head_b_;  // [out]
    std::vector<EntropyCalibration> calibrations_;
};

struct Checkpoint {
    Model model;
    std::vector<NamedTensor> extra_tensors;  // e.g. optimizer moments
    std::map<std::string, std::string> metadata;  // step, seed, dataset id, method...
};

/// Checkpoint container, little-endian:
///   "GWC1" | u64 manifest_bytes | manifest JSON | GWT1 tensors in manifest order
/// The manifest lists tensor names, the model config, calibrations and metadata.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::vector<NamedTensor>& extra_tensors = {},
                     const std::map<std::string, std::string>& metadata = {});
/// Throws FormatError on bad magic, truncation, or tensors inconsistent with the config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gwmoe
