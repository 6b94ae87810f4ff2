#include "gwmoe/moe_layer.hpp"

#include <cmath>
#include <numeric>

#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"
#include "gwmoe/ops.hpp"

namespace gwmoe {

namespace {

enum class WeightKind { raw, renormalized, constant };

struct WeightEntry {
    std::size_t token;
    std::size_t expert;
    WeightKind kind;
    double constant = 0.0;
    std::vector<std::size_t> norm_set;  // experts summed for renormalization
};

// Combine weights for one expert's token group, differentiable w.r.t. scores.
Tensor combine_weights(const Tensor& scores, std::vector<WeightEntry> entries) {
    const std::size_t n = scores.dim(1);
    const auto g = scores.data();
    Tensor out({entries.size()});
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        switch (e.kind) {
        case WeightKind::raw:
            out[i] = g[e.token * n + e.expert];
            break;
        case WeightKind::renormalized: {
            double total = 0.0;
            for (auto s : e.norm_set) total += g[e.token * n + s];
            out[i] = g[e.token * n + e.expert] / total;
            break;
        }
        case WeightKind::constant:
            out[i] = e.constant;
            break;
        }
    }
    record_op("combine_weights", {scores}, out, [scores, out, entries = std::move(entries), n]() mutable {
        const auto dw = out.grad();
        const auto g = scores.data();
        auto dg = scores.grad_mut();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            const std::size_t at = e.token * n + e.expert;
            if (e.kind == WeightKind::raw) {
                dg[at] += dw[i];
            } else if (e.kind == WeightKind::renormalized) {
                double total = 0.0;
                for (auto s : e.norm_set) total += g[e.token * n + s];
                dg[at] += dw[i] / total;
                const double coef = dw[i] * g[at] / (total * total);
                for (auto s : e.norm_set) dg[e.token * n + s] -= coef;
            }
        }
    });
    return out;
}

WeightEntry entry_for(const RouterDecision& d, std::size_t slot, bool renormalize) {
    WeightEntry e{d.token_index, d.selected_experts[slot], WeightKind::raw, 0.0, {}};
    if (d.perturbed) {
        e.kind = WeightKind::constant;
        e.constant = d.combine_weights[slot];
    } else if (d.mode == DispatchMode::top_k && renormalize) {
        e.kind = WeightKind::renormalized;
        e.norm_set = d.selected_experts;
    }
    return e;
}

Tensor init_normal(Shape shape, Rng& rng, double scale) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

}  // namespace

const char* to_string(DispatchMode mode) { return mode == DispatchMode::broadcast ? "broadcast" : "top_k"; }

void MoELayerConfig::validate() const {
    if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
    if (top_k < 1 || top_k > n_experts)
        throw ConfigError("top_k=" + std::to_string(top_k) + " outside [1, " + std::to_string(n_experts) + "]");
    if (eval_k() < 1 || eval_k() > n_experts)
        throw ConfigError("top_k_eval=" + std::to_string(eval_k()) + " outside [1, " + std::to_string(n_experts) + "]");
    if (d_model == 0 || d_ff == 0) throw ConfigError("d_model and d_ff must be positive");
    // h_star above ln N is accepted: no token can reach it, so nothing broadcasts
    if (h_star && !(*h_star >= 0.0)) throw ConfigError("h_star must be a non-negative number");
}

Tensor ExpertFFN::forward(const Tensor& x) const {
    Tensor h = ops::gelu(ops::add_row(ops::matmul(x, w_in), b_in));
    return ops::add_row(ops::matmul(h, w_out), b_out);
}

std::size_t DispatchTrace::total_calls() const {
    return std::accumulate(expert_calls.begin(), expert_calls.end(), std::size_t{0});
}

MoELayer::MoELayer(MoELayerConfig config, int layer_id) : config_(std::move(config)), layer_id_(layer_id) {
    config_.validate();
    const auto d = config_.d_model, f = config_.d_ff;
    router_ = Tensor({d, config_.n_experts});
    for (std::size_t e = 0; e < config_.n_experts; ++e)
        experts_.push_back(ExpertFFN{Tensor({d, f}), Tensor({f}), Tensor({f, d}), Tensor({d})});
}

MoELayer::MoELayer(MoELayerConfig config, int layer_id, Rng& rng, double init_scale)
    : config_(std::move(config)), layer_id_(layer_id) {
    config_.validate();
    const auto d = config_.d_model, f = config_.d_ff;
    router_ = init_normal({d, config_.n_experts}, rng, init_scale);
    for (std::size_t e = 0; e < config_.n_experts; ++e) {
        ExpertFFN ex;
        ex.w_in = init_normal({d, f}, rng, init_scale);
        ex.b_in = Tensor({f});
        ex.w_out = init_normal({f, d}, rng, init_scale);
        ex.b_out = Tensor({d});
        experts_.push_back(std::move(ex));
    }
}

std::vector<Tensor> MoELayer::parameters() const {
    std::vector<Tensor> ps{router_};
    for (const auto& e : experts_)
        for (auto& p : e.parameters()) ps.push_back(p);
    return ps;
}

std::vector<std::string> MoELayer::parameter_names(const std::string& prefix) const {
    std::vector<std::string> names{prefix + "router"};
    for (std::size_t e = 0; e < experts_.size(); ++e)
        for (const char* p : {"w_in", "b_in", "w_out", "b_out"})
            names.push_back(prefix + "experts." + std::to_string(e) + "." + p);
    return names;
}

LayerOutput MoELayer::forward_train(const Tensor& hidden, std::size_t batch_id) const {
    if (!config_.h_star) throw ConfigError("layer " + std::to_string(layer_id_) + ": h_star not calibrated");
    return forward(hidden, DispatchOptions{config_.top_k, true, batch_id, std::nullopt});
}

LayerOutput MoELayer::forward_standard(const Tensor& hidden, std::size_t batch_id) const {
    return forward(hidden, DispatchOptions{config_.top_k, false, batch_id, std::nullopt});
}

LayerOutput MoELayer::forward_eval(const Tensor& hidden, std::size_t batch_id,
                                   std::optional<Perturbation> perturbation) const {
    if (config_.broadcast_at_inference && !config_.h_star)
        throw ConfigError("layer " + std::to_string(layer_id_) + ": broadcast at inference needs h_star");
    return forward(hidden, DispatchOptions{config_.eval_k(), config_.broadcast_at_inference, batch_id, perturbation});
}

LayerOutput MoELayer::forward(const Tensor& hidden, const DispatchOptions& options) const {
    const std::size_t n = config_.n_experts;
    if (hidden.rank() != 2 || hidden.dim(1) != config_.d_model)
        throw DimensionError("moe layer " + std::to_string(layer_id_) + ": hidden " + shape_str(hidden.shape()) +
                             " but d_model is " + std::to_string(config_.d_model));
    const std::size_t tokens = hidden.dim(0);
    if (tokens == 0) throw DimensionError("moe layer: empty token batch");
    if (options.top_k < 1 || options.top_k > n)
        throw ConfigError("top_k=" + std::to_string(options.top_k) + " outside [1, " + std::to_string(n) + "]");
    if (options.broadcast && !config_.h_star)
        throw ConfigError("layer " + std::to_string(layer_id_) + ": h_star not calibrated");
    require_finite(hidden.data(), "moe layer input");

    RouterScores scores = route_scores(router_, hidden, layer_id_);

    DispatchTrace trace;
    trace.layer_id = layer_id_;
    trace.batch_id = options.batch_id;
    trace.scores = scores.scores.detach();
    trace.expert_calls.assign(n, 0);
    trace.decisions.resize(tokens);

    const double ln_n = std::log(static_cast<double>(n));
    std::vector<double> entropies(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        auto& d = trace.decisions[t];
        const auto row = scores.row(t);
        d.token_index = t;
        d.entropy = row_entropy(row);
        d.normalized_entropy = n > 1 ? std::min(d.entropy / ln_n, 1.0) : 0.0;
        entropies[t] = d.entropy;
        auto sel = top_k_row(row, options.top_k, config_.renormalize_topk);
        d.selected_experts = std::move(sel.indices);
        d.combine_weights = std::move(sel.weights);
        d.mode = DispatchMode::top_k;
    }

    if (options.broadcast) {
        const auto mask = allocate_slots(entropies, *config_.h_star, SlotBudget{config_.max_num_slots});
        for (std::size_t t = 0; t < tokens; ++t) {
            if (!mask[t]) continue;
            auto& d = trace.decisions[t];
            const auto row = scores.row(t);
            d.selected_experts.resize(n);
            std::iota(d.selected_experts.begin(), d.selected_experts.end(), std::size_t{0});
            d.combine_weights.assign(row.begin(), row.end());
            d.mode = DispatchMode::broadcast;
            ++trace.broadcast_count;
        }
    }

    if (options.perturbation) {
        Rng rng(options.perturbation->seed);
        const auto& p = *options.perturbation;
        trace.perturbed_count = p.uncertain.empty()
                                    ? perturb_uncertain(trace.decisions, n, p.h_star, p.mode, rng)
                                    : perturb_tokens(trace.decisions, n, p.uncertain, p.mode, rng);
    }

    // group tokens per expert, token order within a group
    std::vector<std::vector<std::size_t>> groups(n);
    std::vector<std::vector<WeightEntry>> entries(n);
    for (const auto& d : trace.decisions)
        for (std::size_t s = 0; s < d.selected_experts.size(); ++s) {
            const auto e = d.selected_experts[s];
            groups[e].push_back(d.token_index);
            entries[e].push_back(entry_for(d, s, config_.renormalize_topk));
        }

    std::vector<Tensor> parts;
    std::vector<std::vector<std::size_t>> index;
    for (std::size_t e = 0; e < n; ++e) {
        trace.expert_calls[e] = groups[e].size();
        if (groups[e].empty()) continue;
        Tensor xs = ops::gather_rows(hidden, groups[e]);
        Tensor ys = experts_[e].forward(xs);
        Tensor ws = combine_weights(scores.scores, std::move(entries[e]));
        parts.push_back(ops::scale_rows(ys, ws));
        index.push_back(std::move(groups[e]));
    }
    Tensor out = ops::scatter_add_rows(tokens, parts, index);
    require_finite(out.data(), "moe layer output");
    return LayerOutput{std::move(out), std::move(trace)};
}

Tensor MoELayer::forward_dense_reference(const Tensor& hidden, const DispatchTrace& trace) const {
    const std::size_t n = config_.n_experts;
    const std::size_t tokens = hidden.dim(0);
    if (trace.decisions.size() != tokens) throw ContractError("dense reference: trace does not match batch");
    RouterScores scores = route_scores(router_, hidden, layer_id_);
    Tensor out;
    for (std::size_t e = 0; e < n; ++e) {
        std::vector<WeightEntry> entries;
        entries.reserve(tokens);
        for (const auto& d : trace.decisions) {
            WeightEntry w{d.token_index, e, WeightKind::constant, 0.0, {}};
            for (std::size_t s = 0; s < d.selected_experts.size(); ++s)
                if (d.selected_experts[s] == e) w = entry_for(d, s, config_.renormalize_topk);
            entries.push_back(std::move(w));
        }
        Tensor ys = experts_[e].forward(hidden);
        Tensor term = ops::scale_rows(ys, combine_weights(scores.scores, std::move(entries)));
        out = out.defined() ? ops::add(out, term) : term;
    }
    return out;
}

std::vector<ExpertGradientRow> gradient_flow_report(const Tape& tape, const MoELayer& layer,
                                                    const DispatchTrace& trace) {
    if (!tape.backward_done()) throw ContractError("gradient_flow_report: run backward first");
    std::vector<ExpertGradientRow> rows;
    for (std::size_t e = 0; e < layer.experts().size(); ++e) {
        double sq = 0.0;
        for (const auto& p : layer.experts()[e].parameters())
            for (double g : p.grad()) sq += g * g;
        ExpertGradientRow row;
        row.expert = e;
        row.grad_norm = std::sqrt(sq);
        row.tokens_routed = e < trace.expert_calls.size() ? trace.expert_calls[e] : 0;
        rows.push_back(row);
    }
    return rows;
}

void write_trace_csv_header(std::ostream& out) {
    out << "batch_id,layer_id,token_index,entropy,mode,experts,weights,token_id\n";
}

void write_trace_csv_rows(std::ostream& out, const DispatchTrace& trace, bool broadcast_only) {
    for (std::size_t t = 0; t < trace.decisions.size(); ++t) {
        const auto& d = trace.decisions[t];
        if (broadcast_only && d.mode != DispatchMode::broadcast) continue;
        out << trace.batch_id << ',' << trace.layer_id << ',' << d.token_index << ',' << io::format_double(d.entropy)
            << ',' << to_string(d.mode) << ',';
        for (std::size_t i = 0; i < d.selected_experts.size(); ++i) out << (i ? ";" : "") << d.selected_experts[i];
        out << ',';
        for (std::size_t i = 0; i < d.combine_weights.size(); ++i)
            out << (i ? ";" : "") << io::format_double(d.combine_weights[i]);
        out << ',' << (t < trace.token_ids.size() ? trace.token_ids[t] : -1) << '\n';
    }
}

}  // namespace gwmoe
