#include "gwmoe/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"
#include "gwmoe/ops.hpp"

namespace gwmoe {

namespace {

using json = nlohmann::json;

constexpr char kCheckpointMagic[4] = {'G', 'W', 'C', '1'};

Tensor init_normal(Shape shape, Rng& rng, double scale) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

json layer_to_json(const MoELayerConfig& c) {
    json j{{"n_experts", c.n_experts},
           {"top_k", c.top_k},
           {"top_k_eval", c.top_k_eval},
           {"d_model", c.d_model},
           {"d_ff", c.d_ff},
           {"max_num_slots", c.max_num_slots},
           {"renormalize_topk", c.renormalize_topk},
           {"broadcast_at_inference", c.broadcast_at_inference},
           {"freeze_router", c.freeze_router}};
    j["h_star"] = c.h_star ? json(*c.h_star) : json(nullptr);
    return j;
}

MoELayerConfig layer_from_json(const json& j) {
    MoELayerConfig c;
    c.n_experts = j.at("n_experts").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.top_k_eval = j.at("top_k_eval").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_num_slots = j.at("max_num_slots").get<std::size_t>();
    c.renormalize_topk = j.at("renormalize_topk").get<bool>();
    c.broadcast_at_inference = j.at("broadcast_at_inference").get<bool>();
    c.freeze_router = j.at("freeze_router").get<bool>();
    if (!j.at("h_star").is_null()) c.h_star = j.at("h_star").get<double>();
    return c;
}

json config_to_json(const ModelConfig& c) {
    json layers = json::array();
    for (const auto& l : c.layers) layers.push_back(layer_to_json(l));
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},       {"seq_len", c.seq_len},     {"n_classes", c.n_classes},
                {"head", to_string(c.head)},  {"init_scale", c.init_scale}, {"layers", layers}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.head = head_from_string(j.at("head").get<std::string>());
    c.init_scale = j.at("init_scale").get<double>();
    for (const auto& l : j.at("layers")) c.layers.push_back(layer_from_json(l));
    return c;
}

}  // namespace

const char* to_string(HeadType head) { return head == HeadType::next_token ? "next_token" : "classification"; }

HeadType head_from_string(const std::string& s) {
    if (s == "next_token" || s == "next-token") return HeadType::next_token;
    if (s == "classification") return HeadType::classification;
    throw ConfigError("unknown head type '" + s + "'");
}

ModelConfig ModelConfig::uniform(std::size_t vocab, std::size_t d_model, std::size_t n_layers, std::size_t n_heads,
                                 std::size_t seq_len, const MoELayerConfig& layer, HeadType head) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.seq_len = seq_len;
    c.head = head;
    MoELayerConfig l = layer;
    l.d_model = d_model;
    c.layers.assign(n_layers, l);
    return c;
}

ModelConfig ModelConfig::desk_default() {
    MoELayerConfig layer;
    layer.n_experts = 8;
    layer.top_k = 2;
    layer.d_ff = 128;
    return uniform(256, 64, 2, 4, 32, layer);
}

void ModelConfig::validate() const {
    if (n_layers == 0) throw ConfigError("model needs at least one layer");
    if (vocab_size == 0 || d_model == 0 || seq_len == 0) throw ConfigError("vocab_size, d_model and seq_len must be positive");
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    if (head == HeadType::classification && n_classes < 2) throw ConfigError("classification head needs n_classes >= 2");
    if (layers.size() != n_layers)
        throw ConfigError("expected " + std::to_string(n_layers) + " layer configs, got " + std::to_string(layers.size()));
    for (const auto& l : layers) {
        l.validate();
        if (l.d_model != d_model) throw ConfigError("layer d_model differs from model d_model");
    }
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng rng(seed);
    const std::size_t d = config.d_model;
    const double s = config.init_scale;
    m.tok_emb_ = init_normal({config.vocab_size, d}, rng, s);
    m.pos_emb_ = init_normal({config.seq_len, d}, rng, s);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        TransformerBlock b{Tensor({d}, 1.0), Tensor({d}),
                           init_normal({d, d}, rng, s), init_normal({d, d}, rng, s),
                           init_normal({d, d}, rng, s), init_normal({d, d}, rng, s),
                           Tensor({d}, 1.0), Tensor({d}),
                           MoELayer(config.layers[l], static_cast<int>(l), rng, s)};
        m.blocks_.push_back(std::move(b));
    }
    m.lnf_gain_ = Tensor({d}, 1.0);
    m.lnf_bias_ = Tensor({d});
    m.head_w_ = init_normal({d, config.output_size()}, rng, s);
    m.head_b_ = Tensor({config.output_size()});
    for (auto& p : m.parameters()) p.set_requires_grad(true);
    return m;
}

ModelOutput Model::forward(std::span<const int> tokens, const ForwardOptions& options) const {
    const auto T = config_.seq_len;
    if (tokens.empty() || tokens.size() % T != 0)
        throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens is not a positive multiple of seq_len " +
                             std::to_string(T));
    if (options.mode == Mode::train && options.perturb) throw ContractError("perturbation applies only at evaluation");
    // uncertain sets come from a clean pass
    std::vector<std::vector<bool>> uncertain;
    if (options.perturb) {
        ForwardOptions clean = options;
        clean.perturb.reset();
        ModelOutput ref;
        {
            NoGradScope no_grad;
            ref = forward(tokens, clean);
        }
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto hs = options.perturb_h_star ? options.perturb_h_star : blocks_[l].moe.config().h_star;
            std::vector<bool> mask(tokens.size(), false);
            if (hs)
                for (std::size_t t = 0; t < mask.size(); ++t) mask[t] = ref.traces[l].decisions[t].entropy >= *hs;
            uncertain.push_back(std::move(mask));
        }
    }
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % T);

    Tensor x = ops::add(ops::embedding(tok_emb_, tokens), ops::embedding(pos_emb_, positions));
    ModelOutput result;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto& b = blocks_[l];
        Tensor h = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
        Tensor a = ops::attention(ops::matmul(h, b.wq), ops::matmul(h, b.wk), ops::matmul(h, b.wv), T,
                                  config_.n_heads, config_.causal());
        x = ops::add(x, ops::matmul(a, b.wo));
        Tensor h2 = ops::layer_norm(x, b.ln2_gain, b.ln2_bias);

        LayerOutput lo;
        if (options.mode == Mode::train) {
            lo = options.gw ? b.moe.forward_train(h2, options.batch_id) : b.moe.forward_standard(h2, options.batch_id);
        } else {
            std::optional<Perturbation> p;
            const bool layer_on = options.perturb_layers.empty() ||
                                  (l < options.perturb_layers.size() && options.perturb_layers[l]);
            if (options.perturb && layer_on) {
                const auto hs = options.perturb_h_star ? options.perturb_h_star : b.moe.config().h_star;
                if (!hs) throw ConfigError("perturbation needs an h_star for layer " + std::to_string(l));
                p = Perturbation{*options.perturb, *hs,
                                 derive_seed(options.perturb_seed, options.batch_id * 4096 + l), uncertain[l]};
            }
            lo = b.moe.forward_eval(h2, options.batch_id, p);
        }
        lo.trace.token_ids.assign(tokens.begin(), tokens.end());
        x = ops::add(x, lo.output);
        result.traces.push_back(std::move(lo.trace));
    }
    Tensor hf = ops::layer_norm(x, lnf_gain_, lnf_bias_);
    if (config_.head == HeadType::classification) hf = ops::mean_pool(hf, T);
    result.logits = ops::add_row(ops::matmul(hf, head_w_), head_b_);
    return result;
}

std::vector<NamedTensor> Model::named_parameters() const {
    std::vector<NamedTensor> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto& b = blocks_[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "ln1.gain", b.ln1_gain});
        out.push_back({p + "ln1.bias", b.ln1_bias});
        out.push_back({p + "attn.wq", b.wq});
        out.push_back({p + "attn.wk", b.wk});
        out.push_back({p + "attn.wv", b.wv});
        out.push_back({p + "attn.wo", b.wo});
        out.push_back({p + "ln2.gain", b.ln2_gain});
        out.push_back({p + "ln2.bias", b.ln2_bias});
        const auto names = b.moe.parameter_names(p + "moe.");
        const auto params = b.moe.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) out.push_back({names[i], params[i]});
    }
    out.push_back({"lnf.gain", lnf_gain_});
    out.push_back({"lnf.bias", lnf_bias_});
    out.push_back({"head.w", head_w_});
    out.push_back({"head.b", head_b_});
    return out;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_parameters()) out.push_back(nt.tensor);
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
}

std::size_t Model::expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    std::size_t n = c.vocab_size * d + c.seq_len * d;
    for (const auto& l : c.layers) {
        n += 4 * d + 4 * d * d + d * l.n_experts;
        n += l.n_experts * (d * l.d_ff + l.d_ff + l.d_ff * d + d);
    }
    n += 2 * d + d * c.output_size() + c.output_size();
    return n;
}

std::size_t Model::expected_eval_calls_per_token(const ModelConfig& c) {
    std::size_t n = 0;
    for (const auto& l : c.layers) n += l.eval_k();
    return n;
}

std::vector<Tensor> Model::router_parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_) out.push_back(b.moe.router());
    return out;
}

void Model::update_layers(const std::function<void(MoELayerConfig&)>& fn) {
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        MoELayerConfig c = blocks_[l].moe.config();
        fn(c);
        c.validate();
        blocks_[l].moe.config() = c;
        config_.layers[l] = c;
    }
}

void Model::set_calibrations(std::vector<EntropyCalibration> calibrations) {
    if (calibrations.size() != blocks_.size())
        throw ConfigError("expected " + std::to_string(blocks_.size()) + " calibrations, got " +
                          std::to_string(calibrations.size()));
    for (std::size_t l = 0; l < blocks_.size(); ++l) set_layer_h_star(l, calibrations[l].h_star);
    calibrations_ = std::move(calibrations);
}

void Model::set_layer_h_star(std::size_t layer, std::optional<double> h_star) {
    blocks_.at(layer).moe.config().h_star = h_star;
    blocks_[layer].moe.config().validate();
    config_.layers[layer].h_star = h_star;
}

void Model::set_h_star(double h_star) {
    update_layers([&](MoELayerConfig& c) { c.h_star = h_star; });
}

void Model::set_max_num_slots(std::size_t slots) {
    update_layers([&](MoELayerConfig& c) { c.max_num_slots = slots; });
}

void Model::set_top_k(std::size_t k) {
    update_layers([&](MoELayerConfig& c) { c.top_k = k; });
}

void Model::set_top_k_eval(std::size_t k) {
    update_layers([&](MoELayerConfig& c) { c.top_k_eval = k; });
}

void Model::set_broadcast_at_inference(bool on) {
    update_layers([&](MoELayerConfig& c) { c.broadcast_at_inference = on; });
}

void Model::set_freeze_router(bool on) {
    update_layers([&](MoELayerConfig& c) { c.freeze_router = on; });
}

Model Model::clone() const {
    Model m = *this;
    m.tok_emb_ = tok_emb_.clone();
    m.pos_emb_ = pos_emb_.clone();
    for (auto& b : m.blocks_) {
        for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias})
            *t = t->clone();
        b.moe.router() = b.moe.router().clone();
        for (auto& e : b.moe.experts())
            for (Tensor* t : {&e.w_in, &e.b_in, &e.w_out, &e.b_out}) *t = t->clone();
    }
    m.lnf_gain_ = lnf_gain_.clone();
    m.lnf_bias_ = lnf_bias_.clone();
    m.head_w_ = head_w_.clone();
    m.head_b_ = head_b_.clone();
    return m;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const std::vector<NamedTensor>& extra_tensors,
                     const std::map<std::string, std::string>& metadata) {
    std::vector<NamedTensor> tensors = model.named_parameters();
    json calib = json::array();
    for (const auto& c : model.calibrations()) {
        const std::string name = "calibration." + std::to_string(c.layer_id) + ".samples";
        calib.push_back({{"layer_id", c.layer_id}, {"h_star", c.h_star}, {"quantile", c.quantile}, {"samples", name}});
        tensors.push_back({name, Tensor({c.sample_entropies.size()}, c.sample_entropies)});
    }
    const std::size_t n_model = tensors.size() - model.calibrations().size();
    for (const auto& e : extra_tensors) tensors.push_back(e);

    json names = json::array();
    for (const auto& t : tensors) names.push_back(t.name);
    json manifest{{"format", "gwmoe-checkpoint"},
                  {"version", 1},
                  {"config", config_to_json(model.config())},
                  {"model_tensors", n_model},
                  {"calibrations", calib},
                  {"extra_tensors", extra_tensors.size()},
                  {"metadata", metadata},
                  {"tensors", names}};
    const std::string text = manifest.dump(1);
    io::atomic_write(path, [&](std::ostream& out) {
        out.write(kCheckpointMagic, 4);
        io::write_u64(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& t : tensors) io::write_tensor(out, t.tensor);
    });
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("not a checkpoint (bad magic): " + path.string());
    const auto len = io::read_u64(in);
    if (len > (std::uint64_t{1} << 30)) throw FormatError("implausible manifest length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (static_cast<std::uint64_t>(in.gcount()) != len) throw FormatError("truncated checkpoint manifest");

    json manifest;
    ModelConfig config;
    std::vector<std::string> names;
    std::size_t n_model = 0;
    try {
        manifest = json::parse(text);
        if (manifest.at("format") != "gwmoe-checkpoint") throw FormatError("unknown checkpoint format");
        config = config_from_json(manifest.at("config"));
        names = manifest.at("tensors").get<std::vector<std::string>>();
        n_model = manifest.at("model_tensors").get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
    }

    Model model = Model::build(config, 0);
    auto params = model.named_parameters();
    if (n_model != params.size() || names.size() < n_model)
        throw FormatError("checkpoint tensor list does not match its config");

    std::map<std::string, Tensor> others;
    for (std::size_t i = 0; i < names.size(); ++i) {
        Tensor t = io::read_tensor(in);
        if (i < n_model) {
            if (names[i] != params[i].name || t.shape() != params[i].tensor.shape())
                throw FormatError("checkpoint tensor '" + names[i] + "' inconsistent with config");
            std::copy(t.data().begin(), t.data().end(), params[i].tensor.data().begin());
        } else {
            others.emplace(names[i], std::move(t));
        }
    }

    std::vector<EntropyCalibration> calibrations;
    try {
        for (const auto& c : manifest.at("calibrations")) {
            EntropyCalibration cal;
            cal.layer_id = c.at("layer_id").get<int>();
            cal.h_star = c.at("h_star").get<double>();
            cal.quantile = c.at("quantile").get<double>();
            auto it = others.find(c.at("samples").get<std::string>());
            if (it == others.end()) throw FormatError("missing calibration samples tensor");
            cal.sample_entropies.assign(it->second.data().begin(), it->second.data().end());
            others.erase(it);
            calibrations.push_back(std::move(cal));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad calibration entry: ") + e.what());
    }
    if (!calibrations.empty()) {
        // keep any per-layer h_star overrides recorded in the config
        const auto saved = config.layers;
        model.set_calibrations(std::move(calibrations));
        for (std::size_t l = 0; l < saved.size(); ++l) model.set_layer_h_star(l, saved[l].h_star);
    }

    Checkpoint ck{std::move(model), {}, {}};
    for (std::size_t i = n_model; i < names.size(); ++i) {
        auto it = others.find(names[i]);
        if (it != others.end()) ck.extra_tensors.push_back({names[i], it->second});
    }
    try {
        ck.metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint metadata: ") + e.what());
    }
    return ck;
}

}  // namespace gwmoe
