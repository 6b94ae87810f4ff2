#include "gwmoe/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gwmoe/autograd.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"
#include "gwmoe/ops.hpp"

namespace gwmoe {

const char* to_string(Method method) { return method == Method::gw ? "gw" : "standard"; }

Method method_from_string(const std::string& s) {
    if (s == "gw") return Method::gw;
    if (s == "standard") return Method::standard;
    throw ConfigError("unknown method '" + s + "' (expected standard or gw)");
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0,1)");
    if (method == Method::gw && !h_star_source) throw ConfigError("method=gw needs an h_star source");
    if (h_star_source) {
        const auto& s = *h_star_source;
        if (s.kind == HStarSource::Kind::calibrate && !(s.quantile >= 0.0 && s.quantile < 1.0))
            throw ConfigError("calibration quantile must lie in [0,1)");
        if (s.kind == HStarSource::Kind::fixed && !(s.value >= 0.0)) throw ConfigError("h_star must be >= 0");
    }
}

std::size_t default_max_num_slots(double average_tokens_per_batch) {
    return static_cast<std::size_t>(std::ceil(0.05 * average_tokens_per_batch - 1e-9));
}

std::vector<std::vector<double>> collect_entropies(const Model& model, const Dataset& data, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    std::vector<std::vector<double>> out(model.n_layers());
    NoGradScope no_grad;
    for (std::size_t first = 0; first < data.size(); first += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, data.size() - first));
        std::iota(idx.begin(), idx.end(), first);
        ForwardOptions opts;
        opts.mode = Mode::eval;
        opts.batch_id = first / batch_size;
        const auto res = model.forward(batch_tokens(data, idx), opts);
        for (std::size_t l = 0; l < res.traces.size(); ++l)
            for (const auto& d : res.traces[l].decisions) out[l].push_back(d.entropy);
    }
    return out;
}

std::vector<EntropyCalibration> calibrate_from_base(Model& model, const Dataset& data, double quantile,
                                                    std::size_t batch_size, bool pooled) {
    const auto samples = collect_entropies(model, data, batch_size);
    std::vector<EntropyCalibration> cals;
    if (pooled) {
        std::vector<double> all;
        for (const auto& s : samples) all.insert(all.end(), s.begin(), s.end());
        const auto shared = calibrate_h_star(std::move(all), quantile, -1);
        for (std::size_t l = 0; l < samples.size(); ++l) {
            auto c = shared;
            c.layer_id = static_cast<int>(l);
            cals.push_back(std::move(c));
        }
    } else {
        for (std::size_t l = 0; l < samples.size(); ++l)
            cals.push_back(calibrate_h_star(samples[l], quantile, static_cast<int>(l)));
    }
    model.set_calibrations(cals);
    return cals;
}

namespace {

bool is_router_name(const std::string& name) {
    return name.size() >= 6 && name.compare(name.size() - 6, 6, "router") == 0;
}

bool is_expert_name(const std::string& name) { return name.find(".experts.") != std::string::npos; }

std::filesystem::path nan_dump_target(const TrainConfig& config) {
    if (!config.nan_dump_path.empty()) return config.nan_dump_path;
    if (!config.checkpoint_path.empty()) return config.checkpoint_path.parent_path() / "nan_batch.txt";
    return {};
}

[[noreturn]] void abort_on_nan(const TrainConfig& config, std::size_t step, std::span<const std::size_t> idx,
                               std::span<const int> tokens, std::span<const int> targets, const std::string& why) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << " (" << why << "); batch examples:";
    for (auto i : idx) msg << ' ' << i;
    const auto path = nan_dump_target(config);
    if (!path.empty()) {
        std::ofstream out(path);
        out << "step " << step << "\nreason " << why << "\nexamples";
        for (auto i : idx) out << ' ' << i;
        out << "\ntokens";
        for (int t : tokens) out << ' ' << t;
        out << "\ntargets";
        for (int t : targets) out << ' ' << t;
        out << '\n';
        msg << "; batch dumped to " << path.string();
    }
    throw NumericError(msg.str());
}

}  // namespace

TrainResult train(const Model& base, const Dataset& data, const TrainConfig& config, const Dataset* calibration_data) {
    config.validate();
    if (data.size() == 0) throw InsufficientDataError("training set is empty");
    if (base.config().head != data.head) throw ConfigError("dataset head does not match the model head");
    if (data.seq_len != base.config().seq_len) throw ConfigError("dataset seq_len does not match the model");

    Model model = base.clone();
    model.set_freeze_router(config.freeze_router);
    const std::size_t n_layers = model.n_layers();
    const std::size_t steps_per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const auto warmup_steps =
        static_cast<std::size_t>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));

    TrainMetrics metrics;
    metrics.broadcast_totals.assign(n_layers, 0);
    metrics.broadcast_tokens.assign(n_layers, {});
    const bool gw = config.method == Method::gw;
    if (gw) {
        const auto& src = *config.h_star_source;
        if (src.kind == HStarSource::Kind::calibrate)
            calibrate_from_base(model, calibration_data ? *calibration_data : data, src.quantile, 64, src.pooled);
        else
            model.set_h_star(src.value);
        const double avg_tokens = static_cast<double>(data.token_count()) / static_cast<double>(steps_per_epoch);
        metrics.max_num_slots = config.max_num_slots.value_or(default_max_num_slots(avg_tokens));
        model.set_max_num_slots(metrics.max_num_slots);
        for (std::size_t l = 0; l < n_layers; ++l) metrics.h_star.push_back(*model.moe(l).config().h_star);
    }

    std::vector<Tensor> trainable;
    std::vector<std::string> trainable_names;
    for (const auto& [name, t] : model.named_parameters()) {
        if (config.freeze_router && is_router_name(name)) continue;
        if (config.scope == TrainScope::experts && !is_expert_name(name) && !is_router_name(name)) continue;
        trainable.push_back(t);
        trainable_names.push_back(name);
    }
    Adam adam(trainable);
    const auto all_params = model.parameters();

    std::unique_ptr<io::CsvWriter> step_csv;
    if (!config.step_csv_path.empty()) {
        std::vector<std::string> header{"step", "epoch", "loss", "lr", "tokens", "expert_calls"};
        for (std::size_t l = 0; l < n_layers; ++l) header.push_back("broadcast_l" + std::to_string(l));
        step_csv = std::make_unique<io::CsvWriter>(config.step_csv_path, header);
    }
    std::unique_ptr<std::ofstream> trace_csv;
    if (!config.trace_csv_path.empty()) {
        trace_csv = std::make_unique<std::ofstream>(config.trace_csv_path);
        write_trace_csv_header(*trace_csv);
    }

    Rng shuffle_rng(derive_seed(config.seed, 0x7368));
    std::vector<std::size_t> order(data.size());
    std::size_t step = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        double epoch_loss = 0.0;
        for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
            ++step;
            const std::span<const std::size_t> idx(order.data() + first,
                                                   std::min(config.batch_size, order.size() - first));
            const auto tokens = batch_tokens(data, idx);
            const auto targets = batch_targets(data, idx);
            for (auto& p : all_params) p.zero_grad();

            Tape tape;
            TapeScope scope(tape);
            ForwardOptions opts;
            opts.mode = Mode::train;
            opts.gw = gw;
            opts.batch_id = step - 1;
            ModelOutput out;
            Tensor loss;
            try {
                out = model.forward(tokens, opts);
                loss = ops::cross_entropy(out.logits, targets);
            } catch (const NumericError& e) {
                abort_on_nan(config, step, idx, tokens, targets, e.what());
            }
            if (!std::isfinite(loss.item())) abort_on_nan(config, step, idx, tokens, targets, "loss is not finite");
            tape.backward(loss);
            const double lr = warmup_lr(config.learning_rate, step, warmup_steps);
            adam.step(lr);

            StepRecord rec;
            rec.step = step;
            rec.epoch = epoch;
            rec.loss = loss.item();
            rec.lr = lr;
            rec.tokens = tokens.size();
            for (std::size_t l = 0; l < n_layers; ++l) {
                const auto& tr = out.traces[l];
                rec.broadcast.push_back(tr.broadcast_count);
                rec.expert_calls += tr.total_calls();
                metrics.broadcast_totals[l] += tr.broadcast_count;
                for (std::size_t t = 0; t < tr.decisions.size(); ++t)
                    if (tr.decisions[t].mode == DispatchMode::broadcast)
                        metrics.broadcast_tokens[l].push_back(tr.token_ids[t]);
                if (trace_csv) write_trace_csv_rows(*trace_csv, tr, true);
            }
            metrics.expert_call_total += rec.expert_calls;
            metrics.samples += idx.size();
            epoch_loss += rec.loss;
            if (step_csv) {
                std::vector<std::string> cells{std::to_string(rec.step), std::to_string(rec.epoch),
                                               io::format_double(rec.loss), io::format_double(rec.lr),
                                               std::to_string(rec.tokens), std::to_string(rec.expert_calls)};
                for (auto b : rec.broadcast) cells.push_back(std::to_string(b));
                step_csv->row(cells);
            }
            metrics.steps.push_back(std::move(rec));
        }
        metrics.epoch_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    }
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.samples_per_sec =
        static_cast<double>(metrics.samples) / std::max(metrics.seconds, std::numeric_limits<double>::min());

    std::vector<NamedTensor> extras;
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        extras.push_back({"adam.m." + trainable_names[i], adam.first_moments()[i]});
        extras.push_back({"adam.v." + trainable_names[i], adam.second_moments()[i]});
    }
    std::map<std::string, std::string> meta{
        {"method", to_string(config.method)},
        {"seed", std::to_string(config.seed)},
        {"steps", std::to_string(step)},
        {"epochs", std::to_string(config.epochs)},
        {"batch_size", std::to_string(config.batch_size)},
        {"learning_rate", io::format_double(config.learning_rate)},
        {"warmup_steps", std::to_string(warmup_steps)},
        {"freeze_router", config.freeze_router ? "true" : "false"},
        {"max_num_slots", std::to_string(metrics.max_num_slots)},
        {"dataset", data.id},
    };
    if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, model, extras, meta);
    return TrainResult{Checkpoint{std::move(model), std::move(extras), std::move(meta)}, std::move(metrics)};
}

EvalResult evaluate(const Model& model, const Dataset& data, const EvalOptions& options) {
    const auto& cfg = model.config();
    if (cfg.head != data.head)
        throw ConfigError(std::string("dataset is a ") + to_string(data.head) + " task but the model has a " +
                          to_string(cfg.head) + " head");
    if (data.seq_len != cfg.seq_len) throw ConfigError("dataset seq_len does not match the model");
    if (data.vocab_size > cfg.vocab_size) throw ConfigError("dataset vocabulary exceeds the model vocabulary");
    if (cfg.head == HeadType::classification && data.n_classes != cfg.n_classes)
        throw ConfigError("dataset class count does not match the model");
    if (data.metric == Metric::perplexity && cfg.head != HeadType::next_token)
        throw ConfigError("perplexity needs a next_token head");
    if (data.size() == 0) throw InsufficientDataError("evaluation set is empty");
    if (options.batch_size == 0) throw ConfigError("batch_size must be positive");

    EvalResult res;
    res.metric = data.metric;
    res.expert_calls.assign(model.n_layers(), 0);
    double loss_sum = 0.0;
    NoGradScope no_grad;
    for (std::size_t first = 0, b = 0; first < data.size(); first += options.batch_size, ++b) {
        std::vector<std::size_t> idx(std::min(options.batch_size, data.size() - first));
        std::iota(idx.begin(), idx.end(), first);
        const auto tokens = batch_tokens(data, idx);
        const auto targets = batch_targets(data, idx);
        ForwardOptions opts;
        opts.mode = Mode::eval;
        opts.batch_id = b;
        opts.perturb = options.perturb;
        opts.perturb_h_star = options.perturb_h_star;
        opts.perturb_seed = options.perturb_seed;
        opts.perturb_layers = options.perturb_layers;
        auto out = model.forward(tokens, opts);

        const auto z = out.logits.data();
        const std::size_t classes = out.logits.dim(1);
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const double* row = z.data() + i * classes;
            const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
            if (pred == targets[i]) ++res.correct;
            const double mx = row[pred];
            double s = 0.0;
            for (std::size_t c = 0; c < classes; ++c) s += std::exp(row[c] - mx);
            loss_sum += mx + std::log(s) - row[targets[i]];
        }
        res.predictions += targets.size();
        res.tokens += tokens.size();
        for (std::size_t l = 0; l < out.traces.size(); ++l) {
            res.expert_calls[l] += out.traces[l].total_calls();
            res.broadcast_count += out.traces[l].broadcast_count;
            res.perturbed.push_back(out.traces[l].perturbed_count);
        }
        if (options.keep_traces)
            for (auto& tr : out.traces) res.traces.push_back(std::move(tr));
    }
    res.mean_loss = loss_sum / static_cast<double>(res.predictions);
    res.value = data.metric == Metric::perplexity
                    ? std::exp(res.mean_loss)
                    : static_cast<double>(res.correct) / static_cast<double>(res.predictions);
    return res;
}

}  // namespace gwmoe
