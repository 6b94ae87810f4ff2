#include "gwmoe/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

#include "gwmoe/analysis.hpp"
#include "gwmoe/data.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"
#include "gwmoe/model.hpp"
#include "gwmoe/training.hpp"

namespace gwmoe::cli {

namespace fs = std::filesystem;
using io::format_double;

namespace {

constexpr const char* kVersion = "0.1.0";

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep))
        if (!cur.empty()) out.push_back(cur);
    return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const std::string& flag) {
    std::vector<T> out;
    for (const auto& item : split(s)) {
        try {
            std::size_t used = 0;
            if constexpr (std::is_floating_point_v<T>) {
                out.push_back(static_cast<T>(std::stod(item, &used)));
            } else {
                if (!item.empty() && item[0] == '-') throw std::invalid_argument(item);
                out.push_back(static_cast<T>(std::stoull(item, &used)));
            }
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError(flag + ": cannot parse '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError(flag + ": empty list");
    return out;
}

std::vector<bool> parse_layer_mask(const std::string& s, std::size_t n_layers) {
    if (s.empty() || s == "all") return {};
    std::vector<bool> mask(n_layers, false);
    for (auto l : parse_list<std::size_t>(s, "--layers")) {
        if (l >= n_layers) throw UsageError("--layers: layer " + std::to_string(l) + " does not exist");
        mask[l] = true;
    }
    return mask;
}

// ------------------------------------------------------------ option groups

CLI::Option* add_bool_flag(CLI::App& app, const std::string& names, bool& var, const std::string& desc) {
    return app.add_flag(names, var, desc)->default_str(var ? "true" : "false");
}

const std::set<std::string> kShapeFlags{"d-model", "layers", "heads", "experts", "d-ff", "init-scale", "model-seed"};

struct ModelFlags {
    std::string base;
    std::size_t d_model = 64, layers = 2, heads = 4, experts = 8, top_k = 2, d_ff = 128;
    double init_scale = 0.02;
    std::uint64_t model_seed = 0;

    void add(CLI::App& app) {
        app.add_option("--base", base, "Base checkpoint to fine-tune (default: build a fresh model)");
        app.add_option("--d-model", d_model, "Model width for a fresh model");
        app.add_option("--layers", layers, "Transformer blocks for a fresh model");
        app.add_option("--heads", heads, "Attention heads for a fresh model");
        app.add_option("--experts", experts, "Experts per MoE layer for a fresh model");
        app.add_option("--top-k", top_k, "Experts per token while training");
        app.add_option("--d-ff", d_ff, "Expert hidden width for a fresh model");
        app.add_option("--init-scale", init_scale, "Std of initial weights for a fresh model");
        app.add_option("--model-seed", model_seed, "Initialization seed for a fresh model");
    }

    Model load_or_build(const Dataset& data, CLI::App& app) const {
        if (!base.empty()) {
            Model m = load_checkpoint(base).model;
            if (app.count("--top-k")) m.set_top_k(top_k);
            return m;
        }
        MoELayerConfig layer;
        layer.n_experts = experts;
        layer.top_k = top_k;
        layer.d_ff = d_ff;
        auto c = ModelConfig::uniform(data.vocab_size, d_model, layers, heads, data.seq_len, layer, data.head);
        c.n_classes = std::max<std::size_t>(data.n_classes, 2);
        c.init_scale = init_scale;
        return Model::build(c, model_seed);
    }
};

struct TrainFlags {
    std::string method = "standard";
    std::string h_star = "calibrate";
    double quantile = 0.05;
    bool pooled = false;
    std::string calibration_data;
    std::string max_num_slots = "auto";
    std::size_t batch_size = 32;
    double lr = 3e-4;
    std::size_t epochs = 3;
    double warmup = 0.10;
    bool freeze_router = true;
    std::string scope = "all";

    void add(CLI::App& app) {
        app.add_option("--method", method, "standard or gw")->check(CLI::IsMember({"standard", "gw"}));
        app.add_option("--h-star", h_star, "GW threshold: 'calibrate' or a value in nats");
        app.add_option("--quantile", quantile, "Fraction of calibration tokens flagged uncertain");
        add_bool_flag(app, "--pooled,!--per-layer", pooled, "One pooled threshold for all layers instead of one per layer");
        app.add_option("--calibration-data", calibration_data, "Dataset file for calibration (default: training set)");
        app.add_option("--max-num-slots", max_num_slots, "Broadcast slots per layer per batch, or 'auto' (5% of batch tokens)");
        app.add_option("--batch-size", batch_size, "Examples per training step");
        app.add_option("--lr", lr, "Peak learning rate");
        app.add_option("--epochs", epochs, "Training epochs");
        app.add_option("--warmup", warmup, "Fraction of steps with linear warmup");
        add_bool_flag(app, "--freeze-router,!--train-router", freeze_router, "Keep router weights fixed during fine-tuning");
        app.add_option("--scope", scope, "Parameters to update: all or experts")->check(CLI::IsMember({"all", "experts"}));
    }

    std::optional<HStarSource> source() const {
        if (h_star == "calibrate") return HStarSource::calibrated(quantile, pooled);
        try {
            std::size_t used = 0;
            const double v = std::stod(h_star, &used);
            if (used != h_star.size()) throw std::invalid_argument(h_star);
            return HStarSource::fixed_value(v);
        } catch (const std::exception&) {
            throw UsageError("--h-star: expected 'calibrate' or a number, got '" + h_star + "'");
        }
    }

    TrainConfig config(std::uint64_t seed) const {
        TrainConfig c;
        c.batch_size = batch_size;
        c.learning_rate = lr;
        c.epochs = epochs;
        c.warmup_fraction = warmup;
        c.seed = seed;
        c.freeze_router = freeze_router;
        c.method = method_from_string(method);
        if (c.method == Method::gw) c.h_star_source = source();
        if (max_num_slots != "auto") c.max_num_slots = parse_list<std::size_t>(max_num_slots, "--max-num-slots").at(0);
        c.scope = scope == "experts" ? TrainScope::experts : TrainScope::all;
        return c;
    }
};

struct Common {
    std::string out;
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    std::string config;
};

// ----------------------------------------------------------- output plumbing

void write_config_echo(const fs::path& dir, const CLI::App& sub) {
    const CLI::Option* base = sub.get_option_no_throw("--base");
    const bool from_base = base && base->count() > 0;
    io::atomic_write(dir / "config.txt", [&](std::ostream& o) {
        for (const CLI::Option* opt : sub.get_options()) {
            const std::string name = opt->get_single_name();
            if (name == "help" || name == "config" || name.empty()) continue;
            if (from_base && kShapeFlags.count(name)) continue;
            std::string value;
            if (opt->count() > 0 && opt->get_type_size() == 0) {
                value = opt->as<bool>() ? "true" : "false";
            } else if (opt->count() > 0) {
                const auto& res = opt->results();
                for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
            } else {
                value = opt->get_default_str();
            }
            o << name << " = " << value << '\n';
        }
    });
}

void write_manifest(const fs::path& dir, const std::string& command) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.txt")
            files.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(files.begin(), files.end());
    io::atomic_write(dir / "manifest.txt", [&](std::ostream& o) {
        o << "tool = gwmoe\nversion = " << kVersion << "\ncommand = " << command << '\n';
        for (const auto& f : files) o << "file = " << f << '\n';
    });
}

/// --config values fill options the command line left unset.
void apply_config_file(CLI::App& sub, const std::string& path) {
    const auto kv = io::KeyValueConfig::load(path);
    for (const auto& [key, value] : kv.values()) {
        CLI::Option* opt = sub.get_option_no_throw("--" + key);
        if (!opt || key == "config" || key == "help") throw UsageError("config file " + path + ": unknown key '" + key + "'");
        if (opt->count() > 0) continue;
        if (opt->get_type_size() == 0) {
            const bool on = kv.boolean(key, false);
            // flags with a negated alias ("!--x") read the first name as "true"
            opt->add_result(on ? "true" : "false");
        } else {
            for (const auto& part : opt->get_expected_max() > 1 ? split(value) : std::vector<std::string>{value})
                opt->add_result(part);
        }
        opt->run_callback();
    }
}

void print_table(std::ostream& out, const Table& t) {
    std::vector<std::size_t> w(t.header.size());
    for (std::size_t c = 0; c < w.size(); ++c) w[c] = t.header[c].size();
    for (const auto& r : t.rows)
        for (std::size_t c = 0; c < w.size(); ++c) w[c] = std::max(w[c], r[c].size());
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t c = 0; c < cells.size(); ++c)
            out << (c ? "  " : "") << cells[c] << std::string(w[c] - cells[c].size(), ' ');
        out << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
}

void print_summary(std::ostream& out, const ExperimentReport& r) {
    out << r.id << '\n';
    for (const auto& c : r.conditions)
        out << "  " << c.name << ": " << format_double(c.stats.mean) << " +/- " << format_double(c.stats.std)
            << " (n=" << c.stats.n << ")\n";
}

fs::path require_out(const Common& c) {
    if (c.out.empty()) throw UsageError("--out is required");
    fs::create_directories(c.out);
    return c.out;
}

// ---------------------------------------------------------------- commands

struct Registry {
    CLI::App app{"Entropy-gated broadcast mixture-of-experts toolkit", "gwmoe"};
    struct Entry {
        CLI::App* sub;
        std::function<void()> action;
        bool writes_dir;
    };
    std::vector<std::pair<std::string, Entry>> commands;
    std::ostream* out = &std::cout;
    Common common;

    CLI::App* add(const std::string& name, const std::string& desc) {
        auto* sub = app.add_subcommand(name, desc);
        sub->option_defaults()->always_capture_default();
        return sub;
    }
    void add_common(CLI::App* sub, bool out_required) {
        sub->add_option("--out", common.out, out_required ? "Output run directory" : "Output directory (optional)");
        sub->add_option("--seed", common.seed, "Random seed");
        sub->add_option("--threads", common.threads, "Worker threads for independent runs (1 = bit-reproducible)");
        sub->add_option("--config", common.config, "key = value file; command-line flags take precedence");
    }
};

std::unique_ptr<Registry> build_registry() {
    auto reg = std::make_unique<Registry>();
    Registry& r = *reg;
    r.app.require_subcommand(1);
    r.app.set_version_flag("--version", kVersion);

    // gen-data
    {
        auto* sub = r.add("gen-data", "Generate a synthetic task and write train/val/test splits");
        auto spec = std::make_shared<TaskSpec>();
        auto task = std::make_shared<std::string>("key-value-retrieval");
        auto corpus = std::make_shared<std::string>();
        r.add_common(sub, true);
        sub->add_option("--task", *task, "modular-arithmetic-tagging, key-value-retrieval, char-lm or byte-classification");
        sub->add_option("--n-examples", spec->n_examples, "Examples before splitting");
        sub->add_option("--seq-len", spec->seq_len, "Tokens per example");
        sub->add_option("--train-frac", spec->train_fraction, "Training fraction");
        sub->add_option("--val-frac", spec->val_fraction, "Validation fraction");
        sub->add_option("--test-frac", spec->test_fraction, "Test fraction");
        sub->add_option("--modulus", spec->modulus, "Modulus for modular-arithmetic-tagging");
        sub->add_option("--window", spec->window, "Window length for modular-arithmetic-tagging");
        sub->add_option("--groups", spec->n_groups, "Key groups for key-value-retrieval");
        sub->add_option("--keys-per-group", spec->keys_per_group, "Keys per group for key-value-retrieval");
        sub->add_option("--values", spec->n_values, "Value vocabulary for key-value-retrieval");
        sub->add_option("--table-seed", spec->table_seed, "Seed of the key-value tables");
        sub->add_option("--corpus", *corpus, "Text file for char-lm (default: built-in text)");
        r.commands.push_back({"gen-data", {sub, [&r, spec, task, corpus] {
            TaskSpec s = *spec;
            s.task = task_from_string(*task);
            s.seed = r.common.seed;
            if (!corpus->empty()) s.corpus_text = load_text_corpus(*corpus);
            const auto dir = require_out(r.common);
            const auto splits = generate(s);
            write_dataset(dir / "train.txt", splits.train);
            write_dataset(dir / "val.txt", splits.val);
            write_dataset(dir / "test.txt", splits.test);
            *r.out << splits.train.id << ": " << splits.train.size() << " / " << splits.val.size() << " / "
                   << splits.test.size() << " examples, vocab " << splits.train.vocab_size << '\n';
        }, true}});
    }

    // calibrate
    {
        auto* sub = r.add("calibrate", "Calibrate per-layer entropy thresholds on a base model");
        auto model = std::make_shared<std::string>(), data = std::make_shared<std::string>();
        auto q = std::make_shared<double>(0.05);
        auto pooled = std::make_shared<bool>(false);
        auto batch = std::make_shared<std::size_t>(64);
        r.add_common(sub, true);
        sub->add_option("--model", *model, "Base checkpoint")->required();
        sub->add_option("--data", *data, "Calibration dataset file")->required();
        sub->add_option("--quantile", *q, "Fraction of tokens flagged uncertain");
        add_bool_flag(*sub, "--pooled,!--per-layer", *pooled, "One pooled threshold for all layers");
        sub->add_option("--batch-size", *batch, "Examples per forward pass");
        r.commands.push_back({"calibrate", {sub, [&r, model, data, q, pooled, batch] {
            const auto dir = require_out(r.common);
            auto ck = load_checkpoint(*model);
            const auto d = read_dataset(*data);
            const auto cals = calibrate_from_base(ck.model, d, *q, *batch, *pooled);
            save_checkpoint(dir / "model.gwc", ck.model, ck.extra_tensors, ck.metadata);
            write_calibration_csv(dir / "calibration.csv", cals, ck.model.moe(0).config().n_experts);
            for (const auto& c : cals)
                *r.out << "layer " << c.layer_id << ": h_star = " << format_double(c.h_star) << " ("
                       << c.sample_entropies.size() << " tokens)\n";
        }, true}});
    }

    // train
    {
        auto* sub = r.add("train", "Fine-tune (or pretrain) a model with standard or GW dispatch");
        auto mf = std::make_shared<ModelFlags>();
        auto tf = std::make_shared<TrainFlags>();
        auto data = std::make_shared<std::string>(), val = std::make_shared<std::string>();
        r.add_common(sub, true);
        sub->add_option("--data", *data, "Training dataset file")->required();
        sub->add_option("--val", *val, "Dataset evaluated after training (optional)");
        mf->add(*sub);
        tf->add(*sub);
        r.commands.push_back({"train", {sub, [&r, sub, mf, tf, data, val] {
            const auto dir = require_out(r.common);
            const auto d = read_dataset(*data);
            const Model base = mf->load_or_build(d, *sub);
            TrainConfig cfg = tf->config(r.common.seed);
            cfg.checkpoint_path = dir / "model.gwc";
            cfg.step_csv_path = dir / "steps.csv";
            cfg.trace_csv_path = dir / "trace.csv";
            cfg.nan_dump_path = dir / "nan_batch.txt";
            std::optional<Dataset> cal;
            if (!tf->calibration_data.empty()) cal = read_dataset(tf->calibration_data);
            auto res = train(base, d, cfg, cal ? &*cal : nullptr);
            std::optional<EvalResult> ev;
            if (!val->empty()) ev = evaluate(res.checkpoint.model, read_dataset(*val));
            const auto& m = res.metrics;
            io::atomic_write(dir / "metrics.txt", [&](std::ostream& o) {
                o << "method = " << tf->method << "\nsteps = " << m.steps.size()
                  << "\nfinal_epoch_loss = " << format_double(m.epoch_loss.back())
                  << "\nmax_num_slots = " << m.max_num_slots << "\nexpert_calls = " << m.expert_call_total << '\n';
                for (std::size_t l = 0; l < m.broadcast_totals.size(); ++l)
                    o << "broadcast_l" << l << " = " << m.broadcast_totals[l] << '\n';
                for (std::size_t l = 0; l < m.h_star.size(); ++l)
                    o << "h_star_l" << l << " = " << format_double(m.h_star[l]) << '\n';
                if (ev) o << "val_" << to_string(ev->metric) << " = " << format_double(ev->value) << '\n';
            });
            io::atomic_write(dir / "timing.txt", [&](std::ostream& o) {
                o << "seconds = " << format_double(m.seconds) << "\nsamples_per_sec = " << format_double(m.samples_per_sec)
                  << '\n';
            });
            *r.out << "trained " << m.steps.size() << " steps, final loss " << format_double(m.epoch_loss.back());
            if (ev) *r.out << ", val " << to_string(ev->metric) << ' ' << format_double(ev->value);
            *r.out << '\n';
        }, true}});
    }

    // eval
    {
        auto* sub = r.add("eval", "Evaluate a checkpoint, optionally with routing perturbation");
        auto model = std::make_shared<std::string>(), data = std::make_shared<std::string>();
        auto batch = std::make_shared<std::size_t>(64);
        auto k_eval = std::make_shared<std::size_t>(0);
        auto bcast = std::make_shared<bool>(false);
        auto perturb = std::make_shared<std::string>("none");
        auto ph = std::make_shared<double>(std::numeric_limits<double>::quiet_NaN());
        auto layers = std::make_shared<std::string>("all");
        r.add_common(sub, true);
        sub->add_option("--model", *model, "Checkpoint")->required();
        sub->add_option("--data", *data, "Dataset file")->required();
        sub->add_option("--batch-size", *batch, "Examples per forward pass");
        sub->add_option("--top-k-eval", *k_eval, "Experts per token at inference (0 = checkpoint value)");
        add_bool_flag(*sub, "--broadcast-at-inference", *bcast, "Broadcast uncertain tokens at inference too");
        sub->add_option("--perturb", *perturb, "none, uncertain or control")
            ->check(CLI::IsMember({"none", "uncertain", "control"}));
        sub->add_option("--perturb-h-star", *ph, "Threshold for perturbation (default: checkpoint h_star)");
        sub->add_option("--layers", *layers, "Comma-separated layers to perturb, or 'all'");
        r.commands.push_back({"eval", {sub, [&r, model, data, batch, k_eval, bcast, perturb, ph, layers] {
            const auto dir = require_out(r.common);
            Model m = load_checkpoint(*model).model;
            const auto d = read_dataset(*data);
            if (*k_eval) m.set_top_k_eval(*k_eval);
            if (*bcast) m.set_broadcast_at_inference(true);
            EvalOptions o;
            o.batch_size = *batch;
            if (*perturb != "none") {
                o.perturb = *perturb == "uncertain" ? PerturbMode::uncertain : PerturbMode::control;
                if (!std::isnan(*ph)) o.perturb_h_star = *ph;
                o.perturb_seed = r.common.seed;
                o.perturb_layers = parse_layer_mask(*layers, m.n_layers());
            }
            const auto res = evaluate(m, d, o);
            std::size_t perturbed = 0, calls = 0;
            for (auto p : res.perturbed) perturbed += p;
            for (auto c : res.expert_calls) calls += c;
            io::atomic_write(dir / "eval.txt", [&](std::ostream& out) {
                out << "dataset = " << d.id << "\nmetric = " << to_string(res.metric)
                    << "\nvalue = " << format_double(res.value) << "\nmean_loss = " << format_double(res.mean_loss)
                    << "\npredictions = " << res.predictions << "\ntokens = " << res.tokens
                    << "\nexpert_calls = " << calls << "\nbroadcast = " << res.broadcast_count
                    << "\nperturbed = " << perturbed << '\n';
            });
            *r.out << to_string(res.metric) << " = " << format_double(res.value) << '\n';
        }, true}});
    }

    // entropy-report
    {
        auto* sub = r.add("entropy-report", "Normalized routing entropy tail statistics per layer");
        auto dump = std::make_shared<std::string>(), model = std::make_shared<std::string>(),
             data = std::make_shared<std::string>();
        auto tail = std::make_shared<double>(0.05);
        r.add_common(sub, false);
        sub->add_option("--dump", *dump, "Score dump directory (scores_layer<id>.gwt files)");
        sub->add_option("--model", *model, "Checkpoint (with --data) instead of a dump");
        sub->add_option("--data", *data, "Dataset file used with --model");
        sub->add_option("--tail", *tail, "Tail fraction for the bottom/top means");
        r.commands.push_back({"entropy-report", {sub, [&r, dump, model, data, tail] {
            std::vector<LayerEntropyStats> stats;
            if (!dump->empty()) {
                stats = entropy_report(ingest_score_dump(*dump), *tail);
            } else if (!model->empty() && !data->empty()) {
                stats = entropy_report(load_checkpoint(*model).model, read_dataset(*data), *tail);
            } else {
                throw UsageError("entropy-report needs --dump or both --model and --data");
            }
            const auto t = entropy_table(stats);
            Table shown{t.name, {"layer", "bottom", "average", "top"}, {}};
            for (const auto& s : stats) {
                char b[3][16];
                std::snprintf(b[0], 16, "%.2f", s.bottom_mean);
                std::snprintf(b[1], 16, "%.2f", s.mean);
                std::snprintf(b[2], 16, "%.2f", s.top_mean);
                shown.rows.push_back({std::to_string(s.layer_id), b[0], b[1], b[2]});
            }
            print_table(*r.out, shown);
            if (!r.common.out.empty()) {
                fs::create_directories(r.common.out);
                io::CsvWriter w(fs::path(r.common.out) / "entropy_report.csv", t.header);
                for (const auto& row : t.rows) w.row(row);
            }
        }, false}});
    }

    // perturb
    {
        auto* sub = r.add("perturb", "Baseline vs uncertain-random vs control-random expert reassignment");
        auto model = std::make_shared<std::string>(), data = std::make_shared<std::string>();
        auto cfg = std::make_shared<PerturbationConfig>();
        auto h = std::make_shared<double>(std::numeric_limits<double>::quiet_NaN());
        auto layers = std::make_shared<std::string>("all");
        r.add_common(sub, true);
        sub->add_option("--model", *model, "Checkpoint")->required();
        sub->add_option("--data", *data, "Dataset file")->required();
        sub->add_option("--h-star", *h, "Uncertainty threshold (default: checkpoint h_star per layer)");
        sub->add_option("--repeats", cfg->n_repeats, "Perturbation seeds per condition");
        sub->add_option("--layers", *layers, "Comma-separated layers to perturb, or 'all'");
        sub->add_option("--batch-size", cfg->batch_size, "Examples per forward pass");
        r.commands.push_back({"perturb", {sub, [&r, model, data, cfg, h, layers] {
            const auto dir = require_out(r.common);
            const Model m = load_checkpoint(*model).model;
            PerturbationConfig c = *cfg;
            if (!std::isnan(*h)) c.h_star = *h;
            c.seed = r.common.seed;
            c.threads = r.common.threads;
            c.layers = parse_layer_mask(*layers, m.n_layers());
            auto res = perturbation_experiment(m, read_dataset(*data), c);
            res.report.config["model"] = *model;
            write_report(dir, res.report);
            print_summary(*r.out, res.report);
        }, true}});
    }

    // topk-grid
    {
        auto* sub = r.add("topk-grid", "Fine-tune at each training K and evaluate at each inference K");
        auto mf = std::make_shared<ModelFlags>();
        auto tf = std::make_shared<TrainFlags>();
        auto data = std::make_shared<std::string>(), eval_data = std::make_shared<std::string>();
        auto train_ks = std::make_shared<std::string>("1,2"), eval_ks = std::make_shared<std::string>("1,2");
        auto seeds = std::make_shared<std::string>("1,2,3");
        r.add_common(sub, true);
        sub->add_option("--data", *data, "Training dataset file")->required();
        sub->add_option("--eval-data", *eval_data, "Evaluation dataset file")->required();
        sub->add_option("--train-ks", *train_ks, "Comma-separated training K values");
        sub->add_option("--eval-ks", *eval_ks, "Comma-separated inference K values");
        sub->add_option("--seeds", *seeds, "Comma-separated training seeds");
        mf->add(*sub);
        tf->add(*sub);
        r.commands.push_back({"topk-grid", {sub, [&r, sub, mf, tf, data, eval_data, train_ks, eval_ks, seeds] {
            const auto dir = require_out(r.common);
            const auto d = read_dataset(*data), e = read_dataset(*eval_data);
            RunSettings s;
            s.train = tf->config(r.common.seed);
            s.seeds = parse_list<std::uint64_t>(*seeds, "--seeds");
            s.threads = r.common.threads;
            const auto tk = parse_list<std::size_t>(*train_ks, "--train-ks");
            const auto ek = parse_list<std::size_t>(*eval_ks, "--eval-ks");
            const auto rep = topk_grid_ablation(mf->load_or_build(d, *sub), d, e, tk, ek, s);
            write_report(dir, rep);
            print_table(*r.out, rep.table("topk_grid"));
        }, true}});
    }

    // broadcast-ablate
    {
        auto* sub = r.add("broadcast-ablate", "Evaluate GW checkpoints with and without inference-time broadcast");
        auto models = std::make_shared<std::string>(), data = std::make_shared<std::string>();
        auto seeds = std::make_shared<std::string>();
        auto batch = std::make_shared<std::size_t>(64);
        r.add_common(sub, true);
        sub->add_option("--models", *models, "Comma-separated GW checkpoints")->required();
        sub->add_option("--seeds", *seeds, "Comma-separated seed labels, one per checkpoint (default: 1..n)");
        sub->add_option("--data", *data, "Evaluation dataset file")->required();
        sub->add_option("--batch-size", *batch, "Examples per forward pass");
        r.commands.push_back({"broadcast-ablate", {sub, [&r, models, data, seeds, batch] {
            const auto dir = require_out(r.common);
            std::vector<Model> cks;
            for (const auto& p : split(*models)) cks.push_back(load_checkpoint(p).model);
            std::vector<std::uint64_t> labels;
            if (seeds->empty())
                for (std::size_t i = 0; i < cks.size(); ++i) labels.push_back(i + 1);
            else
                labels = parse_list<std::uint64_t>(*seeds, "--seeds");
            if (labels.size() != cks.size()) throw UsageError("--seeds needs one label per checkpoint");
            auto rep = inference_broadcast_ablation(cks, labels, read_dataset(*data), *batch);
            rep.config["models"] = *models;
            write_report(dir, rep);
            print_summary(*r.out, rep);
        }, true}});
    }

    // hstar-sweep
    {
        auto* sub = r.add("hstar-sweep", "GW fine-tuning across fixed h_star values with a fixed slot budget");
        auto mf = std::make_shared<ModelFlags>();
        auto tf = std::make_shared<TrainFlags>();
        auto data = std::make_shared<std::string>(), eval_data = std::make_shared<std::string>();
        auto values = std::make_shared<std::string>("0.5,1.0,1.5,2.0");
        auto seeds = std::make_shared<std::string>("1,2,3");
        auto slots = std::make_shared<std::size_t>(8);
        r.add_common(sub, true);
        sub->add_option("--data", *data, "Training dataset file")->required();
        sub->add_option("--eval-data", *eval_data, "Evaluation dataset file")->required();
        sub->add_option("--h-values", *values, "Comma-separated h_star values in nats");
        sub->add_option("--slots", *slots, "Fixed broadcast slots per layer per batch");
        sub->add_option("--seeds", *seeds, "Comma-separated training seeds");
        mf->add(*sub);
        tf->add(*sub);
        r.commands.push_back({"hstar-sweep", {sub, [&r, sub, mf, tf, data, eval_data, values, seeds, slots] {
            const auto dir = require_out(r.common);
            const auto d = read_dataset(*data), e = read_dataset(*eval_data);
            RunSettings s;
            s.train = tf->config(r.common.seed);
            s.seeds = parse_list<std::uint64_t>(*seeds, "--seeds");
            s.threads = r.common.threads;
            const auto hs = parse_list<double>(*values, "--h-values");
            const auto rep = h_star_sweep(mf->load_or_build(d, *sub), d, e, hs, *slots, s);
            write_report(dir, rep);
            print_summary(*r.out, rep);
        }, true}});
    }

    // token-report
    {
        auto* sub = r.add("token-report", "Most frequently broadcast tokens from a GW training trace");
        auto trace = std::make_shared<std::string>(), task = std::make_shared<std::string>("key-value-retrieval");
        auto head = std::make_shared<std::string>("next_token");
        auto top_n = std::make_shared<std::size_t>(50);
        r.add_common(sub, false);
        sub->add_option("--trace", *trace, "trace.csv written by train")->required();
        sub->add_option("--task", *task, "Task name used to label tokens");
        sub->add_option("--head", *head, "next_token (decoder) or classification (encoder)");
        sub->add_option("--top-n", *top_n, "Rows to keep");
        r.commands.push_back({"token-report", {sub, [&r, trace, task, head, top_n] {
            const auto table = broadcast_token_report(read_broadcast_tokens(*trace), head_from_string(*head),
                                                      task_from_string(*task), *top_n);
            const auto t = token_table(table);
            print_table(*r.out, t);
            if (!r.common.out.empty()) {
                fs::create_directories(r.common.out);
                io::CsvWriter w(fs::path(r.common.out) / (t.name + ".csv"), t.header);
                for (const auto& row : t.rows) w.row(row);
            }
        }, false}});
    }

    // dump-scores
    {
        auto* sub = r.add("dump-scores", "Export eval-mode router scores for offline analysis");
        auto model = std::make_shared<std::string>(), data = std::make_shared<std::string>();
        auto name = std::make_shared<std::string>("model");
        auto batch = std::make_shared<std::size_t>(32);
        r.add_common(sub, true);
        sub->add_option("--model", *model, "Checkpoint")->required();
        sub->add_option("--data", *data, "Dataset file")->required();
        sub->add_option("--name", *name, "Model name stored in the dump manifest");
        sub->add_option("--batch-size", *batch, "Examples per forward pass");
        r.commands.push_back({"dump-scores", {sub, [&r, model, data, name, batch] {
            const auto dir = require_out(r.common);
            const auto dump = dump_model_scores(load_checkpoint(*model).model, read_dataset(*data), *name, *batch);
            write_score_dump(dir / "scores", dump);
            *r.out << "wrote " << dump.layers.size() << " layers x " << dump.token_ids.size() << " tokens\n";
        }, true}});
    }
    return reg;
}

}  // namespace

std::vector<std::string> subcommands() {
    auto reg = build_registry();
    std::vector<std::string> out;
    for (const auto& [name, _] : reg->commands) out.push_back(name);
    return out;
}

std::vector<std::pair<std::string, std::string>> flags(const std::string& subcommand) {
    auto reg = build_registry();
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, entry] : reg->commands) {
        if (name != subcommand) continue;
        for (const CLI::Option* opt : entry.sub->get_options()) {
            if (opt->get_single_name() == "help") continue;
            for (const auto& ln : opt->get_lnames()) out.emplace_back("--" + ln, opt->get_description());
        }
    }
    return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    auto reg = build_registry();
    reg->out = &out;
    // CLI11 consumes arguments from the back
    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();
    const Registry::Entry* chosen = nullptr;
    std::string chosen_name;
    try {
        reg->app.parse(rev);
        for (const auto& [name, entry] : reg->commands)
            if (entry.sub->parsed()) {
                chosen = &entry;
                chosen_name = name;
            }
        if (!reg->common.config.empty()) apply_config_file(*chosen->sub, reg->common.config);
    } catch (const CLI::CallForHelp& e) {
        reg->app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        reg->app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::CallForVersion& e) {
        out << kVersion << '\n';
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n\n";
        CLI::App* target = &reg->app;
        for (const auto& [name, entry] : reg->commands)
            if (entry.sub->parsed()) target = entry.sub;
        err << target->help();
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }

    try {
        chosen->action();
        if (chosen->writes_dir || !reg->common.out.empty()) {
            fs::create_directories(reg->common.out);
            write_config_echo(reg->common.out, *chosen->sub);
            write_manifest(reg->common.out, chosen_name);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace gwmoe::cli
