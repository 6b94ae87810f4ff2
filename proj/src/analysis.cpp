#include "gwmoe/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "gwmoe/autograd.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"

namespace gwmoe {

namespace fs = std::filesystem;
using io::format_double;

SeedStats seed_stats(std::span<const double> values) {
    SeedStats s;
    s.n = values.size();
    if (s.n == 0) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(s.n);
    if (s.n < 2) return s;
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
    return s;
}

void ExperimentReport::add(const std::string& name, std::vector<std::uint64_t> seeds, std::vector<double> values) {
    if (seeds.size() != values.size()) throw ContractError("condition '" + name + "': seeds and values differ in length");
    ConditionResult c{name, std::move(seeds), std::move(values), {}};
    c.stats = seed_stats(c.values);
    conditions.push_back(std::move(c));
}

const ConditionResult& ExperimentReport::condition(const std::string& name) const {
    for (const auto& c : conditions)
        if (c.name == name) return c;
    throw ContractError("report '" + id + "' has no condition '" + name + "'");
}

const Table& ExperimentReport::table(const std::string& name) const {
    for (const auto& t : tables)
        if (t.name == name) return t;
    throw ContractError("report '" + id + "' has no table '" + name + "'");
}

void write_report(const fs::path& dir, const ExperimentReport& report) {
    fs::create_directories(dir);
    io::atomic_write(dir / "config.txt", [&](std::ostream& out) {
        out << "experiment = " << report.id << '\n';
        for (const auto& [k, v] : report.config) out << k << " = " << v << '\n';
    });
    {
        io::CsvWriter runs(dir / "runs.csv", {"condition", "seed", "value"});
        for (const auto& c : report.conditions)
            for (std::size_t i = 0; i < c.values.size(); ++i)
                runs.row({c.name, std::to_string(c.seeds[i]), format_double(c.values[i])});
    }
    {
        io::CsvWriter summary(dir / "summary.csv", {"condition", "n", "mean", "std"});
        for (const auto& c : report.conditions)
            summary.row({c.name, std::to_string(c.stats.n), format_double(c.stats.mean), format_double(c.stats.std)});
    }
    io::atomic_write(dir / "summary.txt", [&](std::ostream& out) {
        out << report.id << '\n';
        std::size_t width = 9;
        for (const auto& c : report.conditions) width = std::max(width, c.name.size());
        for (const auto& c : report.conditions) {
            out << "  " << c.name << std::string(width - c.name.size() + 2, ' ') << format_double(c.stats.mean)
                << " +/- " << format_double(c.stats.std) << "  (n=" << c.stats.n << ")\n";
        }
        for (const auto& n : report.notes) out << "note: " << n << '\n';
    });
    for (const auto& t : report.tables) {
        io::CsvWriter w(dir / (t.name + ".csv"), t.header);
        for (const auto& r : t.rows) w.row(r);
    }
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- entropy

std::vector<LayerEntropyStats> entropy_report(const ScoreDump& dump, double tail) {
    if (!(tail > 0.0 && tail <= 0.5)) throw ConfigError("tail fraction must lie in (0, 0.5]");
    if (dump.layers.empty()) throw InsufficientDataError("entropy report: no layers in the score dump");
    std::vector<LayerEntropyStats> out;
    for (const auto& layer : dump.layers) {
        if (layer.tokens() == 0)
            throw InsufficientDataError("entropy report: layer " + std::to_string(layer.layer_id) + " has no tokens");
        const Tensor h = normalized_entropy(layer);
        std::vector<double> sorted(h.data().begin(), h.data().end());
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        const auto k = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::ceil(tail * static_cast<double>(n) - 1e-9)), 1, n);
        LayerEntropyStats s;
        s.layer_id = layer.layer_id;
        s.tokens = n;
        s.bottom_mean = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0) /
                        static_cast<double>(k);
        s.top_mean = std::accumulate(sorted.end() - static_cast<std::ptrdiff_t>(k), sorted.end(), 0.0) /
                     static_cast<double>(k);
        s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(n);
        s.bottom_quantile = nearest_rank(sorted, tail);
        s.top_quantile = nearest_rank(sorted, 1.0 - tail);
        out.push_back(s);
    }
    return out;
}

std::vector<LayerEntropyStats> entropy_report(const Model& model, const Dataset& data, double tail) {
    if (data.size() == 0) throw InsufficientDataError("entropy report: empty dataset");
    return entropy_report(dump_model_scores(model, data, "model"), tail);
}

Table entropy_table(std::span<const LayerEntropyStats> stats) {
    Table t{"entropy_report", {"layer_id", "tokens", "bottom_mean", "mean", "top_mean", "bottom_quantile", "top_quantile"}, {}};
    for (const auto& s : stats)
        t.rows.push_back({std::to_string(s.layer_id), std::to_string(s.tokens), format_double(s.bottom_mean),
                          format_double(s.mean), format_double(s.top_mean), format_double(s.bottom_quantile),
                          format_double(s.top_quantile)});
    return t;
}

// ----------------------------------------------------------- perturbation

namespace {

std::size_t total(const std::vector<std::size_t>& v) { return std::accumulate(v.begin(), v.end(), std::size_t{0}); }

}  // namespace

PerturbationOutcome perturbation_experiment(const Model& model, const Dataset& data, const PerturbationConfig& config) {
    if (config.n_repeats == 0) throw ConfigError("n_repeats must be positive");
    EvalOptions base_opts;
    base_opts.batch_size = config.batch_size;
    const double baseline = evaluate(model, data, base_opts).value;

    const std::size_t R = config.n_repeats;
    std::vector<std::uint64_t> seeds(R);
    for (std::size_t r = 0; r < R; ++r) seeds[r] = derive_seed(config.seed, r);
    std::vector<double> unc(R), ctl(R);
    PerturbationOutcome outcome;
    outcome.uncertain_counts.assign(R, 0);
    outcome.control_counts.assign(R, 0);
    parallel_for(2 * R, config.threads, [&](std::size_t job) {
        const std::size_t r = job / 2;
        EvalOptions o = base_opts;
        o.perturb = job % 2 == 0 ? PerturbMode::uncertain : PerturbMode::control;
        o.perturb_h_star = config.h_star;
        o.perturb_seed = seeds[r];
        o.perturb_layers = config.layers;
        const auto res = evaluate(model, data, o);
        (job % 2 == 0 ? unc : ctl)[r] = res.value;
        (job % 2 == 0 ? outcome.uncertain_counts : outcome.control_counts)[r] = total(res.perturbed);
    });

    auto& rep = outcome.report;
    rep.id = "perturbation";
    rep.config = {{"dataset", data.id},
                  {"n_repeats", std::to_string(R)},
                  {"seed", std::to_string(config.seed)},
                  {"h_star", config.h_star ? format_double(*config.h_star) : "per-layer"},
                  {"metric", to_string(data.metric)}};
    std::string mask;
    for (bool b : config.layers) mask += b ? '1' : '0';
    rep.config["layers"] = mask.empty() ? "all" : mask;

    std::vector<double> d_unc(R), d_ctl(R);
    for (std::size_t r = 0; r < R; ++r) {
        d_unc[r] = unc[r] - baseline;
        d_ctl[r] = ctl[r] - baseline;
    }
    rep.add("baseline", seeds, std::vector<double>(R, baseline));
    rep.add("uncertain_random", seeds, unc);
    rep.add("control_random", seeds, ctl);
    rep.add("delta_uncertain", seeds, d_unc);
    rep.add("delta_control", seeds, d_ctl);

    Table plot{"fig1_perturbation", {"condition", "seed", "metric", "perturbed_tokens"}, {}};
    for (std::size_t r = 0; r < R; ++r) {
        plot.rows.push_back({"baseline", std::to_string(seeds[r]), format_double(baseline), "0"});
        plot.rows.push_back({"uncertain_random", std::to_string(seeds[r]), format_double(unc[r]),
                             std::to_string(outcome.uncertain_counts[r])});
        plot.rows.push_back({"control_random", std::to_string(seeds[r]), format_double(ctl[r]),
                             std::to_string(outcome.control_counts[r])});
    }
    rep.tables.push_back(std::move(plot));
    return outcome;
}

// --------------------------------------------------------- uncertain ratio

namespace {

void require_same_shape(const ModelConfig& a, const ModelConfig& b) {
    bool same = a.vocab_size == b.vocab_size && a.d_model == b.d_model && a.seq_len == b.seq_len &&
                a.head == b.head && a.layers.size() == b.layers.size();
    for (std::size_t l = 0; same && l < a.layers.size(); ++l) same = a.layers[l].n_experts == b.layers[l].n_experts;
    if (!same) throw ContractError("uncertain_ratio_tracking: checkpoints have different configurations");
}

double ratio_of(double after, double before) {
    if (before == 0.0) return after == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return after / before;
}

}  // namespace

UncertainRatio uncertain_ratio_tracking(const Model& before, const Model& after, const Dataset& data,
                                        std::optional<double> h_star, std::size_t batch_size) {
    require_same_shape(before.config(), after.config());
    const std::size_t L = before.n_layers();
    std::vector<double> thresholds(L);
    for (std::size_t l = 0; l < L; ++l) {
        if (h_star) {
            thresholds[l] = *h_star;
        } else if (auto h = before.moe(l).config().h_star) {
            thresholds[l] = *h;
        } else {
            throw ConfigError("uncertain_ratio_tracking: layer " + std::to_string(l) + " has no h_star");
        }
    }
    UncertainRatio out;
    auto fractions = [&](const Model& m, std::vector<double>& per_layer) {
        const auto h = collect_entropies(m, data, batch_size);
        std::size_t hit = 0, n = 0;
        for (std::size_t l = 0; l < L; ++l) {
            std::size_t c = 0;
            for (double v : h[l]) c += v >= thresholds[l];
            per_layer.push_back(h[l].empty() ? 0.0 : static_cast<double>(c) / static_cast<double>(h[l].size()));
            hit += c;
            n += h[l].size();
        }
        if (n == 0) throw InsufficientDataError("uncertain_ratio_tracking: empty dataset");
        return static_cast<double>(hit) / static_cast<double>(n);
    };
    out.before = fractions(before, out.before_per_layer);
    out.after = fractions(after, out.after_per_layer);
    out.ratio = ratio_of(out.after, out.before);
    return out;
}

// --------------------------------------------------------------- ablations

namespace {

std::map<std::string, std::string> train_snapshot(const TrainConfig& c, const Dataset& train_data,
                                                  const Dataset& eval_data, std::span<const std::uint64_t> seeds) {
    std::string s;
    for (auto v : seeds) s += (s.empty() ? "" : ";") + std::to_string(v);
    return {{"train_data", train_data.id},
            {"eval_data", eval_data.id},
            {"batch_size", std::to_string(c.batch_size)},
            {"learning_rate", format_double(c.learning_rate)},
            {"epochs", std::to_string(c.epochs)},
            {"warmup_fraction", format_double(c.warmup_fraction)},
            {"freeze_router", c.freeze_router ? "true" : "false"},
            {"scope", c.scope == TrainScope::experts ? "experts" : "all"},
            {"seeds", s}};
}

TrainConfig run_config(const RunSettings& s, std::uint64_t seed) {
    TrainConfig c = s.train;
    c.seed = seed;
    c.checkpoint_path.clear();
    c.step_csv_path.clear();
    c.trace_csv_path.clear();
    return c;
}

std::string join_k(std::span<const std::size_t> ks) {
    std::string s;
    for (auto k : ks) s += (s.empty() ? "" : ";") + std::to_string(k);
    return s;
}

}  // namespace

ExperimentReport topk_grid_ablation(const Model& base, const Dataset& train_data, const Dataset& eval_data,
                                    std::span<const std::size_t> train_ks, std::span<const std::size_t> eval_ks,
                                    const RunSettings& settings) {
    const auto& seeds = settings.seeds;
    const std::size_t S = seeds.size(), E = eval_ks.size();
    // values[(ti * S + si) * E + ei]
    std::vector<double> values(train_ks.size() * S * E);
    parallel_for(train_ks.size() * S, settings.threads, [&](std::size_t job) {
        const std::size_t ti = job / S, si = job % S;
        Model m = base.clone();
        m.set_top_k(train_ks[ti]);
        m.set_top_k_eval(0);
        auto res = train(m, train_data, run_config(settings, seeds[si]));
        EvalOptions o;
        o.batch_size = settings.eval_batch_size;
        for (std::size_t ei = 0; ei < E; ++ei) {
            res.checkpoint.model.set_top_k_eval(eval_ks[ei]);
            values[job * E + ei] = evaluate(res.checkpoint.model, eval_data, o).value;
        }
    });

    ExperimentReport rep;
    rep.id = "topk_grid";
    rep.config = train_snapshot(settings.train, train_data, eval_data, seeds);
    rep.config["method"] = to_string(settings.train.method);
    rep.config["train_ks"] = join_k(train_ks);
    rep.config["eval_ks"] = join_k(eval_ks);
    Table runs{"runs_topk", {"train_k", "eval_k", "seed", "metric"}, {}};
    Table grid{"topk_grid", {"eval_k"}, {}};
    for (auto k : train_ks) grid.header.push_back("train_k=" + std::to_string(k));
    std::vector<std::vector<std::string>> grid_rows(E);
    for (std::size_t ei = 0; ei < E; ++ei) grid_rows[ei].push_back(std::to_string(eval_ks[ei]));
    for (std::size_t ti = 0; ti < train_ks.size(); ++ti) {
        for (std::size_t ei = 0; ei < E; ++ei) {
            std::vector<double> v(S);
            for (std::size_t si = 0; si < S; ++si) {
                v[si] = values[(ti * S + si) * E + ei];
                runs.rows.push_back({std::to_string(train_ks[ti]), std::to_string(eval_ks[ei]),
                                     std::to_string(seeds[si]), format_double(v[si])});
            }
            rep.add("train_k=" + std::to_string(train_ks[ti]) + "/eval_k=" + std::to_string(eval_ks[ei]), seeds, v);
            grid_rows[ei].push_back(format_double(rep.conditions.back().stats.mean));
        }
    }
    grid.rows = std::move(grid_rows);
    rep.tables.push_back(std::move(grid));
    rep.tables.push_back(std::move(runs));
    return rep;
}

ExperimentReport inference_broadcast_ablation(std::span<const Model> checkpoints,
                                              std::span<const std::uint64_t> seeds, const Dataset& eval_data,
                                              std::size_t batch_size) {
    if (checkpoints.size() != seeds.size()) throw ContractError("one seed label per checkpoint expected");
    std::vector<double> off, on;
    EvalOptions o;
    o.batch_size = batch_size;
    for (const auto& ck : checkpoints) {
        Model m = ck.clone();
        m.set_broadcast_at_inference(false);
        off.push_back(evaluate(m, eval_data, o).value);
        m.set_broadcast_at_inference(true);
        on.push_back(evaluate(m, eval_data, o).value);
    }
    ExperimentReport rep;
    rep.id = "inference_broadcast";
    rep.config = {{"eval_data", eval_data.id}, {"checkpoints", std::to_string(checkpoints.size())}};
    std::vector<std::uint64_t> s(seeds.begin(), seeds.end());
    rep.add("top_k", s, off);
    rep.add("broadcast", s, on);
    return rep;
}

ExperimentReport h_star_sweep(const Model& base, const Dataset& train_data, const Dataset& eval_data,
                              std::span<const double> h_values, std::size_t max_num_slots,
                              const RunSettings& settings) {
    const auto& seeds = settings.seeds;
    const std::size_t S = seeds.size(), H = h_values.size();
    // jobs 0..S-1 are the standard baselines, then (h, seed) pairs
    std::vector<double> values(S + H * S);
    parallel_for(values.size(), settings.threads, [&](std::size_t job) {
        const std::size_t si = job % S;
        TrainConfig c = run_config(settings, seeds[si]);
        if (job < S) {
            c.method = Method::standard;
        } else {
            c.method = Method::gw;
            c.h_star_source = HStarSource::fixed_value(h_values[job / S - 1]);
            c.max_num_slots = max_num_slots;
        }
        auto res = train(base, train_data, c);
        EvalOptions o;
        o.batch_size = settings.eval_batch_size;
        values[job] = evaluate(res.checkpoint.model, eval_data, o).value;
    });

    ExperimentReport rep;
    rep.id = "hstar_sweep";
    rep.config = train_snapshot(settings.train, train_data, eval_data, seeds);
    rep.config["max_num_slots"] = std::to_string(max_num_slots);
    std::string hs;
    for (double h : h_values) hs += (hs.empty() ? "" : ";") + format_double(h);
    rep.config["h_values"] = hs;
    const std::vector<double> baseline(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(S));
    rep.add("standard", seeds, baseline);
    Table t{"fig5_hstar_sweep", {"h_star", "seed", "metric", "baseline_metric"}, {}};
    for (std::size_t hi = 0; hi < H; ++hi) {
        std::vector<double> v(values.begin() + static_cast<std::ptrdiff_t>(S * (hi + 1)),
                              values.begin() + static_cast<std::ptrdiff_t>(S * (hi + 2)));
        for (std::size_t si = 0; si < S; ++si)
            t.rows.push_back({format_double(h_values[hi]), std::to_string(seeds[si]), format_double(v[si]),
                              format_double(baseline[si])});
        rep.add("h_star=" + format_double(h_values[hi]), seeds, std::move(v));
    }
    rep.tables.push_back(std::move(t));
    return rep;
}

ExperimentReport method_comparison(const Model& base, const Dataset& train_data, const Dataset& eval_data,
                                   const RunSettings& settings, const HStarSource& h_star,
                                   std::optional<std::size_t> max_num_slots, std::vector<Model>* trained_standard,
                                   std::vector<Model>* trained_gw) {
    const auto& seeds = settings.seeds;
    const std::size_t S = seeds.size();
    std::vector<std::optional<TrainResult>> results(2 * S);
    std::vector<double> values(2 * S);
    parallel_for(2 * S, settings.threads, [&](std::size_t job) {
        TrainConfig c = run_config(settings, seeds[job % S]);
        if (job < S) {
            c.method = Method::standard;
        } else {
            c.method = Method::gw;
            c.h_star_source = h_star;
            c.max_num_slots = max_num_slots;
        }
        results[job] = train(base, train_data, c);
        EvalOptions o;
        o.batch_size = settings.eval_batch_size;
        values[job] = evaluate(results[job]->checkpoint.model, eval_data, o).value;
    });

    ExperimentReport rep;
    rep.id = "method_comparison";
    rep.config = train_snapshot(settings.train, train_data, eval_data, seeds);
    rep.config["h_star"] = h_star.kind == HStarSource::Kind::fixed ? format_double(h_star.value)
                                                                   : "calibrate@" + format_double(h_star.quantile);
    rep.config["max_num_slots"] = max_num_slots ? std::to_string(*max_num_slots) : "default";
    rep.add("standard", seeds, std::vector<double>(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(S)));
    rep.add("gw", seeds, std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(S), values.end()));
    Table runs{"runs_method", {"method", "seed", "metric", "final_loss", "broadcast_total", "max_num_slots"}, {}};
    for (std::size_t job = 0; job < 2 * S; ++job) {
        const auto& m = results[job]->metrics;
        runs.rows.push_back({job < S ? "standard" : "gw", std::to_string(seeds[job % S]), format_double(values[job]),
                             format_double(m.epoch_loss.back()), std::to_string(total(m.broadcast_totals)),
                             std::to_string(m.max_num_slots)});
    }
    rep.tables.push_back(std::move(runs));
    for (std::size_t job = 0; job < 2 * S; ++job) {
        auto* sink = job < S ? trained_standard : trained_gw;
        if (sink) sink->push_back(std::move(results[job]->checkpoint.model));
    }
    return rep;
}

// ---------------------------------------------------------- token report

std::string token_label(int token, TaskId task) {
    if (task == TaskId::char_lm || task == TaskId::byte_classification) {
        if (token >= 33 && token < 127) return std::string(1, static_cast<char>(token));
        if (token == ' ') return "<sp>";
        if (token == '\n') return "<nl>";
        std::ostringstream ss;
        ss << "0x" << std::hex << (token & 0xFF);
        return ss.str();
    }
    return std::to_string(token);
}

BroadcastTokenTable broadcast_token_report(const std::vector<std::vector<int>>& per_layer, HeadType head,
                                           TaskId task, std::size_t top_n) {
    if (per_layer.empty()) throw ContractError("broadcast_token_report: no layer traces recorded");
    std::vector<int> stream;
    for (const auto& l : per_layer) stream.insert(stream.end(), l.begin(), l.end());
    const std::vector<bool> mask(stream.size(), true);
    BroadcastTokenTable out;
    out.part = head == HeadType::classification ? "encoder" : "decoder";
    for (const auto& [tok, count] : token_frequency_table(stream, mask, top_n))
        out.rows.push_back({tok, token_label(tok, task), count});
    return out;
}

std::vector<std::vector<int>> read_broadcast_tokens(const fs::path& trace_csv) {
    std::ifstream in(trace_csv);
    if (!in) throw ContractError("trace CSV not found: " + trace_csv.string());
    std::string line;
    if (!std::getline(in, line)) throw ContractError("trace CSV is empty: " + trace_csv.string());
    const auto header = io::split_csv_line(line);
    auto col = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError("trace CSV lacks column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto c_layer = col("layer_id"), c_mode = col("mode"), c_token = col("token_id");
    std::vector<std::vector<int>> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = io::split_csv_line(line);
        if (cells.size() != header.size())
            throw FormatError("trace CSV line " + std::to_string(lineno) + ": wrong number of cells");
        if (cells[c_mode] != "broadcast") continue;
        const auto layer = static_cast<std::size_t>(std::stoul(cells[c_layer]));
        if (out.size() <= layer) out.resize(layer + 1);
        out[layer].push_back(std::stoi(cells[c_token]));
    }
    if (out.empty()) out.resize(1);
    return out;
}

Table token_table(const BroadcastTokenTable& table) {
    Table t{table.part == "encoder" ? "fig4_broadcast_tokens" : "fig3_broadcast_tokens", {"rank", "token", "label", "count"}, {}};
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        t.rows.push_back({std::to_string(i + 1), std::to_string(r.token), r.label, std::to_string(r.count)});
    }
    return t;
}

}  // namespace gwmoe
