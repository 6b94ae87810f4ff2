#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "gwmoe/analysis.hpp"
#include "gwmoe/cli.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/training.hpp"

namespace py = pybind11;
using namespace gwmoe;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    py::array_t<double> a(t.shape());
    std::copy(t.data().begin(), t.data().end(), a.mutable_data());
    return a;
}

RouterScores scores_from(py::array_t<double, py::array::c_style | py::array::forcecast> a) {
    if (a.ndim() != 2) throw DimensionError("scores must be a 2-D array [tokens, experts]");
    const auto n = static_cast<std::size_t>(a.size());
    return RouterScores{Tensor({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                               std::vector<double>(a.data(), a.data() + n)),
                        0};
}

py::dict eval_dict(const EvalResult& r) {
    py::dict d;
    d["metric"] = to_string(r.metric);
    d["value"] = r.value;
    d["mean_loss"] = r.mean_loss;
    d["tokens"] = r.tokens;
    d["expert_calls"] = r.expert_calls;
    d["broadcast_count"] = r.broadcast_count;
    return d;
}

}  // namespace

PYBIND11_MODULE(_gwmoe, m) {
    m.doc() = "Entropy-gated broadcast mixture-of-experts core";

    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    // routing math
    m.def("entropy", [](py::array_t<double> s) { return to_numpy(entropy(scores_from(s))); },
          "Per-row routing entropy in nats.");
    m.def("normalized_entropy", [](py::array_t<double> s) { return to_numpy(normalized_entropy(scores_from(s))); });
    m.def("top_k", [](std::vector<double> row, std::size_t k, bool renormalize) {
        const auto sel = top_k_row(row, k, renormalize);
        return py::make_tuple(sel.indices, sel.weights);
    }, py::arg("row"), py::arg("k"), py::arg("renormalize") = false);
    m.def("calibrate_h_star", [](std::vector<double> samples, double q) { return calibrate_h_star(std::move(samples), q).h_star; },
          py::arg("samples"), py::arg("quantile") = 0.05);
    m.def("allocate_slots", [](std::vector<double> entropies, double h_star, std::size_t slots) {
        return allocate_slots(entropies, h_star, SlotBudget{slots});
    }, py::arg("entropies"), py::arg("h_star"), py::arg("max_num_slots"));

    // data
    py::class_<Dataset>(m, "Dataset")
        .def_readonly("id", &Dataset::id)
        .def_readonly("seq_len", &Dataset::seq_len)
        .def_readonly("vocab_size", &Dataset::vocab_size)
        .def("__len__", &Dataset::size)
        .def("token_count", &Dataset::token_count)
        .def("tokens", [](const Dataset& d) {
            std::vector<std::vector<int>> out;
            for (const auto& e : d.examples) out.push_back(e.tokens);
            return out;
        })
        .def("save", [](const Dataset& d, const std::filesystem::path& p) { write_dataset(p, d); });
    m.def("read_dataset", &read_dataset);
    m.def("generate", [](const std::string& task, std::size_t n_examples, std::size_t seq_len, std::uint64_t seed,
                         std::uint64_t table_seed) {
        TaskSpec s;
        s.task = task_from_string(task);
        s.n_examples = n_examples;
        s.seq_len = seq_len;
        s.seed = seed;
        s.table_seed = table_seed;
        auto sp = generate(s);
        return py::make_tuple(sp.train, sp.val, sp.test);
    }, py::arg("task") = "key-value-retrieval", py::arg("n_examples") = 1000, py::arg("seq_len") = 16,
       py::arg("seed") = 0, py::arg("table_seed") = 0, "Returns (train, val, test).");

    // model
    py::class_<Model>(m, "Model")
        .def_static("build", [](std::size_t vocab, std::size_t d_model, std::size_t n_layers, std::size_t n_heads,
                                std::size_t seq_len, std::size_t n_experts, std::size_t top_k, std::size_t d_ff,
                                double init_scale, std::uint64_t seed) {
            MoELayerConfig layer;
            layer.n_experts = n_experts;
            layer.top_k = top_k;
            layer.d_ff = d_ff;
            auto c = ModelConfig::uniform(vocab, d_model, n_layers, n_heads, seq_len, layer);
            c.init_scale = init_scale;
            return Model::build(c, seed);
        }, py::arg("vocab"), py::arg("d_model") = 64, py::arg("n_layers") = 2, py::arg("n_heads") = 4,
           py::arg("seq_len") = 16, py::arg("n_experts") = 8, py::arg("top_k") = 2, py::arg("d_ff") = 128,
           py::arg("init_scale") = 0.02, py::arg("seed") = 0)
        .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p).model; })
        .def("save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(p, self); })
        .def_property_readonly("n_layers", &Model::n_layers)
        .def("parameter_count", &Model::parameter_count)
        .def("h_star", [](const Model& self) {
            std::vector<std::optional<double>> out;
            for (std::size_t l = 0; l < self.n_layers(); ++l) out.push_back(self.moe(l).config().h_star);
            return out;
        })
        .def("set_top_k_eval", &Model::set_top_k_eval)
        .def("logits", [](const Model& self, std::vector<int> tokens) { return to_numpy(self.forward(tokens).logits); },
             "Eval-mode logits for batch*seq_len tokens.")
        .def("router_scores", [](const Model& self, std::vector<int> tokens) {
            std::vector<py::array_t<double>> out;
            for (const auto& t : self.forward(tokens).traces) out.push_back(to_numpy(t.scores));
            return out;
        }, "Eval-mode router probabilities, one [tokens, N] array per layer.");

    // training and evaluation
    m.def("calibrate", [](Model& model, const Dataset& data, double q, bool pooled) {
        std::vector<double> h;
        for (const auto& c : calibrate_from_base(model, data, q, 64, pooled)) h.push_back(c.h_star);
        return h;
    }, py::arg("model"), py::arg("data"), py::arg("quantile") = 0.05, py::arg("pooled") = false,
       "Writes per-layer h_star into the model and returns it.");
    m.def("train", [](const Model& base, const Dataset& data, const std::string& method, std::size_t epochs,
                      double lr, std::size_t batch_size, std::uint64_t seed, std::optional<double> h_star,
                      std::optional<std::size_t> max_num_slots, bool freeze_router) {
        TrainConfig c;
        c.method = method_from_string(method);
        c.epochs = epochs;
        c.learning_rate = lr;
        c.batch_size = batch_size;
        c.seed = seed;
        c.freeze_router = freeze_router;
        c.max_num_slots = max_num_slots;
        if (c.method == Method::gw)
            c.h_star_source = h_star ? HStarSource::fixed_value(*h_star) : HStarSource::calibrated();
        auto r = [&] {
            py::gil_scoped_release release;
            return train(base, data, c);
        }();
        py::dict metrics;
        metrics["epoch_loss"] = r.metrics.epoch_loss;
        metrics["broadcast_totals"] = r.metrics.broadcast_totals;
        metrics["max_num_slots"] = r.metrics.max_num_slots;
        metrics["h_star"] = r.metrics.h_star;
        return py::make_tuple(std::move(r.checkpoint.model), metrics);
    }, py::arg("base"), py::arg("data"), py::arg("method") = "standard", py::arg("epochs") = 3,
       py::arg("lr") = 3e-4, py::arg("batch_size") = 32, py::arg("seed") = 1, py::arg("h_star") = py::none(),
       py::arg("max_num_slots") = py::none(), py::arg("freeze_router") = true, "Returns (model, metrics).");
    m.def("evaluate", [](const Model& model, const Dataset& data, std::optional<std::string> perturb,
                         std::optional<double> perturb_h_star, std::uint64_t perturb_seed) {
        EvalOptions o;
        if (perturb) o.perturb = *perturb == "control" ? PerturbMode::control : PerturbMode::uncertain;
        o.perturb_h_star = perturb_h_star;
        o.perturb_seed = perturb_seed;
        return eval_dict(evaluate(model, data, o));
    }, py::arg("model"), py::arg("data"), py::arg("perturb") = py::none(), py::arg("perturb_h_star") = py::none(),
       py::arg("perturb_seed") = 0);
    m.def("perturbation_experiment", [](const Model& model, const Dataset& data, std::optional<double> h_star,
                                        std::size_t n_repeats, std::uint64_t seed) {
        PerturbationConfig c;
        c.h_star = h_star;
        c.n_repeats = n_repeats;
        c.seed = seed;
        const auto r = perturbation_experiment(model, data, c);
        py::dict d;
        for (const auto& cond : r.report.conditions) d[py::str(cond.name)] = cond.values;
        return d;
    }, py::arg("model"), py::arg("data"), py::arg("h_star") = py::none(), py::arg("n_repeats") = 5,
       py::arg("seed") = 0, "Per-repeat metric for each condition.");

    m.def("cli", [](std::vector<std::string> args) {
        args.insert(args.begin(), "gwmoe");
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
    }, "Runs a gwmoe subcommand in-process; returns (exit_code, stdout, stderr).");
}
