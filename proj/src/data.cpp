#include "gwmoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <unordered_map>

#include "gwmoe/autograd.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"

namespace gwmoe {

namespace fs = std::filesystem;

const char* to_string(TaskId task) {
    switch (task) {
        case TaskId::modular_arithmetic_tagging: return "modular-arithmetic-tagging";
        case TaskId::key_value_retrieval: return "key-value-retrieval";
        case TaskId::char_lm: return "char-lm";
        case TaskId::byte_classification: return "byte-classification";
    }
    return "?";
}

TaskId task_from_string(const std::string& s) {
    for (TaskId t : {TaskId::modular_arithmetic_tagging, TaskId::key_value_retrieval, TaskId::char_lm,
                     TaskId::byte_classification})
        if (s == to_string(t)) return t;
    throw ConfigError("unknown task '" + s + "'");
}

const char* to_string(Metric metric) {
    switch (metric) {
        case Metric::accuracy: return "accuracy";
        case Metric::exact_match: return "exact_match";
        case Metric::perplexity: return "perplexity";
    }
    return "?";
}

Metric metric_from_string(const std::string& s) {
    for (Metric m : {Metric::accuracy, Metric::exact_match, Metric::perplexity})
        if (s == to_string(m)) return m;
    throw ConfigError("unknown metric '" + s + "'");
}

void TaskSpec::validate() const {
    if (n_examples < 3) throw ConfigError("task: n_examples must be >= 3");
    if (seq_len < 1) throw ConfigError("task: seq_len must be >= 1");
    for (double f : {train_fraction, val_fraction, test_fraction})
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("task: split fractions must lie in [0,1]");
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
        throw ConfigError("task: split fractions must sum to 1");
    if (train_fraction <= 0.0) throw ConfigError("task: empty training split");
    switch (task) {
        case TaskId::modular_arithmetic_tagging:
            if (modulus < 2) throw ConfigError("task: modulus must be >= 2");
            if (window < 1) throw ConfigError("task: window must be >= 1");
            break;
        case TaskId::key_value_retrieval:
            if (n_groups < 1 || keys_per_group < 1 || n_values < 2)
                throw ConfigError("task: key-value sizes must be positive (n_values >= 2)");
            break;
        case TaskId::byte_classification:
            if (seq_len < 2) throw ConfigError("task: byte-classification needs seq_len >= 2");
            break;
        case TaskId::char_lm: break;
    }
}

std::vector<int> key_value_table(const TaskSpec& spec) {
    std::vector<int> table(spec.n_groups * spec.keys_per_group);
    for (std::size_t g = 0; g < spec.n_groups; ++g) {
        Rng rng(derive_seed(spec.table_seed, 0x6b76 + g));
        for (std::size_t j = 0; j < spec.keys_per_group; ++j)
            table[g * spec.keys_per_group + j] = static_cast<int>(rng.below(spec.n_values));
    }
    return table;
}

const std::string& builtin_corpus() {
    static const std::string text =
        "The river bends twice before it reaches the town. In spring the water rises over the "
        "stones and the children wait on the bridge to count the boats. Most of the boats carry "
        "wood, some carry grain, and once a year a painted barge brings the travelling players.\n"
        "The players set up their stage in the square by the well. They perform the same three "
        "stories every year, and every year the town pretends to be surprised by the endings. "
        "The baker sells small round cakes during the show, and the smith closes his shop early.\n"
        "When the players leave, the square is quiet again. The old men return to their benches "
        "and argue about the weather, the price of salt, and whether the river was higher when "
        "they were young. Nobody keeps records, so nobody ever wins the argument.\n"
        "In autumn the leaves fall into the water and drift past the mill. The miller says the "
        "wheel turns more slowly in autumn, though nobody else can tell the difference. His "
        "daughter keeps a notebook of the days the wheel stops, and she has filled four books.\n"
        "Winter is short here. Snow falls for a week or two, the bridge turns white, and the "
        "boats stay tied along the bank. Then the thaw comes, the river rises, and the children "
        "go back to the bridge to wait for the first boat of the year.\n";
    return text;
}

std::string load_text_corpus(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

Dataset empty_like(const TaskSpec& spec) {
    Dataset d;
    d.task = spec.task;
    d.seq_len = spec.seq_len;
    switch (spec.task) {
        case TaskId::modular_arithmetic_tagging:
            d.head = HeadType::next_token;
            d.metric = Metric::accuracy;
            d.vocab_size = spec.modulus;
            break;
        case TaskId::key_value_retrieval:
            d.head = HeadType::next_token;
            d.metric = Metric::exact_match;
            d.vocab_size = spec.n_groups * spec.keys_per_group + spec.n_values;
            break;
        case TaskId::char_lm:
            d.head = HeadType::next_token;
            d.metric = Metric::perplexity;
            d.vocab_size = 256;
            break;
        case TaskId::byte_classification:
            d.head = HeadType::classification;
            d.metric = Metric::accuracy;
            d.vocab_size = 256;
            d.n_classes = 2;
            break;
    }
    return d;
}

Example make_example(const TaskSpec& spec, const std::vector<int>& kv_table, const std::string& corpus, Rng& rng) {
    const std::size_t L = spec.seq_len;
    Example ex;
    ex.tokens.resize(L);
    switch (spec.task) {
        case TaskId::modular_arithmetic_tagging: {
            ex.targets.resize(L);
            for (auto& t : ex.tokens) t = static_cast<int>(rng.below(spec.modulus));
            for (std::size_t t = 0; t < L; ++t) {
                std::size_t sum = 0;
                for (std::size_t i = t + 1 > spec.window ? t + 1 - spec.window : 0; i <= t; ++i)
                    sum += static_cast<std::size_t>(ex.tokens[i]);
                ex.targets[t] = static_cast<int>(sum % spec.modulus);
            }
            break;
        }
        case TaskId::key_value_retrieval: {
            ex.targets.resize(L);
            const std::size_t n_keys = kv_table.size();
            for (std::size_t t = 0; t < L; ++t) {
                const auto key = static_cast<std::size_t>(rng.below(n_keys));
                ex.tokens[t] = static_cast<int>(key);
                ex.targets[t] = static_cast<int>(n_keys) + kv_table[key];
            }
            break;
        }
        case TaskId::char_lm: {
            ex.targets.resize(L);
            const std::size_t start = static_cast<std::size_t>(rng.below(corpus.size() - L));
            for (std::size_t t = 0; t < L; ++t) {
                ex.tokens[t] = static_cast<unsigned char>(corpus[start + t]);
                ex.targets[t] = static_cast<unsigned char>(corpus[start + t + 1]);
            }
            break;
        }
        case TaskId::byte_classification: {
            // label 1 iff more than half the bytes are >= 128; labels drawn uniformly.
            const int label = static_cast<int>(rng.below(2));
            const std::size_t half = L / 2;
            const std::size_t high = label ? half + 1 + static_cast<std::size_t>(rng.below(L - half))
                                           : static_cast<std::size_t>(rng.below(half + 1));
            for (std::size_t t = 0; t < L; ++t)
                ex.tokens[t] = static_cast<int>(t < high ? 128 + rng.below(128) : rng.below(128));
            rng.shuffle(std::span<int>(ex.tokens));
            ex.targets = {label};
            break;
        }
    }
    return ex;
}

}  // namespace

DatasetSplits generate(const TaskSpec& spec) {
    spec.validate();
    std::string corpus;
    if (spec.task == TaskId::char_lm) {
        corpus = spec.corpus_text.empty() ? builtin_corpus() : spec.corpus_text;
        if (corpus.size() <= spec.seq_len + 1) throw ConfigError("task: corpus shorter than seq_len + 1");
    }
    const std::vector<int> kv_table =
        spec.task == TaskId::key_value_retrieval ? key_value_table(spec) : std::vector<int>{};

    Rng rng(derive_seed(spec.seed, 0x64617461));
    std::vector<Example> all;
    std::set<std::vector<int>> seen;
    const std::size_t max_attempts = 50 * spec.n_examples + 1000;
    for (std::size_t attempt = 0; all.size() < spec.n_examples; ++attempt) {
        if (attempt >= max_attempts)
            throw ConfigError("task: cannot draw " + std::to_string(spec.n_examples) +
                              " distinct examples (only " + std::to_string(all.size()) + " found)");
        Example ex = make_example(spec, kv_table, corpus, rng);
        if (seen.insert(ex.tokens).second) all.push_back(std::move(ex));
    }

    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng split_rng(derive_seed(spec.seed, 0x73706c69));
    split_rng.shuffle(std::span<std::size_t>(order));

    const auto n = static_cast<double>(all.size());
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * n));
    const auto n_val = std::min(all.size() - n_train, static_cast<std::size_t>(std::llround(spec.val_fraction * n)));

    DatasetSplits out{empty_like(spec), empty_like(spec), empty_like(spec)};
    const std::string base = std::string(to_string(spec.task)) + "/seed" + std::to_string(spec.seed);
    out.train.id = base + "/train";
    out.val.id = base + "/val";
    out.test.id = base + "/test";
    for (std::size_t i = 0; i < order.size(); ++i) {
        Dataset& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
        dst.examples.push_back(all[order[i]]);
    }
    return out;
}

void write_dataset(const fs::path& path, const Dataset& data) {
    io::atomic_write(path, [&](std::ostream& out) {
        out << "# id=" << data.id << " task=" << to_string(data.task) << " head=" << to_string(data.head)
            << " metric=" << to_string(data.metric) << " seq_len=" << data.seq_len << " vocab=" << data.vocab_size
            << " classes=" << data.n_classes << '\n';
        for (const auto& ex : data.examples) {
            for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << (i ? " " : "") << ex.tokens[i];
            out << '\t';
            for (std::size_t i = 0; i < ex.targets.size(); ++i) out << (i ? " " : "") << ex.targets[i];
            out << '\n';
        }
    });
}

namespace {

std::vector<int> parse_ints(const std::string& s, const fs::path& path, std::size_t line_no) {
    std::vector<int> v;
    std::istringstream ss(s);
    std::string tok;
    while (ss >> tok) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoi(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad token '" + tok + "'");
        }
    }
    return v;
}

}  // namespace

Dataset read_dataset(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset " + path.string());
    Dataset d;
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ss(line.substr(1));
            std::string kv;
            while (ss >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) continue;
                const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
                if (k == "id") d.id = v;
                else if (k == "task") d.task = task_from_string(v);
                else if (k == "head") d.head = head_from_string(v);
                else if (k == "metric") d.metric = metric_from_string(v);
                else if (k == "seq_len") d.seq_len = std::stoul(v);
                else if (k == "vocab") d.vocab_size = std::stoul(v);
                else if (k == "classes") d.n_classes = std::stoul(v);
            }
            header = true;
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing TAB separator");
        Example ex{parse_ints(line.substr(0, tab), path, line_no), parse_ints(line.substr(tab + 1), path, line_no)};
        if (!header) throw DataError(path.string() + ": missing header line");
        if (ex.tokens.size() != d.seq_len)
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(d.seq_len) + " tokens");
        const std::size_t n_targets = d.head == HeadType::classification ? 1 : d.seq_len;
        if (ex.targets.size() != n_targets)
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(n_targets) + " labels");
        d.examples.push_back(std::move(ex));
    }
    if (!header) throw DataError(path.string() + ": missing header line");
    return d;
}

void write_score_dump(const fs::path& dir, const ScoreDump& dump) {
    fs::create_directories(dir);
    for (const auto& layer : dump.layers)
        io::save_tensor(dir / ("scores_layer" + std::to_string(layer.layer_id) + ".gwt"), layer.scores);
    Tensor ids({dump.token_ids.size()});
    for (std::size_t i = 0; i < dump.token_ids.size(); ++i) ids[i] = dump.token_ids[i];
    io::save_tensor(dir / "tokens.gwt", ids);
    io::atomic_write(dir / "manifest.txt", [&](std::ostream& out) {
        out << "model = " << dump.model_name << "\nlayers = " << dump.layers.size()
            << "\ntokens = " << dump.token_ids.size() << '\n';
    });
}

ScoreDump ingest_score_dump(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("score dump directory not found: " + dir.string());
    ScoreDump dump;
    if (fs::exists(dir / "manifest.txt")) dump.model_name = io::KeyValueConfig::load(dir / "manifest.txt").str("model", "");

    static const std::regex pattern(R"(scores_layer(\d+)\.gwt)");
    std::vector<std::pair<int, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern)) files.emplace_back(std::stoi(m[1].str()), entry.path());
    }
    if (files.empty()) throw InsufficientDataError("no scores_layer<id>.gwt files in " + dir.string());
    std::sort(files.begin(), files.end());

    for (const auto& [id, path] : files) {
        Tensor t = io::load_tensor(path);
        if (t.rank() != 2 || t.dim(1) == 0)
            throw DataError(path.filename().string() + ": expected a [tokens, N] tensor, got " + shape_str(t.shape()));
        const std::size_t n = t.dim(1);
        auto data = t.data();
        for (std::size_t r = 0; r < t.dim(0); ++r) {
            auto row = data.subspan(r * n, n);
            double sum = 0.0;
            for (double g : row) {
                if (!std::isfinite(g) || g < 0.0)
                    throw DataError(path.filename().string() + ": row " + std::to_string(r) +
                                    " has an entry outside [0,1]");
                sum += g;
            }
            const double err = std::abs(sum - 1.0);
            if (err > 1e-6)
                throw DataError(path.filename().string() + ": row " + std::to_string(r) + " sums to " +
                                io::format_double(sum));
            if (err > 1e-12)
                for (double& g : row) g /= sum;
        }
        dump.layers.push_back(RouterScores{t, id});
    }

    if (fs::exists(dir / "tokens.gwt")) {
        Tensor ids = io::load_tensor(dir / "tokens.gwt");
        for (double v : ids.data()) dump.token_ids.push_back(static_cast<int>(v));
        for (const auto& layer : dump.layers)
            if (layer.tokens() != dump.token_ids.size())
                throw DataError("scores_layer" + std::to_string(layer.layer_id) + ".gwt has " +
                                std::to_string(layer.tokens()) + " rows but the token stream has " +
                                std::to_string(dump.token_ids.size()));
    }
    return dump;
}

ScoreDump dump_model_scores(const Model& model, const Dataset& data, const std::string& model_name,
                            std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    const std::size_t n_layers = model.n_layers();
    std::vector<std::vector<double>> rows(n_layers);
    ScoreDump dump;
    dump.model_name = model_name;
    NoGradScope no_grad;
    for (std::size_t first = 0; first < data.size(); first += batch_size) {
        std::vector<std::size_t> idx(std::min(batch_size, data.size() - first));
        std::iota(idx.begin(), idx.end(), first);
        const auto tokens = batch_tokens(data, idx);
        ForwardOptions opts;
        opts.mode = Mode::eval;
        opts.batch_id = first / batch_size;
        const auto out = model.forward(tokens, opts);
        for (std::size_t l = 0; l < n_layers; ++l) {
            const auto s = out.traces[l].scores.data();
            rows[l].insert(rows[l].end(), s.begin(), s.end());
        }
        dump.token_ids.insert(dump.token_ids.end(), tokens.begin(), tokens.end());
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::size_t n = model.moe(l).config().n_experts;
        const std::size_t n_rows = rows[l].size() / n;
        dump.layers.push_back(RouterScores{Tensor({n_rows, n}, std::move(rows[l])), static_cast<int>(l)});
    }
    return dump;
}

std::vector<std::pair<int, std::size_t>> token_frequency_table(std::span<const int> stream,
                                                               const std::vector<bool>& mask, std::size_t top_n) {
    if (stream.size() != mask.size())
        throw ContractError("token_frequency_table: stream has " + std::to_string(stream.size()) +
                            " tokens but mask has " + std::to_string(mask.size()));
    std::unordered_map<int, std::size_t> counts;
    for (std::size_t i = 0; i < stream.size(); ++i)
        if (mask[i]) ++counts[stream[i]];
    std::vector<std::pair<int, std::size_t>> table(counts.begin(), counts.end());
    std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (top_n != 0 && table.size() > top_n) table.resize(top_n);
    return table;
}

std::vector<int> batch_tokens(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<int> out;
    out.reserve(indices.size() * data.seq_len);
    for (std::size_t i : indices) {
        const auto& ex = data.examples.at(i);
        out.insert(out.end(), ex.tokens.begin(), ex.tokens.end());
    }
    return out;
}

std::vector<int> batch_targets(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<int> out;
    for (std::size_t i : indices) {
        const auto& ex = data.examples.at(i);
        out.insert(out.end(), ex.targets.begin(), ex.targets.end());
    }
    return out;
}

}  // namespace gwmoe
