#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gwmoe/model.hpp"
#include "gwmoe/routing.hpp"

namespace gwmoe {

enum class TaskId { modular_arithmetic_tagging, key_value_retrieval, char_lm, byte_classification };
enum class Metric { accuracy, exact_match, perplexity };

const char* to_string(TaskId task);
TaskId task_from_string(const std::string& s);
const char* to_string(Metric metric);
Metric metric_from_string(const std::string& s);

struct TaskSpec {
    TaskId task = TaskId::key_value_retrieval;
    std::size_t n_examples = 1000;
    std::size_t seq_len = 16;
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;

    // modular-arithmetic-tagging: label_t = (x_{t-window+1} + ... + x_t) mod modulus
    std::size_t modulus = 7;
    std::size_t window = 3;

    // key-value-retrieval: n_groups sub-vocabularies of keys_per_group keys,
    // each group with its own key -> value table drawn from table_seed.
    std::size_t n_groups = 4;
    std::size_t keys_per_group = 16;
    std::size_t n_values = 16;
    std::uint64_t table_seed = 0;

    // char-lm: corpus text (empty = built-in sample)
    std::string corpus_text;

    void validate() const;
};

struct Example {
    std::vector<int> tokens;   // seq_len ids
    std::vector<int> targets;  // seq_len labels (next_token head) or 1 label (classification)
};

struct Dataset {
    std::string id;
    TaskId task = TaskId::key_value_retrieval;
    HeadType head = HeadType::next_token;
    Metric metric = Metric::accuracy;
    std::size_t seq_len = 0;
    std::size_t vocab_size = 0;
    std::size_t n_classes = 0;  // classification only
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    std::size_t token_count() const { return examples.size() * seq_len; }
};

struct DatasetSplits {
    Dataset train, val, test;
};

/// Pure function of the spec: same spec, same splits. Splits are disjoint
/// (duplicate examples are rejected before partitioning).
DatasetSplits generate(const TaskSpec& spec);

/// Key -> value table for the key-value task: value index of key k.
std::vector<int> key_value_table(const TaskSpec& spec);

/// A few paragraphs of English text used when no corpus file is given.
const std::string& builtin_corpus();
std::string load_text_corpus(const std::filesystem::path& path);

/// One example per line: space-separated input ids, TAB, space-separated labels.
/// A leading `# key=value ...` line carries the dataset header.
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

/// Router scores exported from a model (one [tokens, N] tensor per layer).
struct ScoreDump {
    std::string model_name;
    std::vector<RouterScores> layers;
    std::vector<int> token_ids;  // aligned with score rows
};

/// Writes scores_layer<id>.gwt, tokens.gwt and manifest.txt into `dir`.
void write_score_dump(const std::filesystem::path& dir, const ScoreDump& dump);

/// Reads every scores_layer<id>.gwt in `dir` (ascending id). Rows within 1e-6
/// of summing to 1 are renormalized; anything else is a DataError naming the row.
ScoreDump ingest_score_dump(const std::filesystem::path& dir);

/// Eval-mode router scores of `model` on `data`, one RouterScores per layer.
ScoreDump dump_model_scores(const Model& model, const Dataset& data, const std::string& model_name,
                            std::size_t batch_size = 32);

/// (token, count) for tokens where mask is true, descending count then
/// ascending token id. top_n == 0 keeps everything.
std::vector<std::pair<int, std::size_t>> token_frequency_table(std::span<const int> stream,
                                                               const std::vector<bool>& mask,
                                                               std::size_t top_n = 0);

/// Flattened tokens / labels of the examples at `indices`, in order.
std::vector<int> batch_tokens(const Dataset& data, std::span<const std::size_t> indices);
std::vector<int> batch_targets(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace gwmoe
