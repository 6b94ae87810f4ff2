#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gwmoe/tensor.hpp"

namespace gwmoe {

/// Ordered record of differentiable operations.
///
/// Ops append to the tape installed on the current thread by TapeScope. With
/// no tape installed they run value-only, which is how evaluation avoids the
/// bookkeeping. backward() walks the records in exact reverse order.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    struct Record {
        std::string name;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };

    void record(std::string name, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

    /// Seeds d(loss)/d(loss) = 1 and runs every backward rule in reverse.
    /// Throws ContractError if loss is not a scalar produced on this tape.
    void backward(const Tensor& loss);

    bool backward_done() const noexcept { return backward_done_; }
    std::size_t size() const noexcept { return records_.size(); }
    const std::vector<Record>& records() const noexcept { return records_; }
    /// Names of records in the order backward visited them (last backward call).
    const std::vector<std::string>& visit_log() const noexcept { return visit_log_; }

    /// True if every record's inputs are leaves or outputs of earlier records.
    bool topologically_ordered() const;

    void clear();

private:
    std::vector<Record> records_;
    std::vector<std::string> visit_log_;
    bool backward_done_ = false;
};

/// Installs a tape as the current thread's recording target for its lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording (e.g. for detached entropy computation).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

/// Records `fn` for `out` if a tape is active and any input requires grad.
/// Returns true when the op was recorded.
bool record_op(const char* name, std::vector<Tensor> inputs, Tensor& out, Tape::BackwardFn fn);

/// True if a tape is active and any of `inputs` requires grad.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

}  // namespace gwmoe
