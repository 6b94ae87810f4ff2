#include "gwmoe/autograd.hpp"

#include <unordered_set>

#include "gwmoe/errors.hpp"

namespace gwmoe {

namespace {
thread_local Tape* t_tape = nullptr;
}

Tape* active_tape() noexcept { return t_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(t_tape) { t_tape = &tape; }
TapeScope::~TapeScope() { t_tape = previous_; }

NoGradScope::NoGradScope() : previous_(t_tape) { t_tape = nullptr; }
NoGradScope::~NoGradScope() { t_tape = previous_; }

void Tape::record(std::string name, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
    records_.push_back(Record{std::move(name), std::move(inputs), std::move(output), std::move(fn)});
    backward_done_ = false;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    std::size_t end = records_.size();
    while (end > 0 && !records_[end - 1].output.same_as(loss)) --end;
    if (end == 0) throw ContractError("backward: loss was not produced on this tape");

    Tensor seed = loss;
    seed.grad_mut()[0] = 1.0;
    visit_log_.clear();
    for (std::size_t i = end; i-- > 0;) {
        auto& rec = records_[i];
        if (!rec.output.has_grad()) continue;  // not reachable from loss
        visit_log_.push_back(rec.name);
        rec.backward();
    }
    backward_done_ = true;
}

bool Tape::topologically_ordered() const {
    std::unordered_set<const void*> produced;
    std::unordered_set<const void*> outputs;
    for (const auto& rec : records_) outputs.insert(rec.output.id());
    for (const auto& rec : records_) {
        for (const auto& in : rec.inputs) {
            if (outputs.count(in.id()) && !produced.count(in.id())) return false;
        }
        produced.insert(rec.output.id());
    }
    return true;
}

void Tape::clear() {
    records_.clear();
    visit_log_.clear();
    backward_done_ = false;
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
    if (!t_tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

bool record_op(const char* name, std::vector<Tensor> inputs, Tensor& out, Tape::BackwardFn fn) {
    if (checked_mode()) require_finite(out.data(), name);
    if (!t_tape) return false;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return false;
    out.mark_differentiable();
    t_tape->record(name, std::move(inputs), out, std::move(fn));
    return true;
}

}  // namespace gwmoe
