#include "moiie/grad_check.hpp"

#include <cmath>
#include <random>

namespace moiie {

namespace {

struct Eval {
    double loss;
    uint64_t signature;
};

Eval evaluate(const std::function<Value(Tape&)>& build_loss) {
    Tape tape(Dtype::F64);
    Value loss = build_loss(tape);
    return {tape.value(loss).item(), tape.selection_signature()};
}

}  // namespace

double grad_check(const std::function<Value(Tape&)>& build_loss, std::vector<GradCheckParam> params,
                  int probe_count, uint64_t seed) {
    if (params.empty()) throw ConfigError("grad_check: no parameters given");
    for (const auto& p : params) {
        if (!p.tensor) throw ConfigError("grad_check: null parameter tensor");
        if (p.tensor->dtype() != Dtype::F64)
            throw NumericError("grad_check requires float64 parameters (" + p.name + ")");
        p.tensor->zero_grad();
    }

    // Reference gradients from one taped backward pass.
    uint64_t base_sig;
    {
        Tape tape(Dtype::F64);
        Value loss = build_loss(tape);
        tape.backward(loss);
        base_sig = tape.selection_signature();
    }

    std::mt19937_64 rng(seed);
    double max_err = 0.0;
    for (int probe = 0; probe < probe_count; ++probe) {
        int resamples = 0;
        while (true) {
            const size_t pi = static_cast<size_t>(rng() % params.size());
            Tensor& theta = *params[pi].tensor;
            if (theta.numel() == 0) continue;
            const int64_t e = static_cast<int64_t>(rng() % static_cast<uint64_t>(theta.numel()));
            const double orig = theta.at(e);
            const double h = 1e-5 * std::max(1.0, std::abs(orig));

            theta.set(e, orig + h);
            const Eval plus = evaluate(build_loss);
            theta.set(e, orig - h);
            const Eval minus = evaluate(build_loss);
            theta.set(e, orig);

            if (plus.signature != base_sig || minus.signature != base_sig) {
                if (++resamples >= 10)
                    throw NumericError("grad_check: top-K selection set unstable around parameter '" +
                                       params[pi].name + "' after 10 re-samples");
                continue;
            }
            const double g_fd = (plus.loss - minus.loss) / (2.0 * h);
            const double g_tape = theta.grad_at(e);
            const double err =
                std::abs(g_tape - g_fd) / std::max({1.0, std::abs(g_tape), std::abs(g_fd)});
            max_err = std::max(max_err, err);
            break;
        }
    }
    return max_err;
}

}  // namespace moiie
