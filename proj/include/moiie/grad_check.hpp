#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moiie/tape.hpp"

namespace moiie {

struct GradCheckParam {
    std::string name;
    Tensor* tensor = nullptr;
};

// Compares taped gradients of `build_loss` against central finite
// differences with step h = 1e-5 * max(1, |theta|) on `probe_count`
// randomly chosen parameter entries; returns the maximum guarded
// relative error |g_tape - g_fd| / max(1, |g_tape|, |g_fd|).
//
// Requires float64 parameters. Probes whose perturbation flips a top-K
// routing selection (detected via the tape's selection signature) are
// re-sampled; after 10 consecutive unstable re-samples the check fails,
// naming the parameter.
double grad_check(const std::function<Value(Tape&)>& build_loss, std::vector<GradCheckParam> params,
                  int probe_count, uint64_t seed);

}  // namespace moiie
