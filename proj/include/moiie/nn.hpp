#pragma once

#include <string>
#include <vector>

#include "moiie/data.hpp"
#include "moiie/tape.hpp"

namespace moiie {

// Named handle used to enumerate model parameters (optimizer state,
// checkpoints, freezing).
struct ParamRef {
    std::string name;
    Tensor* tensor = nullptr;
};

// Two affine maps with GeLU between, hidden width 4d. Used for the dense
// transformer blocks; experts are copies of the same structure.
struct FfnParams {
    Tensor w1, b1, w2, b2;

    void init(int64_t d, Dtype dt, uint64_t seed);
    void collect(const std::string& prefix, std::vector<ParamRef>& out);
    int64_t param_count() const;
    void copy_from(const FfnParams& src);  // bitwise

    // x: [n, d] -> [n, d]; residual is added by the caller.
    Value forward(Tape& t, Value x, bool train);
};

// Pre-norm causal multi-head self-attention with residual connection.
struct AttentionParams {
    Tensor norm_gain;
    Tensor wq, wk, wv, wo;

    void init(int64_t d, Dtype dt, uint64_t seed);
    void collect(const std::string& prefix, std::vector<ParamRef>& out);

    Value forward(Tape& t, Value x, int n_heads, int64_t batch, int64_t seq, bool train);
};

}  // namespace moiie
