#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "moiie/tensor.hpp"

namespace moiie {

// Handle to a node on a Tape.
struct Value {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode differentiation over dense tensors. Operations append to
// the tape in execution order, so the record is topologically sorted by
// construction; backward() replays it once in reverse. Taped tensors are
// never mutated in place. A tape owns no shared state, so independent
// tapes can live on independent workers.
class Tape {
  public:
    explicit Tape(Dtype dtype) : dtype_(dtype) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Dtype dtype() const { return dtype_; }

    // --- leaves ----------------------------------------------------------
    // Trainable parameter leaf: gradients accumulate directly into the
    // external tensor's grad buffer during backward().
    Value param(Tensor& external, bool trainable = true);
    // Owned leaf; requires_grad only when probing inputs.
    Value input(Tensor t, bool requires_grad = false);
    Value constant(Tensor t) { return input(std::move(t), false); }

    // --- primitives -------------------------------------------------------
    Value matmul(Value a, Value b);     // [m,k]·[k,n] -> [m,n]
    Value matmul_nt(Value a, Value b);  // [m,k]·[n,k]^T -> [m,n]
    Value add(Value a, Value b);        // same shape
    Value mul(Value a, Value b);        // elementwise, same shape
    Value add_bias(Value a, Value bias);  // [m,n] + [n]
    Value scale(Value a, double c);
    Value scale_by(Value a, Value s);  // s is a scalar node
    Value gelu(Value a);
    Value rms_norm(Value a, Value gain, double eps = 1e-5);  // normalizes last axis
    Value embedding(Value table, std::vector<int32_t> ids);  // [V,d], ids -> [n,d]
    Value slice_rows(Value a, int64_t begin, int64_t end);
    Value concat_rows(const std::vector<Value>& parts);
    Value gather_rows(Value a, std::vector<int32_t> rows);
    // out[dst_rows[i], :] += src[i, :]  (out starts at zero)
    Value scatter_rows(Value src, std::vector<int32_t> dst_rows, int64_t total_rows);
    // out[dst_rows[i], :] += w[i] * src[i, :]
    Value scatter_rows_scaled(Value src, Value w, std::vector<int32_t> dst_rows, int64_t total_rows);
    // out[r, j] = a[r, idx[r*k + j]]
    Value gather_per_row(Value a, std::vector<int32_t> idx, int64_t k);
    Value gather_elems(Value a, std::vector<int64_t> flat_indices);  // rank-1 result
    Value softmax(Value a, int axis);
    Value sum(Value a);   // scalar
    Value mean(Value a);  // scalar
    // Mean negative log-likelihood over positions with mask != 0.
    Value cross_entropy(Value logits, std::vector<int32_t> targets, std::vector<uint8_t> mask);
    // Fused causal multi-head self-attention over a padded batch laid out
    // as [batch*seq, d]; softmax(q·k^T/sqrt(dh)) with a per-sequence causal
    // mask, heads split along the feature axis.
    Value attention(Value q, Value k, Value v, int n_heads, int64_t batch, int64_t seq);

    // --- execution --------------------------------------------------------
    void backward(Value loss);  // loss must be scalar; callable once per tape

    const Tensor& value(Value v) const { return val_of(require(v)); }
    Tensor grad(Value v) const;  // copy; zeros if the node was never reached

    int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

    // Routing-selection fingerprint, used by grad_check to reject probes
    // that cross a top-K selection boundary.
    void note_selection(uint64_t h);
    uint64_t selection_signature() const { return selection_sig_; }

  private:
    struct Node {
        Tensor val;             // owned value (empty when ext is set)
        Tensor* ext = nullptr;  // external leaf (parameter)
        std::vector<int32_t> inputs;
        std::function<void(Tape&, int32_t)> backward_fn;
        bool requires_grad = false;
    };

    int32_t require(Value v) const;
    const Tensor& val_of(int32_t id) const;
    Tensor& grad_target(int32_t id);            // grad buffer owner for node
    bool grad_present(int32_t id) const;
    void accumulate_grad(int32_t id, const Tensor& g);  // generic helper (same shape)

    Value emit(Tensor out, std::vector<int32_t> inputs, std::function<void(Tape&, int32_t)> bw,
               const char* op_name);
    bool any_requires_grad(const std::vector<int32_t>& ids) const;

    Dtype dtype_;
    std::vector<Node> nodes_;
    // parallel store of owned node values' gradient buffers
    std::vector<Tensor> grads_;
    bool ran_backward_ = false;
    uint64_t selection_sig_ = 1469598103934665603ull;  // FNV offset basis

    friend struct TapeOps;
};

}  // namespace moiie
