#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moiie/nn.hpp"

namespace moiie {

enum class MoeVariant : uint8_t { Vanilla = 0, Modality = 1, MoIIE = 2 };
enum class ExpertGroup : uint8_t { Text = 0, Image = 1, Shared = 2 };
// Whether the aux-loss pool factor is the router's candidate-pool size or
// the layer's total expert count (exposed for comparison).
enum class AuxPoolMode : uint8_t { PerPool = 0, TotalExperts = 1 };

const char* moe_variant_name(MoeVariant v);
MoeVariant moe_variant_from_name(const std::string& s);
char expert_group_letter(ExpertGroup g);

// Expert-count allocation request: balanced keeps |E^T| = |E^I| = L and
// |E^S| = 2L; unbalanced takes explicit (vision, language, shared) counts.
struct BalanceSpec {
    bool balanced = true;
    int vision = 0, language = 0, shared = 0;

    static BalanceSpec make_balanced() { return {}; }
    static BalanceSpec unbalanced(int vision, int language, int shared) {
        return {false, vision, language, shared};
    }
    std::string to_string() const;
    static BalanceSpec parse(const std::string& s);
    bool operator==(const BalanceSpec&) const = default;
};

// Global expert index order is [E^T | E^I | E^S].
struct ExpertLayout {
    int text_count = 0;    // |E^T|
    int image_count = 0;   // |E^I|
    int shared_count = 0;  // |E^S|
    int top_k = 1;
    BalanceSpec balance;

    int total() const { return text_count + image_count + shared_count; }
    ExpertGroup group_of(int global_id) const;
    std::vector<int> group_ids(ExpertGroup g) const;
    std::vector<int> text_pool() const;   // E^T then E^S
    std::vector<int> image_pool() const;  // E^I then E^S
    std::vector<int> full_pool() const;   // every expert
};

// MoIIE allocation per the balance spec; validates divisibility and that
// top_k fits in every candidate pool.
ExpertLayout build_expert_layout(int total, const BalanceSpec& balance, int top_k);
// Baselines at matched expert count: modality splits all experts half/half
// with no shared group; vanilla places all experts in one shared pool.
ExpertLayout build_modality_layout(int total, int top_k);
ExpertLayout build_vanilla_layout(int total, int top_k);
ExpertLayout layout_for_variant(MoeVariant v, int total, const BalanceSpec& balance, int top_k);

// Per-token gating result: exactly top_k (global expert id, weight) pairs,
// weights strictly positive and summing to 1.
struct GateDecision {
    std::vector<int32_t> expert_ids;
    std::vector<double> weights;
};

// Selects the k largest logits (ties toward the lower pool index) and
// normalizes with a softmax over only the selected logits.
GateDecision gate_topk(const Tensor& x, const Tensor& router_w, const std::vector<int>& pool, int k);
// Pool-local top-k selection on raw logits, shared by all gating paths.
std::vector<int32_t> topk_select(const std::vector<double>& logits, int k);

// --- routing trace ------------------------------------------------------------
struct RoutingTrace {
    struct Cell {
        int64_t activations = 0;
        double gate_sum = 0.0;
    };
    struct LayerTrace {
        std::vector<Cell> image, text;  // indexed by global expert id
        int64_t image_tokens = 0, text_tokens = 0;
    };
    std::map<int, LayerTrace> layers;  // key: block index
    int total_experts = 0;

    bool empty() const { return layers.empty(); }
    void merge(const RoutingTrace& other);
    LayerTrace& layer(int index);
};

// CSV schema: layer,modality,expert_id,expert_group,activation_fraction,mean_gate_prob
// with one row per (layer, modality, expert).
void write_trace_csv(const RoutingTrace& trace, const ExpertLayout& layout, std::ostream& out);
void write_trace_csv_file(const RoutingTrace& trace, const ExpertLayout& layout, const std::string& path);

// --- load-balance auxiliary loss ---------------------------------------------
// One record per router per forward pass: the post-selection gate matrix and
// which pool expert each slot chose.
struct GateRecord {
    Value weights;                 // [tokens, k], taped
    std::vector<int32_t> pool_idx; // tokens*k pool-local selections
    int pool_size = 0;
    int total_experts = 0;
    int64_t tokens = 0;
};

// pool_factor * sum_i mean[gate_i] * mean[active_i] per record, averaged over
// records with at least one routed token.
Value load_balance_loss(Tape& t, const std::vector<GateRecord>& records, AuxPoolMode mode);

// --- the sparse layer ---------------------------------------------------------
struct MoeForwardOptions {
    // Test fixture: bypass the routers and combine experts with the given
    // per-row decisions (row index into the flattened batch).
    const std::vector<std::pair<int32_t, GateDecision>>* injected_gates = nullptr;
    // Analysis override: force-route every token to one expert group,
    // capping top_k at the group size. Disables trace/aux accumulation.
    std::optional<ExpertGroup> forced_group;
};

// One sparse block: experts indexed by the layout, one router per modality
// (MoIIE, Modality) or a single shared router (Vanilla).
struct MoeLayer {
    MoeVariant variant = MoeVariant::MoIIE;
    ExpertLayout layout;
    std::vector<FfnParams> experts;
    std::vector<Tensor> router_w;  // [d, pool_size] each; no bias

    void init(int64_t d, Dtype dt, uint64_t seed);  // random experts + routers
    void collect(const std::string& prefix, std::vector<ParamRef>& out);
    int n_routers() const { return variant == MoeVariant::Vanilla ? 1 : 2; }
    std::vector<int> router_pool(int router_index) const;
    // Router serving a modality: Vanilla -> 0, otherwise Text -> 0, Image -> 1.
    int router_for(ModalityTag tag) const;

    struct Output {
        Value y;
        Value aux;  // scalar; valid only when aux_valid
        bool aux_valid = false;
        int skipped_routers = 0;
        std::vector<std::pair<int32_t, GateDecision>> decisions;  // (row, decision)
    };
    // x: [rows, d]; tags select each row's modality; Pad rows are skipped
    // entirely (zero output row, no trace contribution).
    Output forward(Tape& t, Value x, const std::vector<ModalityTag>& tags, int layer_index,
                   RoutingTrace* trace, AuxPoolMode aux_mode, bool train,
                   const MoeForwardOptions* options = nullptr);
};

}  // namespace moiie
