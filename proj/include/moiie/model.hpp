#pragma once

#include <optional>

#include "moiie/moe.hpp"

namespace moiie {

enum class Placement : uint8_t { Dense = 0, Interleaved = 1, Full = 2 };
const char* placement_name(Placement p);
Placement placement_from_name(const std::string& s);

struct MoeConfig {
    MoeVariant variant = MoeVariant::MoIIE;
    int experts_total = 4;
    BalanceSpec balance;
    int top_k = 2;
    AuxPoolMode aux_mode = AuxPoolMode::PerPool;
};

struct ModelConfig {
    int64_t d = 64;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t vocab_size = vocab::kSize;
    int64_t patch_dim = kPatchDim;
    int64_t max_seq = 48;
    Placement placement = Placement::Dense;
    std::optional<MoeConfig> moe;  // present iff placement != Dense
    uint64_t seed = 42;
    Dtype dtype = Dtype::F32;

    void validate() const;
};

enum class ParamGroup : uint8_t { Connector = 0, PatchEmbedder = 1, Backbone = 2 };
const char* param_group_name(ParamGroup g);

// Concatenated multimodal token embeddings X = [X_I, X_T] with per-position
// modality tags (image-first).
struct ModalitySequence {
    Value embeddings;  // [(m+n), d] on the tape that built it
    std::vector<ModalityTag> tags;
    int64_t image_tokens = 0;
    int64_t text_tokens = 0;
};

class Model {
  public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    bool is_moe_block(int block) const;
    std::vector<int> moe_blocks() const;
    // Layout of the sparse layers; nullptr for a dense model.
    const ExpertLayout* layout() const;

    struct ForwardResult {
        Value logits;  // [batch*seq, vocab]
        std::vector<Value> layer_aux;
        RoutingTrace trace;
        int skipped_routers = 0;
        std::vector<std::pair<int32_t, GateDecision>> last_block_decisions;
    };
    ForwardResult forward(Tape& t, const Batch& batch, bool train,
                          const MoeForwardOptions* options = nullptr);

    // Single-example modality embedding: patch embedder + two-layer GeLU
    // connector for images, table lookup for text, concatenated image-first.
    ModalitySequence embed_multimodal(Tape& t, const Tensor& patch_features,
                                      const std::vector<int32_t>& text_ids, bool train);

    std::vector<ParamRef> parameters();
    std::vector<ParamRef> parameters(ParamGroup g);
    static ParamGroup group_of(const std::string& param_name);
    int64_t param_count();
    void zero_grads();

    void save_checkpoint(const std::string& path);
    static Model load_checkpoint(const std::string& path);

    // Sparse upcycling: every expert at a sparse block starts as a bitwise
    // copy of the dense block's FFN; routers get fresh seeded 0.02-scale
    // random weights.
    static Model upcycled_from_dense(Model& dense, const MoeConfig& moe, Placement placement,
                                     uint64_t router_seed);

    FfnParams& dense_ffn(int block);
    MoeLayer& moe_layer(int block);
    AttentionParams& attention(int block);
    Tensor& lm_head() { return lm_head_; }

  private:
    struct Block {
        AttentionParams attn;
        Tensor mlp_norm_gain;
        std::optional<FfnParams> ffn;
        std::optional<MoeLayer> moe;
    };

    void init_params();
    Value embed_batch(Tape& t, const Batch& batch, bool train);

    ModelConfig cfg_;
    Tensor patch_embed_w_, patch_embed_b_;
    Tensor conn_w1_, conn_b1_, conn_w2_, conn_b2_;
    Tensor tok_embed_, pos_embed_;
    std::vector<Block> blocks_;
    Tensor final_norm_gain_;
    Tensor lm_head_;
};

}  // namespace moiie
