#include "moiie/model.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "rng.hpp"

namespace moiie {

namespace {
constexpr double kEmbedInitStd = 0.08;
constexpr char kMagic[4] = {'M', 'O', 'I', 'I'};
constexpr uint32_t kFormatVersion = 1;

uint64_t param_seed(uint64_t seed, const std::string& name) {
    uint64_t h = 1469598103934665603ull;
    for (char c : name) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    uint64_t s = seed ^ h;
    return rng::splitmix(s);
}
}  // namespace

const char* placement_name(Placement p) {
    switch (p) {
        case Placement::Dense: return "dense";
        case Placement::Interleaved: return "interleaved";
        case Placement::Full: return "full";
    }
    return "?";
}

Placement placement_from_name(const std::string& s) {
    if (s == "dense") return Placement::Dense;
    if (s == "interleaved") return Placement::Interleaved;
    if (s == "full") return Placement::Full;
    throw ConfigError("unknown placement '" + s + "' (expected dense|interleaved|full)");
}

const char* param_group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Connector: return "connector";
        case ParamGroup::PatchEmbedder: return "patch_embedder";
        case ParamGroup::Backbone: return "backbone";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (d < 1 || n_layers < 0 || n_heads < 1 || vocab_size < 2 || patch_dim < 1 || max_seq < 1)
        throw ConfigError("model dimensions must be positive");
    if (d % n_heads != 0) throw ConfigError("hidden size must divide evenly by n_heads");
    if (placement == Placement::Dense && moe.has_value())
        throw ConfigError("dense placement cannot carry a MoE config");
    if (placement != Placement::Dense && !moe.has_value())
        throw ConfigError("sparse placement requires a MoE config");
    if (moe) {
        // constructs and validates the layout
        (void)layout_for_variant(moe->variant, moe->experts_total, moe->balance, moe->top_k);
    }
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_params();
}

void Model::init_params() {
    const int64_t d = cfg_.d;
    const Dtype dt = cfg_.dtype;
    // weight matrices: variance-preserving 1/sqrt(fan_in); embeddings: fixed scale
    auto filled = [&](std::vector<int64_t> shape, const std::string& name, double std_override = 0.0) {
        Tensor t(std::move(shape), dt);
        const double stddev = std_override > 0.0 ? std_override : 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
        rng::fill_normal(t, stddev, param_seed(cfg_.seed, name));
        return t;
    };
    patch_embed_w_ = filled({cfg_.patch_dim, d}, "patch_embed.w");
    patch_embed_b_ = Tensor::zeros({d}, dt);
    conn_w1_ = filled({d, d}, "connector.fc1.w");
    conn_b1_ = Tensor::zeros({d}, dt);
    conn_w2_ = filled({d, d}, "connector.fc2.w");
    conn_b2_ = Tensor::zeros({d}, dt);
    tok_embed_ = filled({cfg_.vocab_size, d}, "tok_embed", kEmbedInitStd);
    pos_embed_ = filled({cfg_.max_seq, d}, "pos_embed", kEmbedInitStd);
    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int b = 0; b < static_cast<int>(cfg_.n_layers); ++b) {
        Block& blk = blocks_[static_cast<size_t>(b)];
        blk.attn.init(d, dt, param_seed(cfg_.seed, "block" + std::to_string(b) + ".attn"));
        blk.mlp_norm_gain = Tensor::full({d}, 1.0, dt);
        if (is_moe_block(b)) {
            MoeLayer layer;
            layer.variant = cfg_.moe->variant;
            layer.layout = layout_for_variant(cfg_.moe->variant, cfg_.moe->experts_total,
                                              cfg_.moe->balance, cfg_.moe->top_k);
            layer.init(d, dt, param_seed(cfg_.seed, "block" + std::to_string(b) + ".moe"));
            blk.moe = std::move(layer);
        } else {
            FfnParams ffn;
            ffn.init(d, dt, param_seed(cfg_.seed, "block" + std::to_string(b) + ".ffn"));
            blk.ffn = std::move(ffn);
        }
    }
    final_norm_gain_ = Tensor::full({d}, 1.0, dt);
    lm_head_ = filled({d, cfg_.vocab_size}, "lm_head");
}

bool Model::is_moe_block(int block) const {
    switch (cfg_.placement) {
        case Placement::Dense: return false;
        case Placement::Full: return true;
        case Placement::Interleaved: return block % 2 == 1;  // odd blocks sparse, block 0 dense
    }
    return false;
}

std::vector<int> Model::moe_blocks() const {
    std::vector<int> out;
    for (int b = 0; b < static_cast<int>(cfg_.n_layers); ++b)
        if (is_moe_block(b)) out.push_back(b);
    return out;
}

const ExpertLayout* Model::layout() const {
    for (const Block& b : blocks_)
        if (b.moe) return &b.moe->layout;
    return nullptr;
}

Value Model::embed_batch(Tape& t, const Batch& batch, bool train) {
    if (batch.seq_len > cfg_.max_seq)
        throw ShapeError("batch sequence length " + std::to_string(batch.seq_len) +
                         " exceeds max_seq " + std::to_string(cfg_.max_seq));
    const int64_t rows = batch.rows();
    Value x;
    if (!batch.text_rows.empty()) {
        Value txt = t.embedding(t.param(tok_embed_, train), batch.token_ids);
        x = t.scatter_rows(txt, batch.text_rows, rows);
    }
    if (!batch.image_rows.empty()) {
        if (batch.patch_features.cols() != cfg_.patch_dim)
            throw ShapeError("patch feature width does not match the model's patch_dim");
        Value pf = t.constant(batch.patch_features);
        Value pe = t.add_bias(t.matmul(pf, t.param(patch_embed_w_, train)), t.param(patch_embed_b_, train));
        Value h = t.gelu(t.add_bias(t.matmul(pe, t.param(conn_w1_, train)), t.param(conn_b1_, train)));
        Value ce = t.add_bias(t.matmul(h, t.param(conn_w2_, train)), t.param(conn_b2_, train));
        Value img = t.scatter_rows(ce, batch.image_rows, rows);
        x = x.valid() ? t.add(x, img) : img;
    }
    if (!x.valid()) throw ShapeError("empty batch");
    Value pos = t.embedding(t.param(pos_embed_, train), batch.pos_ids);
    return t.add(x, pos);
}

Model::ForwardResult Model::forward(Tape& t, const Batch& batch, bool train,
                                    const MoeForwardOptions* options) {
    ForwardResult res;
    res.trace.total_experts = cfg_.moe ? cfg_.moe->experts_total : 0;
    Value x = embed_batch(t, batch, train);
    for (int b = 0; b < static_cast<int>(cfg_.n_layers); ++b) {
        Block& blk = blocks_[static_cast<size_t>(b)];
        x = blk.attn.forward(t, x, static_cast<int>(cfg_.n_heads), batch.batch_size, batch.seq_len, train);
        Value h = t.rms_norm(x, t.param(blk.mlp_norm_gain, train));
        Value y;
        if (blk.moe) {
            MoeLayer::Output out = blk.moe->forward(t, h, batch.tags, b, &res.trace,
                                                    cfg_.moe->aux_mode, train, options);
            if (out.aux_valid) res.layer_aux.push_back(out.aux);
            res.skipped_routers += out.skipped_routers;
            res.last_block_decisions = std::move(out.decisions);
            y = out.y;
        } else {
            y = blk.ffn->forward(t, h, train);
        }
        x = t.add(x, y);
    }
    x = t.rms_norm(x, t.param(final_norm_gain_, train));
    res.logits = t.matmul(x, t.param(lm_head_, train));
    return res;
}

ModalitySequence Model::embed_multimodal(Tape& t, const Tensor& patch_features,
                                         const std::vector<int32_t>& text_ids, bool train) {
    const int64_t m = patch_features.numel() == 0 ? 0 : patch_features.rows();
    const int64_t n = static_cast<int64_t>(text_ids.size());
    if (m + n < 1) throw ShapeError("embed_multimodal: need at least one token");
    ModalitySequence seq;
    seq.image_tokens = m;
    seq.text_tokens = n;
    Value img, txt;
    if (m > 0) {
        if (patch_features.cols() != cfg_.patch_dim)
            throw ShapeError("embed_multimodal: patch feature width mismatch");
        Value pf = t.constant(patch_features.to(cfg_.dtype));
        Value pe = t.add_bias(t.matmul(pf, t.param(patch_embed_w_, train)), t.param(patch_embed_b_, train));
        Value h = t.gelu(t.add_bias(t.matmul(pe, t.param(conn_w1_, train)), t.param(conn_b1_, train)));
        img = t.add_bias(t.matmul(h, t.param(conn_w2_, train)), t.param(conn_b2_, train));
    }
    if (n > 0) txt = t.embedding(t.param(tok_embed_, train), text_ids);
    if (m > 0 && n > 0)
        seq.embeddings = t.concat_rows({img, txt});
    else
        seq.embeddings = m > 0 ? img : txt;
    seq.tags.assign(static_cast<size_t>(m), ModalityTag::Image);
    seq.tags.insert(seq.tags.end(), static_cast<size_t>(n), ModalityTag::Text);
    return seq;
}

std::vector<ParamRef> Model::parameters() {
    std::vector<ParamRef> out;
    out.push_back({"patch_embed.w", &patch_embed_w_});
    out.push_back({"patch_embed.b", &patch_embed_b_});
    out.push_back({"connector.fc1.w", &conn_w1_});
    out.push_back({"connector.fc1.b", &conn_b1_});
    out.push_back({"connector.fc2.w", &conn_w2_});
    out.push_back({"connector.fc2.b", &conn_b2_});
    out.push_back({"tok_embed", &tok_embed_});
    out.push_back({"pos_embed", &pos_embed_});
    for (size_t b = 0; b < blocks_.size(); ++b) {
        const std::string prefix = "block" + std::to_string(b);
        blocks_[b].attn.collect(prefix + ".attn", out);
        out.push_back({prefix + ".mlp_norm.g", &blocks_[b].mlp_norm_gain});
        if (blocks_[b].ffn) blocks_[b].ffn->collect(prefix + ".ffn", out);
        if (blocks_[b].moe) blocks_[b].moe->collect(prefix + ".moe", out);
    }
    out.push_back({"final_norm.g", &final_norm_gain_});
    out.push_back({"lm_head", &lm_head_});
    return out;
}

ParamGroup Model::group_of(const std::string& name) {
    if (name.rfind("connector.", 0) == 0) return ParamGroup::Connector;
    if (name.rfind("patch_embed.", 0) == 0) return ParamGroup::PatchEmbedder;
    return ParamGroup::Backbone;
}

std::vector<ParamRef> Model::parameters(ParamGroup g) {
    std::vector<ParamRef> out;
    for (ParamRef& p : parameters())
        if (group_of(p.name) == g) out.push_back(p);
    return out;
}

int64_t Model::param_count() {
    int64_t n = 0;
    for (const ParamRef& p : parameters()) n += p.tensor->numel();
    return n;
}

void Model::zero_grads() {
    for (ParamRef& p : parameters()) p.tensor->zero_grad();
}

FfnParams& Model::dense_ffn(int block) {
    if (!blocks_.at(static_cast<size_t>(block)).ffn)
        throw ConfigError("block " + std::to_string(block) + " has no dense FFN");
    return *blocks_[static_cast<size_t>(block)].ffn;
}

MoeLayer& Model::moe_layer(int block) {
    if (!blocks_.at(static_cast<size_t>(block)).moe)
        throw ConfigError("block " + std::to_string(block) + " has no MoE layer");
    return *blocks_[static_cast<size_t>(block)].moe;
}

AttentionParams& Model::attention(int block) { return blocks_.at(static_cast<size_t>(block)).attn; }

// --- checkpoint I/O -----------------------------------------------------------

namespace {

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u8(std::ostream& out, uint8_t v) { out.write(reinterpret_cast<const char*>(&v), 1); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u8(out, static_cast<uint8_t>(t.dtype()));
    write_u32(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(out, static_cast<uint32_t>(t.dim(i)));
    out.write(reinterpret_cast<const char*>(t.raw().data()), static_cast<std::streamsize>(t.raw().size()));
}

Tensor meta_scalar(double v) { return Tensor::scalar(v, Dtype::F64); }

}  // namespace

void Model::save_checkpoint(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint '" + path + "' for writing");
    out.write(kMagic, 4);
    write_u32(out, kFormatVersion);

    std::vector<std::pair<std::string, Tensor>> meta;
    meta.emplace_back("meta.d", meta_scalar(static_cast<double>(cfg_.d)));
    meta.emplace_back("meta.n_layers", meta_scalar(static_cast<double>(cfg_.n_layers)));
    meta.emplace_back("meta.n_heads", meta_scalar(static_cast<double>(cfg_.n_heads)));
    meta.emplace_back("meta.vocab_size", meta_scalar(static_cast<double>(cfg_.vocab_size)));
    meta.emplace_back("meta.patch_dim", meta_scalar(static_cast<double>(cfg_.patch_dim)));
    meta.emplace_back("meta.max_seq", meta_scalar(static_cast<double>(cfg_.max_seq)));
    meta.emplace_back("meta.placement", meta_scalar(static_cast<double>(cfg_.placement)));
    meta.emplace_back("meta.dtype", meta_scalar(static_cast<double>(cfg_.dtype)));
    meta.emplace_back("meta.seed",
                      Tensor::from({static_cast<double>(cfg_.seed >> 32),
                                    static_cast<double>(cfg_.seed & 0xFFFFFFFFull)},
                                   {2}, Dtype::F64));
    const bool has_moe = cfg_.moe.has_value();
    meta.emplace_back("meta.variant",
                      meta_scalar(has_moe ? static_cast<double>(cfg_.moe->variant) : 255.0));
    if (has_moe) {
        meta.emplace_back("meta.experts_total", meta_scalar(cfg_.moe->experts_total));
        meta.emplace_back("meta.top_k", meta_scalar(cfg_.moe->top_k));
        meta.emplace_back("meta.aux_mode", meta_scalar(static_cast<double>(cfg_.moe->aux_mode)));
        meta.emplace_back("meta.balance",
                          Tensor::from({cfg_.moe->balance.balanced ? 1.0 : 0.0,
                                        static_cast<double>(cfg_.moe->balance.vision),
                                        static_cast<double>(cfg_.moe->balance.language),
                                        static_cast<double>(cfg_.moe->balance.shared)},
                                       {4}, Dtype::F64));
    }
    for (const auto& [name, tensor] : meta) write_tensor(out, name, tensor);
    for (const ParamRef& p : parameters()) write_tensor(out, p.name, *p.tensor);
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Model Model::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    const uint32_t version = read_u32(in);
    if (version != kFormatVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));

    std::map<std::string, Tensor> entries;
    while (true) {
        uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 4);
        if (in.eof()) break;
        if (!in || name_len == 0 || name_len > 4096) throw IoError("corrupt checkpoint entry name");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint8_t dt = 0;
        in.read(reinterpret_cast<char*>(&dt), 1);
        if (dt > 1) throw IoError("corrupt checkpoint dtype tag");
        const uint32_t rank = read_u32(in);
        if (rank > 8) throw IoError("corrupt checkpoint rank");
        std::vector<int64_t> shape;
        for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(read_u32(in)));
        Tensor t(shape, static_cast<Dtype>(dt));
        in.read(reinterpret_cast<char*>(t.raw().data()), static_cast<std::streamsize>(t.raw().size()));
        if (!in) throw IoError("truncated checkpoint tensor '" + name + "'");
        if (!entries.emplace(std::move(name), std::move(t)).second)
            throw IoError("duplicate checkpoint tensor");
    }

    auto meta = [&](const std::string& key) -> const Tensor& {
        auto it = entries.find(key);
        if (it == entries.end()) throw IoError("checkpoint missing '" + key + "'");
        return it->second;
    };

    ModelConfig cfg;
    cfg.d = static_cast<int64_t>(meta("meta.d").item());
    cfg.n_layers = static_cast<int64_t>(meta("meta.n_layers").item());
    cfg.n_heads = static_cast<int64_t>(meta("meta.n_heads").item());
    cfg.vocab_size = static_cast<int64_t>(meta("meta.vocab_size").item());
    cfg.patch_dim = static_cast<int64_t>(meta("meta.patch_dim").item());
    cfg.max_seq = static_cast<int64_t>(meta("meta.max_seq").item());
    cfg.placement = static_cast<Placement>(static_cast<int>(meta("meta.placement").item()));
    cfg.dtype = static_cast<Dtype>(static_cast<int>(meta("meta.dtype").item()));
    const Tensor& seed_t = meta("meta.seed");
    cfg.seed = (static_cast<uint64_t>(seed_t.at(0)) << 32) | static_cast<uint64_t>(seed_t.at(1));
    const int variant_code = static_cast<int>(meta("meta.variant").item());
    if (variant_code != 255) {
        MoeConfig moe;
        moe.variant = static_cast<MoeVariant>(variant_code);
        moe.experts_total = static_cast<int>(meta("meta.experts_total").item());
        moe.top_k = static_cast<int>(meta("meta.top_k").item());
        moe.aux_mode = static_cast<AuxPoolMode>(static_cast<int>(meta("meta.aux_mode").item()));
        const Tensor& bal = meta("meta.balance");
        moe.balance = bal.at(0) != 0.0 ? BalanceSpec::make_balanced()
                                       : BalanceSpec::unbalanced(static_cast<int>(bal.at(1)),
                                                                 static_cast<int>(bal.at(2)),
                                                                 static_cast<int>(bal.at(3)));
        cfg.moe = moe;
    }

    Model model(cfg);
    size_t consumed = 0;
    for (const auto& [name, tensor] : entries)
        if (name.rfind("meta.", 0) == 0) ++consumed;
    for (ParamRef& p : model.parameters()) {
        auto it = entries.find(p.name);
        if (it == entries.end()) throw IoError("checkpoint missing tensor '" + p.name + "'");
        if (it->second.shape() != p.tensor->shape() || it->second.dtype() != p.tensor->dtype())
            throw IoError("checkpoint tensor '" + p.name + "' has mismatched shape or dtype");
        *p.tensor = it->second;
        ++consumed;
    }
    if (consumed != entries.size())
        throw IoError("checkpoint contains tensors unknown to this model configuration");
    return model;
}

Model Model::upcycled_from_dense(Model& dense, const MoeConfig& moe, Placement placement,
                                 uint64_t router_seed) {
    if (dense.cfg_.placement != Placement::Dense)
        throw ConfigError("upcycling requires a dense source model");
    if (placement == Placement::Dense) throw ConfigError("upcycling target must be sparse");
    ModelConfig cfg = dense.cfg_;
    cfg.placement = placement;
    cfg.moe = moe;
    Model sparse(cfg);

    // Copy every shared parameter bitwise, then seed each sparse block's
    // experts from that block's dense FFN.
    std::map<std::string, Tensor*> src;
    for (ParamRef& p : dense.parameters()) src[p.name] = p.tensor;
    for (ParamRef& p : sparse.parameters()) {
        auto it = src.find(p.name);
        if (it != src.end()) {
            *p.tensor = *it->second;
            p.tensor->clear_grad();
        }
    }
    for (int b : sparse.moe_blocks()) {
        const FfnParams& source = dense.dense_ffn(b);
        MoeLayer& layer = sparse.moe_layer(b);
        for (FfnParams& expert : layer.experts) expert.copy_from(source);
        for (size_t r = 0; r < layer.router_w.size(); ++r)
            rng::fill_normal(layer.router_w[r], 0.02,
                             mix_seed(router_seed, static_cast<uint64_t>(b), static_cast<uint64_t>(r)));
    }
    return sparse;
}

}  // namespace moiie
