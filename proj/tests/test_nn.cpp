#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "moiie/grad_check.hpp"
#include "moiie/model.hpp"
#include "test_helpers.hpp"

using namespace moiie;
using moiie::testing::max_abs_diff;
using moiie::testing::random_tensor;

TEST_SUITE_BEGIN("nn");

namespace {

ModelConfig small_config(Dtype dt = Dtype::F64) {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq = 32;
    cfg.seed = 7;
    cfg.dtype = dt;
    return cfg;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("multimodal embedding layout") {
    Model model(small_config());
    SUBCASE("image-first concatenation") {
        Tensor patches = random_tensor({16, kPatchDim}, 1, 0.4);
        std::vector<int32_t> ids(12, vocab::kPlus);
        Tape t(Dtype::F64);
        ModalitySequence seq = model.embed_multimodal(t, patches, ids, false);
        CHECK(t.value(seq.embeddings).rows() == 28);
        CHECK(seq.tags.size() == 28);
        for (int i = 0; i < 16; ++i) CHECK(seq.tags[static_cast<size_t>(i)] == ModalityTag::Image);
        for (int i = 16; i < 28; ++i) CHECK(seq.tags[static_cast<size_t>(i)] == ModalityTag::Text);
    }
    SUBCASE("image-only sequence") {
        Tensor patches = random_tensor({16, kPatchDim}, 2, 0.4);
        Tape t(Dtype::F64);
        ModalitySequence seq = model.embed_multimodal(t, patches, {}, false);
        CHECK(t.value(seq.embeddings).rows() == 16);
        CHECK(seq.text_tokens == 0);
    }
    SUBCASE("empty input is rejected") {
        Tape t(Dtype::F64);
        CHECK_THROWS_AS(model.embed_multimodal(t, Tensor(), {}, false), ShapeError);
    }
    SUBCASE("out-of-vocabulary id is rejected") {
        Tape t(Dtype::F64);
        CHECK_THROWS_AS(model.embed_multimodal(t, Tensor(), {static_cast<int32_t>(vocab::kSize)}, false),
                        ShapeError);
    }
}

TEST_CASE("connector is exactly two affine maps with GeLU between") {
    Model model(small_config());
    auto params = model.parameters(ParamGroup::Connector);
    CHECK(params.size() == 4);  // fc1.w fc1.b fc2.w fc2.b

    std::map<std::string, Tensor*> by_name;
    for (auto& p : params) by_name[p.name] = p.tensor;
    Tensor* pw = nullptr;
    Tensor* pb = nullptr;
    for (auto& p : model.parameters(ParamGroup::PatchEmbedder)) {
        if (p.name == "patch_embed.w") pw = p.tensor;
        if (p.name == "patch_embed.b") pb = p.tensor;
    }
    REQUIRE(pw != nullptr);

    // one patch through the model...
    Tensor patch = random_tensor({1, kPatchDim}, 9, 0.5);
    Tape t(Dtype::F64);
    ModalitySequence seq = model.embed_multimodal(t, patch, {}, false);
    const Tensor& got = t.value(seq.embeddings);

    // ...and the same patch evaluated by hand
    const int64_t d = model.config().d;
    std::vector<double> pe(static_cast<size_t>(d)), h(static_cast<size_t>(d)), out(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
        double acc = pb->at(j);
        for (int64_t i = 0; i < kPatchDim; ++i) acc += patch.at(i) * pw->at(i * d + j);
        pe[static_cast<size_t>(j)] = acc;
    }
    for (int64_t j = 0; j < d; ++j) {
        double acc = by_name["connector.fc1.b"]->at(j);
        for (int64_t i = 0; i < d; ++i) acc += pe[static_cast<size_t>(i)] * by_name["connector.fc1.w"]->at(i * d + j);
        h[static_cast<size_t>(j)] = gelu_ref(acc);
    }
    for (int64_t j = 0; j < d; ++j) {
        double acc = by_name["connector.fc2.b"]->at(j);
        for (int64_t i = 0; i < d; ++i) acc += h[static_cast<size_t>(i)] * by_name["connector.fc2.w"]->at(i * d + j);
        out[static_cast<size_t>(j)] = acc;
    }
    for (int64_t j = 0; j < d; ++j) CHECK(got.at(j) == doctest::Approx(out[static_cast<size_t>(j)]).epsilon(1e-12));
}

TEST_CASE("dense FFN block") {
    SUBCASE("zero weights produce zero output") {
        FfnParams f;
        f.init(8, Dtype::F64, 0);
        f.w1.fill(0.0);
        f.w2.fill(0.0);
        Tape t(Dtype::F64);
        Value y = f.forward(t, t.input(random_tensor({3, 8}, 4)), false);
        CHECK(max_abs_diff(t.value(y), Tensor::zeros({3, 8}, Dtype::F64)) == 0.0);
    }
    SUBCASE("hand-set one-dimensional FFN") {
        // hidden width 4d with only the first hidden unit wired
        FfnParams f;
        f.w1 = Tensor::from({1, 0, 0, 0}, {1, 4}, Dtype::F64);
        f.b1 = Tensor::zeros({4}, Dtype::F64);
        f.w2 = Tensor::from({2, 0, 0, 0}, {4, 1}, Dtype::F64);
        f.b2 = Tensor::zeros({1}, Dtype::F64);
        Tape t(Dtype::F64);
        Value y = f.forward(t, t.input(Tensor::from({1.0}, {1, 1}, Dtype::F64)), false);
        CHECK(t.value(y).item() == doctest::Approx(2.0 * gelu_ref(1.0)).epsilon(1e-14));
    }
    SUBCASE("gradient check") {
        FfnParams f;
        f.init(6, Dtype::F64, 31);
        Tensor x = random_tensor({4, 6}, 32, 0.8);
        const double err = grad_check(
            [&](Tape& t) { return t.mean(t.gelu(f.forward(t, t.input(x), true))); },
            {{"w1", &f.w1}, {"b1", &f.b1}, {"w2", &f.w2}, {"b2", &f.b2}}, 60, 77);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("attention block contracts") {
    const int64_t d = 16, T = 6;
    AttentionParams attn;
    attn.init(d, Dtype::F64, 13);

    SUBCASE("causality: position t ignores positions after t") {
        Tensor x = random_tensor({T, d}, 1);
        Tape t1(Dtype::F64), t2(Dtype::F64);
        Value y1 = attn.forward(t1, t1.input(x), 2, 1, T, false);
        Tensor xp = x;
        for (int64_t j = 0; j < d; ++j) xp.set(4 * d + j, xp.at(4 * d + j) + 3.0);  // perturb position 4
        Value y2 = attn.forward(t2, t2.input(xp), 2, 1, T, false);
        for (int64_t r = 0; r < 4; ++r)
            for (int64_t j = 0; j < d; ++j)
                CHECK(t1.value(y1).at(r * d + j) == t2.value(y2).at(r * d + j));
        // ...and the perturbed position itself must change
        CHECK(std::abs(t1.value(y1).at(4 * d) - t2.value(y2).at(4 * d)) > 0.0);
    }
    SUBCASE("sequence of one: attention reduces to the value path") {
        Tensor x = random_tensor({1, d}, 2);
        Tape t(Dtype::F64);
        Value y = attn.forward(t, t.input(x), 2, 1, 1, false);
        // softmax over a single key is 1, so out = x + wo @ wv @ rms(x)
        Tape tr(Dtype::F64);
        Value h = tr.rms_norm(tr.input(x), tr.param(attn.norm_gain, false));
        Value v = tr.matmul(h, tr.param(attn.wv, false));
        Value ref = tr.add(tr.input(x), tr.matmul(v, tr.param(attn.wo, false)));
        CHECK(max_abs_diff(t.value(y), tr.value(ref)) < 1e-13);
    }
    SUBCASE("zero output projection leaves the residual unchanged") {
        attn.wo.fill(0.0);
        Tensor x = random_tensor({T, d}, 3);
        Tape t(Dtype::F64);
        Value y = attn.forward(t, t.input(x), 2, 1, T, false);
        CHECK(max_abs_diff(t.value(y), x) == 0.0);
    }
    SUBCASE("gradient check through the whole block") {
        Tensor x = random_tensor({T, d}, 4, 0.7);
        std::vector<GradCheckParam> params{{"norm.g", &attn.norm_gain},
                                           {"wq", &attn.wq},
                                           {"wk", &attn.wk},
                                           {"wv", &attn.wv},
                                           {"wo", &attn.wo}};
        const double err = grad_check(
            [&](Tape& t) { return t.mean(t.gelu(attn.forward(t, t.input(x), 2, 1, T, true))); },
            params, 70, 51);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("placement rules") {
    ModelConfig cfg = small_config();
    cfg.n_layers = 4;
    SUBCASE("interleaved puts sparse layers at odd blocks") {
        cfg.placement = Placement::Interleaved;
        cfg.moe = MoeConfig{};
        Model m(cfg);
        CHECK(m.moe_blocks() == std::vector<int>{1, 3});
    }
    SUBCASE("full converts every block") {
        cfg.placement = Placement::Full;
        cfg.moe = MoeConfig{};
        Model m(cfg);
        CHECK(m.moe_blocks() == std::vector<int>{0, 1, 2, 3});
    }
    SUBCASE("dense has no routers and an empty trace") {
        Model m(cfg);
        Dataset ds = make_dataset({2, 2, 2}, 5);
        BatchStream stream(ds, 3, 1, Dtype::F64);
        Batch b = stream.next();
        Tape t(Dtype::F64);
        auto res = m.forward(t, b, false);
        CHECK(res.trace.empty());
        CHECK(res.layer_aux.empty());
    }
    SUBCASE("config invariants") {
        ModelConfig bad = small_config();
        bad.moe = MoeConfig{};
        CHECK_THROWS_AS(Model{bad}, ConfigError);  // dense + moe config
        ModelConfig bad2 = small_config();
        bad2.placement = Placement::Full;
        CHECK_THROWS_AS(Model{bad2}, ConfigError);  // sparse without moe config
        ModelConfig bad3 = small_config();
        bad3.n_heads = 3;
        CHECK_THROWS_AS(Model{bad3}, ConfigError);  // d not divisible
    }
}

TEST_CASE("parameter count formula for interleaved upcycling") {
    ModelConfig cfg = small_config();
    cfg.n_layers = 4;
    Model dense(cfg);
    const int64_t dense_count = dense.param_count();

    MoeConfig moe;  // 4 experts, top-2, balanced: L = 1
    Model sparse = Model::upcycled_from_dense(dense, moe, Placement::Interleaved, 3);

    const int64_t ffn_params = dense.dense_ffn(0).param_count();
    int64_t router_params = 0;
    for (const Tensor& w : sparse.moe_layer(1).router_w) router_params += w.numel();
    const int64_t n_moe = static_cast<int64_t>(sparse.moe_blocks().size());

    CHECK(sparse.param_count() == dense_count + n_moe * ((4 - 1) * ffn_params + router_params));
}

TEST_CASE("forward determinism in float64") {
    ModelConfig cfg = small_config();
    cfg.placement = Placement::Interleaved;
    cfg.moe = MoeConfig{};
    Model a(cfg), b(cfg);
    Dataset ds = make_dataset({3, 3, 3}, 77);
    BatchStream sa(ds, 4, 5, Dtype::F64), sb(ds, 4, 5, Dtype::F64);
    for (int i = 0; i < 2; ++i) {
        Tape ta(Dtype::F64), tb(Dtype::F64);
        auto ra = a.forward(ta, sa.next(), false);
        auto rb = b.forward(tb, sb.next(), false);
        CHECK(ta.value(ra.logits).values_equal(tb.value(rb.logits)));
    }
}

TEST_CASE("checkpoint round trip is bit exact") {
    const std::string path = std::filesystem::temp_directory_path() / "moiie_ckpt_test.moii";
    ModelConfig cfg = small_config(Dtype::F32);
    cfg.placement = Placement::Interleaved;
    cfg.moe = MoeConfig{};
    cfg.moe->experts_total = 4;
    Model m(cfg);
    m.save_checkpoint(path);
    Model loaded = Model::load_checkpoint(path);

    auto pa = m.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].tensor->values_equal(*pb[i].tensor));
    }
    CHECK(loaded.config().placement == Placement::Interleaved);
    CHECK(loaded.config().moe->variant == MoeVariant::MoIIE);
    std::filesystem::remove(path);

    SUBCASE("bad magic is rejected") {
        const std::string bad = std::filesystem::temp_directory_path() / "moiie_bad.moii";
        std::ofstream out(bad, std::ios::binary);
        out << "NOPE data";
        out.close();
        CHECK_THROWS_AS(Model::load_checkpoint(bad), IoError);
        std::filesystem::remove(bad);
    }
}

TEST_CASE("mixed sequence lengths without padding are rejected") {
    SyntheticExample a = gen_text_only_example(1);      // 4 tokens
    SyntheticExample b = gen_cross_modal_example(2);    // 19 tokens
    CHECK_THROWS_AS(make_batch({&a, &b}, Dtype::F64, /*allow_padding=*/false), ShapeError);
    Batch padded = make_batch({&a, &b}, Dtype::F64);
    CHECK(padded.seq_len == 19);
}

TEST_CASE("batch longer than max_seq is rejected") {
    ModelConfig cfg = small_config();
    cfg.max_seq = 8;
    Model m(cfg);
    SyntheticExample ex = gen_cross_modal_example(3);
    Batch b = make_batch({&ex}, Dtype::F64);
    Tape t(Dtype::F64);
    CHECK_THROWS_AS(m.forward(t, b, false), ShapeError);
}

TEST_CASE("full model gradient check (dense and sparse)") {
    Dataset ds = make_dataset({2, 2, 2}, 909);
    BatchStream stream(ds, 3, 2, Dtype::F64);
    Batch batch = stream.next();

    auto run = [&](ModelConfig cfg) {
        Model m(cfg);
        std::vector<GradCheckParam> params;
        for (ParamRef& p : m.parameters()) params.push_back({p.name, p.tensor});
        return grad_check(
            [&](Tape& t) {
                auto res = m.forward(t, batch, true);
                Value loss = t.cross_entropy(res.logits, batch.targets, batch.loss_mask);
                for (Value aux : res.layer_aux) loss = t.add(loss, t.scale(aux, 0.001));
                return loss;
            },
            params, 60, 606);
    };

    ModelConfig dense = small_config();
    CHECK(run(dense) <= 1e-4);

    ModelConfig sparse = small_config();
    sparse.placement = Placement::Interleaved;
    sparse.moe = MoeConfig{};
    CHECK(run(sparse) <= 1e-4);
}

TEST_SUITE_END();
