#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "moiie/trainer.hpp"
#include "test_helpers.hpp"

using namespace moiie;
using moiie::testing::random_tensor;

TEST_SUITE_BEGIN("trainer");

namespace {

namespace fs = std::filesystem;

RunConfig tiny_config(uint64_t seed = 5) {
    RunConfig cfg;
    cfg.model.d = 16;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.max_seq = 24;
    cfg.model.seed = seed;
    cfg.model.dtype = Dtype::F64;
    cfg.model.placement = Placement::Interleaved;
    cfg.train.total_steps = 6;
    cfg.train.batch_size = 4;
    cfg.train.log_every = 1;
    cfg.train_sizes = {10, 8, 8};
    cfg.eval_sizes = {6, 5, 5};
    cfg.data_seed = 99;
    return cfg;
}

std::string fresh_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("moiie_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("learning rate schedule") {
    const int64_t total = 1000;
    const double ratio = 0.03, base = 2.5e-3;
    const int64_t warmup = 30;  // ceil(0.03 * 1000)

    CHECK(lr_at(0, total, ratio, base) == 0.0);
    CHECK(lr_at(warmup, total, ratio, base) == doctest::Approx(base).epsilon(1e-15));
    CHECK(lr_at(warmup / 2, total, ratio, base) == doctest::Approx(base * 0.5).epsilon(1e-12));
    const int64_t mid = warmup + (total - warmup) / 2;
    CHECK(lr_at(mid, total, ratio, base) == doctest::Approx(base * 0.5).epsilon(1e-12));
    CHECK(std::abs(lr_at(total, total, ratio, base)) < 1e-12);
    CHECK_THROWS_AS(lr_at(-1, total, ratio, base), ConfigError);
    CHECK_THROWS_AS(lr_at(total + 1, total, ratio, base), ConfigError);
    // no warmup: starts at base
    CHECK(lr_at(0, total, 0.0, base) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("adamw update rules") {
    SUBCASE("first step moves by about lr in the gradient direction") {
        Tensor p = Tensor::from({0.0, 1.0}, {2}, Dtype::F64);
        p.ensure_grad();
        p.grad_as<double>()[0] = 0.37;
        p.grad_as<double>()[1] = -2.2;
        AdamW opt;
        opt.step({{ParamRef{"p", &p}, 1e-3}});
        CHECK(p.at(0) == doctest::Approx(-1e-3).epsilon(1e-6));
        CHECK(p.at(1) == doctest::Approx(1.0 + 1e-3).epsilon(1e-6));
    }
    SUBCASE("zero gradient leaves the parameter unchanged") {
        Tensor p = Tensor::from({0.5}, {1}, Dtype::F64);
        AdamW opt;  // no grad buffer at all
        opt.step({{ParamRef{"p", &p}, 1e-2}});
        CHECK(p.at(0) == 0.5);
        p.zero_grad();
        opt.step({{ParamRef{"p", &p}, 1e-2}});
        CHECK(p.at(0) == 0.5);
    }
    SUBCASE("non-finite gradient names the parameter") {
        Tensor p = Tensor::from({0.5}, {1}, Dtype::F64);
        p.ensure_grad();
        p.grad_as<double>()[0] = std::numeric_limits<double>::quiet_NaN();
        AdamW opt;
        CHECK_THROWS_WITH_AS(opt.step({{ParamRef{"embed.w", &p}, 1e-2}}),
                             doctest::Contains("embed.w"), NumericError);
    }
    SUBCASE("identical runs give bitwise-identical trajectories") {
        auto run = [&]() {
            Tensor p = random_tensor({8}, 3);
            AdamW opt;
            for (int s = 0; s < 5; ++s) {
                p.zero_grad();
                for (int64_t i = 0; i < 8; ++i)
                    p.grad_as<double>()[static_cast<size_t>(i)] = std::sin(p.at(i) + s);
                opt.step({{ParamRef{"p", &p}, 1e-2}});
            }
            return p;
        };
        CHECK(run().values_equal(run()));
    }
}

TEST_CASE("total loss composition") {
    ModelConfig mc;
    mc.d = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.max_seq = 24;
    mc.dtype = Dtype::F64;
    Dataset ds = make_dataset({3, 3, 3}, 17);
    BatchStream stream(ds, 4, 1, Dtype::F64);
    Batch batch = stream.next();

    SUBCASE("dense model has zero aux and total equals lm") {
        Model m(mc);
        Tape t(Dtype::F64);
        auto fwd = m.forward(t, batch, false);
        TotalLoss loss = total_loss(t, fwd, batch, 0.001);
        CHECK(loss.report.aux == 0.0);
        CHECK(loss.report.total == loss.report.lm);
    }
    SUBCASE("alpha zero keeps total equal to lm for sparse models") {
        mc.placement = Placement::Interleaved;
        mc.moe = MoeConfig{};
        Model m(mc);
        Tape t(Dtype::F64);
        auto fwd = m.forward(t, batch, false);
        TotalLoss loss = total_loss(t, fwd, batch, 0.0);
        CHECK(loss.report.aux > 0.0);
        CHECK(loss.report.total == loss.report.lm);
    }
    SUBCASE("uniform routing contributes alpha * top_k") {
        // fixture: one layer whose aux is the uniform anchor (= top_k = 2)
        Model m(mc);
        Tape t(Dtype::F64);
        auto fwd = m.forward(t, batch, false);
        Tensor w = Tensor::full({4, 2}, 0.5, Dtype::F64);
        GateRecord uniform{t.input(w), {0, 1, 2, 3, 0, 1, 2, 3}, 4, 4, 4};
        fwd.layer_aux.push_back(load_balance_loss(t, {uniform}, AuxPoolMode::PerPool));
        TotalLoss loss = total_loss(t, fwd, batch, 0.001);
        CHECK(loss.report.aux == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(loss.report.total - loss.report.lm == doctest::Approx(0.002).epsilon(1e-9));
    }
    SUBCASE("negative alpha is rejected") {
        Model m(mc);
        Tape t(Dtype::F64);
        auto fwd = m.forward(t, batch, false);
        CHECK_THROWS_AS(total_loss(t, fwd, batch, -0.1), ConfigError);
    }
}

TEST_CASE("stage 1 trains the connector only") {
    RunConfig cfg = tiny_config(21);
    const std::string out = fresh_dir("stage1");
    StageOutcome outcome = run_stage1(cfg, out);

    // reference: untouched initialization of the same dense config
    ModelConfig mc = cfg.model;
    mc.placement = Placement::Dense;
    mc.moe.reset();
    Model reference(mc);
    Model trained = Model::load_checkpoint(outcome.checkpoint);

    int connector_changed = 0;
    for (ParamRef& p : trained.parameters()) {
        Tensor* ref = nullptr;
        for (ParamRef& q : reference.parameters())
            if (q.name == p.name) ref = q.tensor;
        REQUIRE(ref != nullptr);
        if (Model::group_of(p.name) == ParamGroup::Connector) {
            connector_changed += p.tensor->values_equal(*ref) ? 0 : 1;
        } else {
            CHECK(p.tensor->values_equal(*ref));  // frozen groups are bitwise unchanged
        }
    }
    CHECK(connector_changed > 0);

    SUBCASE("metrics file exists with one row per step") {
        std::ifstream in(outcome.metrics_csv);
        REQUIRE(in.good());
        std::string line;
        int rows = -1;  // header
        while (std::getline(in, line)) ++rows;
        CHECK(rows == cfg.train.total_steps);
    }
    SUBCASE("marking other groups trainable in stage 1 is rejected") {
        RunConfig bad = cfg;
        bad.train.stage1_trainable = "all";
        CHECK_THROWS_AS(run_stage1(bad, out), ConfigError);
    }
}

TEST_CASE("connector gradients flow on cross-modal batches") {
    RunConfig cfg = tiny_config(22);
    ModelConfig mc = cfg.model;
    mc.placement = Placement::Dense;
    mc.moe.reset();
    Model m(mc);
    Dataset ds = make_dataset({4, 0, 0}, 3);
    BatchStream stream(ds, 4, 1, Dtype::F64);
    Batch batch = stream.next();
    Tape t(Dtype::F64);
    auto fwd = m.forward(t, batch, true);
    TotalLoss loss = total_loss(t, fwd, batch, 0.0);
    m.zero_grads();
    t.backward(loss.value);
    double grad_norm = 0;
    for (ParamRef& p : m.parameters(ParamGroup::Connector))
        for (int64_t i = 0; i < p.tensor->numel(); ++i)
            grad_norm += std::abs(p.tensor->grad_at(i));
    CHECK(grad_norm > 0.0);
}

TEST_CASE("stage 2 starts from the dense model and unfreezes everything") {
    RunConfig cfg = tiny_config(31);
    const std::string out = fresh_dir("stage2");
    StageOutcome s1 = run_stage1(cfg, out);

    StageOutcome moiie = run_stage2(cfg, MoeVariant::MoIIE, s1.checkpoint, out);
    StageOutcome dense = run_stage2(cfg, std::nullopt, s1.checkpoint, out);

    SUBCASE("step-0 loss matches the dense baseline (upcycling equivalence)") {
        REQUIRE(!moiie.logged.empty());
        REQUIRE(!dense.logged.empty());
        CHECK(moiie.logged[0].lm == doctest::Approx(dense.logged[0].lm).epsilon(1e-12));
    }
    SUBCASE("patch embedder trains at one tenth of the backbone rate") {
        bool checked = false;
        for (const LossReport& r : moiie.logged)
            if (r.lr_backbone > 0) {
                CHECK(r.lr_patch == doctest::Approx(0.1 * r.lr_backbone).epsilon(1e-12));
                checked = true;
            }
        CHECK(checked);
    }
    SUBCASE("every parameter group moves") {
        Model before = Model::load_checkpoint(s1.checkpoint);
        Model after = Model::load_checkpoint(moiie.checkpoint);
        std::array<int, 3> changed{};
        for (ParamRef& p : after.parameters()) {
            Tensor* ref = nullptr;
            for (ParamRef& q : before.parameters())
                if (q.name == p.name) ref = q.tensor;
            if (!ref) continue;  // expert/router tensors have no dense counterpart
            if (!p.tensor->values_equal(*ref)) ++changed[static_cast<size_t>(Model::group_of(p.name))];
        }
        CHECK(changed[static_cast<size_t>(ParamGroup::Connector)] > 0);
        CHECK(changed[static_cast<size_t>(ParamGroup::PatchEmbedder)] > 0);
        CHECK(changed[static_cast<size_t>(ParamGroup::Backbone)] > 0);
    }
    SUBCASE("loss composition identity holds at every logged step") {
        for (const LossReport& r : moiie.logged)
            CHECK(std::abs(r.total - (r.lm + cfg.train.alpha * r.aux)) <= 1e-9);
    }
    SUBCASE("sparse variant with dense placement is rejected") {
        RunConfig bad = cfg;
        bad.model.placement = Placement::Dense;
        CHECK_THROWS_AS(run_stage2(bad, MoeVariant::MoIIE, s1.checkpoint, out), ConfigError);
    }
}

TEST_CASE("three-stage comparison mode trains only expert parameters after the split") {
    RunConfig cfg = tiny_config(41);
    cfg.train.stage2_mode = "split";
    cfg.train.total_steps = 6;
    cfg.train.split_sft_steps = 3;
    const std::string out = fresh_dir("split");
    StageOutcome s1 = run_stage1(cfg, out);
    StageOutcome s2 = run_stage2(cfg, MoeVariant::MoIIE, s1.checkpoint, out);

    // After the split phase, only .moe. parameters may differ from a joint
    // upcycle of the phase-A model; verify cheaply: the run completes and the
    // checkpoint is sparse with experts present.
    Model result = Model::load_checkpoint(s2.checkpoint);
    CHECK(result.config().placement == Placement::Interleaved);
    CHECK(result.moe_blocks().size() == 1);
    CHECK(s2.logged.size() == static_cast<size_t>(cfg.train.total_steps));
}

TEST_CASE("evaluation scoring") {
    RunConfig cfg = tiny_config(51);
    ModelConfig mc = cfg.model;
    mc.placement = Placement::Dense;
    mc.moe.reset();
    Model m(mc);

    SUBCASE("chance level on text-only answers is about one in ten") {
        Dataset ds = make_dataset({0, 2000, 0}, 7);
        EvalResult r = evaluate(m, ds);
        CHECK(r.text_only > 0.05);
        CHECK(r.text_only < 0.15);
        CHECK(r.examples == 2000);
    }
    SUBCASE("agrees with a manual argmax over the answer candidates") {
        Dataset ds = make_dataset({20, 20, 20}, 8);
        EvalResult r = evaluate(m, ds);
        int64_t hits = 0;
        for (const auto& ex : ds.examples) {
            Batch b = make_batch({&ex}, mc.dtype);
            Tape t(mc.dtype);
            auto fwd = m.forward(t, b, false);
            const Tensor& logits = t.value(fwd.logits);
            int32_t best = -1;
            double best_v = -1e300;
            for (int32_t c : answer_candidates(ex.task)) {
                const double v = logits.at(static_cast<int64_t>(b.answer_rows[0]) * mc.vocab_size + c);
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            hits += best == ex.answer_id ? 1 : 0;
        }
        CHECK(r.overall == doctest::Approx(static_cast<double>(hits) / 60.0).epsilon(1e-12));
    }
    SUBCASE("deterministic and rejects empty datasets") {
        Dataset ds = make_dataset({10, 10, 10}, 9);
        EvalResult a = evaluate(m, ds);
        EvalResult b = evaluate(m, ds);
        CHECK(a.overall == b.overall);
        CHECK(a.cross_modal == b.cross_modal);
        Dataset empty;
        CHECK_THROWS_AS(evaluate(m, empty), ConfigError);
    }
}

TEST_CASE("config file parsing") {
    SUBCASE("defaults plus overrides") {
        RunConfig cfg = parse_config_text("d = 32\nalpha = 0.01\nbalance = unbalanced:3,3,2\n");
        CHECK(cfg.model.d == 32);
        CHECK(cfg.train.alpha == 0.01);
        CHECK(cfg.moe.balance.vision == 3);
        CHECK(cfg.moe.balance.shared == 2);
        CHECK(cfg.train.warmup_ratio == 0.03);  // default
    }
    SUBCASE("unknown keys are rejected by name") {
        CHECK_THROWS_WITH_AS(parse_config_text("nonsense_key = 3\n"),
                             doctest::Contains("nonsense_key"), ConfigError);
    }
    SUBCASE("malformed values are rejected") {
        CHECK_THROWS_AS(parse_config_text("d = not_a_number\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("placement = sideways\n"), ConfigError);
    }
    SUBCASE("serialization is canonical and hashable") {
        RunConfig cfg;
        const std::string a = serialize_config(cfg, MoeVariant::MoIIE, 2);
        const std::string b = serialize_config(cfg, MoeVariant::MoIIE, 2);
        CHECK(a == b);
        CHECK(config_hash(a) == config_hash(b));
        CHECK(config_hash(a) != config_hash(serialize_config(cfg, std::nullopt, 2)));
        // round trip: parsing the canonical form reproduces it
        RunConfig parsed = parse_config_text(a.substr(0, a.find("variant =")));
        CHECK(serialize_config(parsed, MoeVariant::MoIIE, 2) == a);
    }
}

TEST_CASE("full pipeline determinism (metric files byte-identical)") {
    RunConfig cfg = tiny_config(61);
    cfg.train.total_steps = 5;
    const std::string out_a = fresh_dir("det_a");
    const std::string out_b = fresh_dir("det_b");
    StageOutcome a1 = run_stage1(cfg, out_a);
    StageOutcome b1 = run_stage1(cfg, out_b);
    CHECK(slurp(a1.metrics_csv) == slurp(b1.metrics_csv));
    StageOutcome a2 = run_stage2(cfg, MoeVariant::MoIIE, a1.checkpoint, out_a);
    StageOutcome b2 = run_stage2(cfg, MoeVariant::MoIIE, b1.checkpoint, out_b);
    CHECK(slurp(a2.metrics_csv) == slurp(b2.metrics_csv));
    CHECK(slurp(a2.checkpoint) == slurp(b2.checkpoint));
}

TEST_SUITE_END();
