#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "moiie/trainer.hpp"

// Longer-running training-behavior checks, registered as their own ctest
// entries.

using namespace moiie;

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("moiie_slow_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

// Mean in-pool activation entropy over (layer, modality) pairs.
double utilization_entropy(Model& model, const Dataset& ds) {
    RoutingTrace trace = collect_trace(model, ds);
    const ExpertLayout& layout = *model.layout();
    double total = 0;
    int groups = 0;
    for (const auto& [layer, lt] : trace.layers) {
        const struct {
            const std::vector<RoutingTrace::Cell>& cells;
            ExpertGroup intra;
        } sides[2] = {{lt.text, ExpertGroup::Text}, {lt.image, ExpertGroup::Image}};
        for (const auto& side : sides) {
            int64_t sum = 0;
            for (const auto& c : side.cells) sum += c.activations;
            if (sum == 0) continue;
            double h = 0;
            for (size_t e = 0; e < side.cells.size(); ++e) {
                if (layout.group_of(static_cast<int>(e)) != side.intra &&
                    layout.group_of(static_cast<int>(e)) != ExpertGroup::Shared)
                    continue;
                const double f = static_cast<double>(side.cells[e].activations) / static_cast<double>(sum);
                if (f > 0) h -= f * std::log(f);
            }
            total += h;
            ++groups;
        }
    }
    return groups ? total / groups : 0.0;
}

double median3(double a, double b, double c) {
    return std::max(std::min(a, b), std::min(std::max(a, b), c));
}

}  // namespace

TEST_SUITE_BEGIN("trainer_smoke");

TEST_CASE("stage-2 lm loss falls at least 20 percent within 200 steps") {
    RunConfig cfg;  // default desk-scale model
    cfg.model.seed = 42;
    cfg.model.dtype = Dtype::F32;
    cfg.model.placement = Placement::Interleaved;
    cfg.train.log_every = 1;
    const std::string out = fresh_dir("smoke");

    RunConfig s1 = cfg;
    s1.train.total_steps = 100;
    StageOutcome stage1 = run_stage1(s1, out);

    cfg.train.total_steps = 200;
    StageOutcome stage2 = run_stage2(cfg, MoeVariant::MoIIE, stage1.checkpoint, out);
    REQUIRE(stage2.logged.size() == 200);
    const double first = stage2.logged.front().lm;
    const double last = stage2.logged.back().lm;
    INFO("lm step 0 = ", first, ", step 199 = ", last);
    CHECK(last <= 0.8 * first);
    fs::remove_all(out);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("alpha_sensitivity");

TEST_CASE("balance pressure raises expert-utilization entropy at step 500") {
    const std::string out = fresh_dir("alpha");
    Dataset eval_ds = make_dataset(default_eval_sizes(), 99);

    std::array<double, 3> with_alpha{}, without_alpha{};
    for (int i = 0; i < 3; ++i) {
        RunConfig cfg;
        cfg.model.seed = 11 + static_cast<uint64_t>(i);
        cfg.model.dtype = Dtype::F32;
        cfg.model.placement = Placement::Interleaved;
        cfg.train.log_every = 250;

        RunConfig s1 = cfg;
        s1.train.total_steps = 200;
        StageOutcome stage1 = run_stage1(s1, out);

        cfg.train.total_steps = 500;
        for (double alpha : {0.001, 0.0}) {
            cfg.train.alpha = alpha;
            StageOutcome s2 = run_stage2(cfg, MoeVariant::MoIIE, stage1.checkpoint, out);
            Model model = Model::load_checkpoint(s2.checkpoint);
            const double h = utilization_entropy(model, eval_ds);
            (alpha > 0 ? with_alpha : without_alpha)[static_cast<size_t>(i)] = h;
        }
    }
    const double h_with = median3(with_alpha[0], with_alpha[1], with_alpha[2]);
    const double h_without = median3(without_alpha[0], without_alpha[1], without_alpha[2]);
    INFO("median entropy with alpha=0.001: ", h_with, ", with alpha=0: ", h_without);
    CHECK(h_with > h_without);
    fs::remove_all(out);
}

TEST_SUITE_END();
