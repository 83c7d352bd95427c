// Command-line front end: data generation, two-stage training, evaluation,
// routing-pathway statistics, and ablation sweeps.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>

#include "moiie/analysis.hpp"

namespace fs = std::filesystem;
using namespace moiie;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitNumeric = 4;

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

int env_workers() {
    const std::string v = env_or("MOIIE_WORKERS", "1");
    try {
        return std::max(1, std::stoi(v));
    } catch (const std::exception&) {
        throw ConfigError("MOIIE_WORKERS must be an integer, got '" + v + "'");
    }
}

DatasetSizes parse_sizes_arg(const std::string& s) {
    DatasetSizes sizes;
    char c1 = 0, c2 = 0;
    std::istringstream is(s);
    if (!(is >> sizes.cross_modal >> c1 >> sizes.text_only >> c2 >> sizes.image_only) || c1 != ',' ||
        c2 != ',')
        throw ConfigError("--sizes expects three comma-separated counts, got '" + s + "'");
    return sizes;
}

Dataset load_split(const std::string& data_dir, const char* split) {
    const fs::path p = fs::path(data_dir) / (std::string(split) + ".jsonl");
    if (!fs::exists(p)) throw ConfigError("no " + std::string(split) + ".jsonl under '" + data_dir + "'");
    return load_dataset_jsonl(p.string());
}

void print_eval(const EvalResult& e) {
    std::printf("cross_modal %.6f\n", e.cross_modal);
    std::printf("text_only   %.6f\n", e.text_only);
    std::printf("image_only  %.6f\n", e.image_only);
    std::printf("overall     %.6f  (%lld examples)\n", e.overall,
                static_cast<long long>(e.examples));
}

int cmd_gen_data(const std::string& out_dir, uint64_t seed, const std::string& sizes_arg) {
    const DatasetSizes train_sizes =
        sizes_arg.empty() ? default_train_sizes() : parse_sizes_arg(sizes_arg);
    fs::create_directories(out_dir);
    Dataset train = make_dataset(train_sizes, seed);
    save_dataset_jsonl(train, (fs::path(out_dir) / "train.jsonl").string());
    Dataset eval = make_dataset(default_eval_sizes(), seed + 1);
    save_dataset_jsonl(eval, (fs::path(out_dir) / "eval.jsonl").string());
    std::printf("wrote %lld train and %lld eval examples under %s\n",
                static_cast<long long>(train.size()), static_cast<long long>(eval.size()),
                out_dir.c_str());
    return kExitOk;
}

struct TrainArgs {
    std::string config_path, out_dir, data_dir, init_ckpt, variant = "dense";
    int stage = 0;
};

int cmd_train(const TrainArgs& args) {
    RunConfig cfg = parse_config_file(args.config_path);
    const TrainVariant variant = variant_from_label(args.variant);

    Dataset train_ds, eval_ds;
    const Dataset *train_ptr = nullptr, *eval_ptr = nullptr;
    if (!args.data_dir.empty()) {
        train_ds = load_split(args.data_dir, "train");
        eval_ds = load_split(args.data_dir, "eval");
        train_ptr = &train_ds;
        eval_ptr = &eval_ds;
    }

    StageOutcome outcome;
    if (args.stage == 1) {
        outcome = run_stage1(cfg, args.out_dir, train_ptr, eval_ptr);
    } else {
        outcome = run_stage2(cfg, variant, args.init_ckpt, args.out_dir, train_ptr, eval_ptr);
        if (variant.has_value()) {
            Model model = Model::load_checkpoint(outcome.checkpoint);
            const Dataset forced_ds =
                eval_ptr ? *eval_ptr : make_dataset(cfg.eval_sizes, cfg.data_seed + 1);
            write_forcing_csv(expert_group_ablation(model, forced_ds),
                              (fs::path(outcome.run_dir) / "forcing.csv").string());
        }
    }
    std::printf("run_dir %s\n", outcome.run_dir.c_str());
    std::printf("checkpoint %s\n", outcome.checkpoint.c_str());
    print_eval(outcome.final_eval);
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir) {
    Model model = Model::load_checkpoint(ckpt);
    Dataset ds = load_split(data_dir, "eval");
    print_eval(evaluate(model, ds));
    return kExitOk;
}

int cmd_route_stats(const std::string& ckpt, const std::string& data_dir, const std::string& out_csv) {
    Model model = Model::load_checkpoint(ckpt);
    Dataset ds = load_split(data_dir, "eval");
    PathwaySummary summary = pathway_stats(model, ds, out_csv);
    std::printf("wrote %s\n", out_csv.c_str());
    for (const SharedShare& s : summary.shared_share)
        std::printf("layer %d shared-group share: image %.6f text %.6f combined %.6f\n", s.layer,
                    s.image, s.text, s.combined);
    return kExitOk;
}

struct SweepCell {
    std::string label;
    RunConfig cfg;
};

std::vector<SweepCell> build_sweep(const std::string& sweep, const RunConfig& base) {
    std::vector<SweepCell> cells;
    if (sweep == "experts") {
        for (int total : {4, 8}) {
            SweepCell c{"experts_" + std::to_string(total), base};
            c.cfg.moe.experts_total = total;
            c.cfg.moe.balance = BalanceSpec::make_balanced();
            cells.push_back(std::move(c));
        }
    } else if (sweep == "balance") {
        SweepCell balanced{"balance_balanced", base};
        balanced.cfg.moe.experts_total = 8;
        balanced.cfg.moe.balance = BalanceSpec::make_balanced();
        cells.push_back(std::move(balanced));
        SweepCell unbalanced{"balance_unbalanced_3_3_2", base};
        unbalanced.cfg.moe.experts_total = 8;
        unbalanced.cfg.moe.balance = BalanceSpec::unbalanced(3, 3, 2);
        cells.push_back(std::move(unbalanced));
    } else if (sweep == "placement") {
        for (Placement p : {Placement::Interleaved, Placement::Full}) {
            SweepCell c{std::string("placement_") + placement_name(p), base};
            c.cfg.model.placement = p;
            cells.push_back(std::move(c));
        }
    } else if (sweep == "alpha") {
        for (double a : {0.0, 0.001, 0.01}) {
            char label[32];
            std::snprintf(label, sizeof(label), "alpha_%g", a);
            SweepCell c{label, base};
            c.cfg.train.alpha = a;
            cells.push_back(std::move(c));
        }
    } else {
        throw ConfigError("unknown sweep '" + sweep + "' (expected experts|balance|placement|alpha)");
    }
    return cells;
}

int cmd_ablate(const std::string& sweep, const std::string& config_path, const std::string& out_dir,
               const std::string& data_dir, bool parallel) {
    const RunConfig base = parse_config_file(config_path);
    std::vector<SweepCell> cells = build_sweep(sweep, base);

    Dataset train_ds, eval_ds;
    const Dataset *train_ptr = nullptr, *eval_ptr = nullptr;
    if (!data_dir.empty()) {
        train_ds = load_split(data_dir, "train");
        eval_ds = load_split(data_dir, "eval");
        train_ptr = &train_ds;
        eval_ptr = &eval_ds;
    }

    // one variant-agnostic stage-1 run shared by every cell
    StageOutcome stage1 = run_stage1(base, out_dir, train_ptr, eval_ptr);

    auto run_cell = [&](const SweepCell& cell) -> std::pair<std::string, std::string> {
        StageOutcome s2 =
            run_stage2(cell.cfg, MoeVariant::MoIIE, stage1.checkpoint, out_dir, train_ptr, eval_ptr);
        Model model = Model::load_checkpoint(s2.checkpoint);
        const Dataset forced_ds =
            eval_ptr ? *eval_ptr : make_dataset(cell.cfg.eval_sizes, cell.cfg.data_seed + 1);
        write_forcing_csv(expert_group_ablation(model, forced_ds),
                          (fs::path(s2.run_dir) / "forcing.csv").string());
        return {cell.label, export_report(s2.run_dir)};
    };

    std::vector<std::pair<std::string, std::string>> sections;
    if (parallel && cells.size() > 1) {
        const size_t workers = static_cast<size_t>(env_workers());
        std::vector<std::future<std::pair<std::string, std::string>>> futures;
        for (const SweepCell& cell : cells)
            futures.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                         run_cell, std::cref(cell)));
        for (auto& f : futures) sections.push_back(f.get());  // fixed merge order
    } else {
        for (const SweepCell& cell : cells) sections.push_back(run_cell(cell));
    }

    const std::string report = consolidate_reports("sweep: " + sweep, sections);
    const fs::path report_path = fs::path(out_dir) / ("report_" + sweep + ".txt");
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write '" + report_path.string() + "'");
    out << report;
    std::printf("wrote %s (%zu cells)\n", report_path.string().c_str(), sections.size());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bimodal toy transformer with intra/inter-modality expert routing"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate synthetic train/eval dataset files");
    std::string gen_out = env_or("MOIIE_OUT", "");
    uint64_t gen_seed = 1234;
    std::string gen_sizes;
    gen->add_option("--out", gen_out, "output directory")->required(env_or("MOIIE_OUT", "").empty());
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--sizes", gen_sizes, "train sizes as cross,text,image (default 4000,3000,3000)");

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    TrainArgs targs;
    targs.out_dir = env_or("MOIIE_OUT", "");
    train->add_option("--config", targs.config_path, "flat key=value config file")->required();
    train->add_option("--stage", targs.stage, "1 (connector alignment) or 2 (joint fine-tune)")
        ->required()
        ->check(CLI::IsMember({1, 2}));
    train->add_option("--variant", targs.variant, "dense|vanilla|modality|moiie")
        ->check(CLI::IsMember({"dense", "vanilla", "modality", "moiie"}));
    train->add_option("--out", targs.out_dir, "output root directory")
        ->required(env_or("MOIIE_OUT", "").empty());
    train->add_option("--data", targs.data_dir, "dataset directory (default: generate from config)");
    train->add_option("--init", targs.init_ckpt, "stage-1 checkpoint (required for --stage 2)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();

    // route-stats
    auto* route = app.add_subcommand("route-stats", "routing-pathway statistics to CSV");
    std::string route_ckpt, route_data, route_out;
    route->add_option("--ckpt", route_ckpt, "checkpoint file")->required();
    route->add_option("--data", route_data, "dataset directory")->required();
    route->add_option("--out", route_out, "output CSV path")->required();

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run an ablation sweep and emit one report");
    std::string ab_sweep, ab_config, ab_data;
    std::string ab_out = env_or("MOIIE_OUT", "");
    bool ab_parallel = false;
    ablate->add_option("--sweep", ab_sweep, "experts|balance|placement|alpha")
        ->required()
        ->check(CLI::IsMember({"experts", "balance", "placement", "alpha"}));
    ablate->add_option("--config", ab_config, "base config file")->required();
    ablate->add_option("--out", ab_out, "output root directory")
        ->required(env_or("MOIIE_OUT", "").empty());
    ablate->add_option("--data", ab_data, "dataset directory (default: generate from config)");
    ablate->add_flag("--parallel", ab_parallel, "run sweep cells on MOIIE_WORKERS threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_seed, gen_sizes);
        if (train->parsed()) {
            if (targs.stage == 2 && targs.init_ckpt.empty()) {
                std::cerr << "error: --stage 2 requires --init with a stage-1 checkpoint\n";
                return kExitUsage;
            }
            if (targs.stage == 1 && targs.variant != "dense") {
                std::cerr << "error: stage 1 is variant-agnostic; omit --variant or pass dense\n";
                return kExitUsage;
            }
            return cmd_train(targs);
        }
        if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_data);
        if (route->parsed()) return cmd_route_stats(route_ckpt, route_data, route_out);
        if (ablate->parsed()) return cmd_ablate(ab_sweep, ab_config, ab_out, ab_data, ab_parallel);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    }
    return kExitUsage;
}
