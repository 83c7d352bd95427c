// Python bindings for the main operations: dataset generation, expert
// layouts, top-k gating, the two-stage trainer, evaluation, and routing
// statistics.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <numeric>

#include "moiie/analysis.hpp"

namespace py = pybind11;
using namespace moiie;

namespace {

py::dict example_to_dict(const SyntheticExample& ex) {
    py::dict d;
    d["task"] = task_name(ex.task);
    d["seed"] = ex.seed;
    d["patch_attrs"] = ex.patch_attrs;
    d["text_ids"] = ex.text_ids;
    d["answer_position"] = ex.answer_position;
    d["answer_id"] = ex.answer_id;
    std::vector<std::vector<double>> feats;
    for (int64_t p = 0; p < ex.image_tokens(); ++p) {
        std::vector<double> row(kPatchDim);
        for (int64_t j = 0; j < kPatchDim; ++j) row[static_cast<size_t>(j)] = ex.patch_features.at(p * kPatchDim + j);
        feats.push_back(std::move(row));
    }
    d["patch_features"] = feats;
    return d;
}

py::dict eval_to_dict(const EvalResult& e) {
    py::dict d;
    d["cross_modal"] = e.cross_modal;
    d["text_only"] = e.text_only;
    d["image_only"] = e.image_only;
    d["overall"] = e.overall;
    d["examples"] = e.examples;
    return d;
}

py::dict layout_to_dict(const ExpertLayout& l) {
    py::dict d;
    d["text_count"] = l.text_count;
    d["image_count"] = l.image_count;
    d["shared_count"] = l.shared_count;
    d["top_k"] = l.top_k;
    d["text_pool"] = l.text_pool();
    d["image_pool"] = l.image_pool();
    return d;
}

py::dict outcome_to_dict(const StageOutcome& o) {
    py::dict d;
    d["run_dir"] = o.run_dir;
    d["checkpoint"] = o.checkpoint;
    d["metrics_csv"] = o.metrics_csv;
    d["eval"] = eval_to_dict(o.final_eval);
    return d;
}

Dataset maybe_load(const std::string& data_dir, const char* split, bool& present) {
    present = !data_dir.empty();
    if (!present) return {};
    return load_dataset_jsonl(data_dir + "/" + split + ".jsonl");
}

}  // namespace

PYBIND11_MODULE(_moiie, m) {
    m.doc() = "bimodal toy transformer with intra/inter-modality expert routing";
    m.attr("__version__") = "0.1.0";
    m.attr("VOCAB_SIZE") = vocab::kSize;

    py::register_exception<ConfigError>(m, "MoiieConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "MoiieIoError", PyExc_OSError);
    py::register_exception<NumericError>(m, "MoiieNumericError", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "MoiieShapeError", PyExc_ValueError);

    m.def(
        "gen_example",
        [](const std::string& task, uint64_t seed) {
            return example_to_dict(gen_example(task_from_name(task), seed));
        },
        py::arg("task"), py::arg("seed"),
        "Deterministically generate one synthetic example "
        "(task: cross_modal|text_only|image_only).");

    m.def(
        "generate_dataset_files",
        [](const std::string& out_dir, uint64_t seed, std::optional<std::tuple<int64_t, int64_t, int64_t>> sizes) {
            DatasetSizes train_sizes = default_train_sizes();
            if (sizes) train_sizes = {std::get<0>(*sizes), std::get<1>(*sizes), std::get<2>(*sizes)};
            std::filesystem::create_directories(out_dir);
            Dataset train = make_dataset(train_sizes, seed);
            save_dataset_jsonl(train, out_dir + "/train.jsonl");
            Dataset eval = make_dataset(default_eval_sizes(), seed + 1);
            save_dataset_jsonl(eval, out_dir + "/eval.jsonl");
            return py::make_tuple(train.size(), eval.size());
        },
        py::arg("out_dir"), py::arg("seed"), py::arg("sizes") = py::none(),
        "Write train.jsonl/eval.jsonl; sizes is (cross, text, image).");

    m.def(
        "build_expert_layout",
        [](int total, const std::string& balance, int top_k) {
            return layout_to_dict(build_expert_layout(total, BalanceSpec::parse(balance), top_k));
        },
        py::arg("total"), py::arg("balance") = "balanced", py::arg("top_k") = 2,
        "Expert allocation: balanced or unbalanced:v,l,s.");

    m.def(
        "topk_gate",
        [](const std::vector<double>& logits, int k) {
            const Tensor x = Tensor::from({1.0}, {1}, Dtype::F64);
            Tensor w = Tensor::from(logits, {1, static_cast<int64_t>(logits.size())}, Dtype::F64);
            std::vector<int> pool(logits.size());
            std::iota(pool.begin(), pool.end(), 0);
            GateDecision g = gate_topk(x, w, pool, k);
            return py::make_tuple(g.expert_ids, g.weights);
        },
        py::arg("logits"), py::arg("k"),
        "Top-k selection with softmax over the selected logits; returns (indices, weights).");

    m.def("lr_at", &lr_at, py::arg("step"), py::arg("total_steps"), py::arg("warmup_ratio"),
          py::arg("base"), "Linear-warmup cosine-decay schedule.");

    m.def(
        "train_stage1",
        [](const std::string& config_path, const std::string& out_dir, const std::string& data_dir) {
            RunConfig cfg = parse_config_file(config_path);
            bool has_data = false;
            Dataset train = maybe_load(data_dir, "train", has_data);
            Dataset eval = maybe_load(data_dir, "eval", has_data);
            StageOutcome o = run_stage1(cfg, out_dir, has_data ? &train : nullptr,
                                        has_data ? &eval : nullptr);
            return outcome_to_dict(o);
        },
        py::arg("config_path"), py::arg("out_dir"), py::arg("data_dir") = "");

    m.def(
        "train_stage2",
        [](const std::string& config_path, const std::string& variant, const std::string& init_ckpt,
           const std::string& out_dir, const std::string& data_dir) {
            RunConfig cfg = parse_config_file(config_path);
            bool has_data = false;
            Dataset train = maybe_load(data_dir, "train", has_data);
            Dataset eval = maybe_load(data_dir, "eval", has_data);
            StageOutcome o = run_stage2(cfg, variant_from_label(variant), init_ckpt, out_dir,
                                        has_data ? &train : nullptr, has_data ? &eval : nullptr);
            return outcome_to_dict(o);
        },
        py::arg("config_path"), py::arg("variant"), py::arg("init_checkpoint"), py::arg("out_dir"),
        py::arg("data_dir") = "");

    m.def(
        "evaluate_checkpoint",
        [](const std::string& ckpt, const std::string& data_dir) {
            Model model = Model::load_checkpoint(ckpt);
            Dataset ds = load_dataset_jsonl(data_dir + "/eval.jsonl");
            return eval_to_dict(evaluate(model, ds));
        },
        py::arg("checkpoint"), py::arg("data_dir"));

    m.def(
        "route_stats",
        [](const std::string& ckpt, const std::string& data_dir, const std::string& out_csv) {
            Model model = Model::load_checkpoint(ckpt);
            Dataset ds = load_dataset_jsonl(data_dir + "/eval.jsonl");
            PathwaySummary s = pathway_stats(model, ds, out_csv);
            py::list shares;
            for (const SharedShare& sh : s.shared_share) {
                py::dict d;
                d["layer"] = sh.layer;
                d["image"] = sh.image;
                d["text"] = sh.text;
                d["combined"] = sh.combined;
                shares.append(d);
            }
            return shares;
        },
        py::arg("checkpoint"), py::arg("data_dir"), py::arg("out_csv"));

    m.def(
        "checkpoint_tensors",
        [](const std::string& ckpt) {
            Model model = Model::load_checkpoint(ckpt);
            py::list out;
            for (ParamRef& p : model.parameters())
                out.append(py::make_tuple(p.name, p.tensor->shape(), dtype_name(p.tensor->dtype())));
            return out;
        },
        py::arg("checkpoint"), "Named parameter tensors with shapes and dtypes.");

    m.def(
        "export_report", [](const std::string& run_dir) { return export_report(run_dir); },
        py::arg("run_dir"));
}
