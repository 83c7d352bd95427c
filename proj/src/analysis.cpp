#include "moiie/analysis.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace moiie {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::vector<SharedShare> shared_group_share(const RoutingTrace& trace, const ExpertLayout& layout) {
    std::vector<SharedShare> out;
    for (const auto& [layer_idx, lt] : trace.layers) {
        SharedShare s;
        s.layer = layer_idx;
        int64_t img_shared = 0, img_all = 0, txt_shared = 0, txt_all = 0;
        for (size_t e = 0; e < lt.image.size(); ++e) {
            const bool shared = layout.group_of(static_cast<int>(e)) == ExpertGroup::Shared;
            img_all += lt.image[e].activations;
            txt_all += lt.text[e].activations;
            if (shared) {
                img_shared += lt.image[e].activations;
                txt_shared += lt.text[e].activations;
            }
        }
        s.image = img_all ? static_cast<double>(img_shared) / static_cast<double>(img_all) : 0.0;
        s.text = txt_all ? static_cast<double>(txt_shared) / static_cast<double>(txt_all) : 0.0;
        s.combined = (img_all + txt_all)
                         ? static_cast<double>(img_shared + txt_shared) / static_cast<double>(img_all + txt_all)
                         : 0.0;
        out.push_back(s);
    }
    return out;
}

PathwaySummary pathway_stats(Model& model, const Dataset& ds, const std::string& csv_path) {
    if (model.config().placement == Placement::Dense)
        throw ConfigError("pathway stats need a model with at least one sparse layer");
    PathwaySummary summary;
    summary.trace = collect_trace(model, ds);
    summary.shared_share = shared_group_share(summary.trace, *model.layout());
    if (!csv_path.empty()) write_trace_csv_file(summary.trace, *model.layout(), csv_path);
    return summary;
}

EvalResult evaluate_forced_group(Model& model, const Dataset& ds, ExpertGroup group) {
    const ExpertLayout* layout = model.layout();
    if (!layout) throw ConfigError("group forcing needs a sparse model");
    if (layout->group_ids(group).empty())
        throw ConfigError(std::string("expert group ") + expert_group_letter(group) +
                          " is empty in this layout");
    MoeForwardOptions options;
    options.forced_group = group;
    return evaluate(model, ds, 64, &options);
}

std::vector<GroupForcingRow> expert_group_ablation(Model& model, const Dataset& ds) {
    const ExpertLayout* layout = model.layout();
    if (!layout) throw ConfigError("group forcing needs a sparse model");
    std::vector<GroupForcingRow> rows;
    for (ExpertGroup g : {ExpertGroup::Text, ExpertGroup::Image, ExpertGroup::Shared}) {
        if (layout->group_ids(g).empty()) continue;
        rows.push_back({g, evaluate_forced_group(model, ds, g)});
    }
    return rows;
}

void write_forcing_csv(const std::vector<GroupForcingRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "group,acc_cross_modal,acc_text_only,acc_image_only,overall\n";
    for (const auto& row : rows)
        out << expert_group_letter(row.group) << ',' << fmt(row.eval.cross_modal) << ','
            << fmt(row.eval.text_only) << ',' << fmt(row.eval.image_only) << ','
            << fmt(row.eval.overall) << '\n';
}

std::string export_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    const fs::path config_path = dir / "config.txt";
    const fs::path metrics_path = dir / "metrics.csv";
    const fs::path eval_path = dir / "eval.csv";

    std::vector<std::string> missing;
    for (const fs::path& p : {config_path, metrics_path, eval_path})
        if (!fs::exists(p)) missing.push_back(p.string());
    // the trace is required only for sparse runs (it exists iff the run had
    // sparse layers)
    const fs::path trace_path = dir / "traces" / "final.csv";
    if (!missing.empty()) {
        std::string msg = "cannot build report; missing:";
        for (const std::string& m : missing) msg += " " + m;
        throw IoError(msg);
    }

    std::ostringstream rep;
    rep << "== run report ==\n";
    rep << "run: " << dir.filename().string() << "\n\n";

    rep << "-- config --\n" << read_file(config_path.string()) << '\n';

    rep << "-- final accuracy --\n";
    EvalResult eval = read_eval_csv(eval_path.string());
    rep << "cross_modal " << fmt(eval.cross_modal) << '\n';
    rep << "text_only   " << fmt(eval.text_only) << '\n';
    rep << "image_only  " << fmt(eval.image_only) << '\n';
    rep << "overall     " << fmt(eval.overall) << "  (" << eval.examples << " examples)\n\n";

    if (fs::exists(trace_path)) {
        // group rows per layer, echoing the trace CSV
        std::ifstream in(trace_path.string());
        std::string line;
        std::getline(in, line);  // header
        std::map<int, std::vector<std::string>> per_layer;
        std::map<int, std::array<std::array<double, 2>, 2>> shared_acc;  // [modality][shared?] fractions
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string layer_s, modality, expert_s, group_s, frac_s, gate_s;
            std::getline(ls, layer_s, ',');
            std::getline(ls, modality, ',');
            std::getline(ls, expert_s, ',');
            std::getline(ls, group_s, ',');
            std::getline(ls, frac_s, ',');
            std::getline(ls, gate_s, ',');
            const int layer = std::stoi(layer_s);
            per_layer[layer].push_back("  " + modality + " expert " + expert_s + " (" + group_s +
                                       "): activation " + fmt(std::stod(frac_s)) + ", mean gate " +
                                       fmt(std::stod(gate_s)));
            const int mi = modality == "image" ? 0 : 1;
            const int si = group_s == "S" ? 1 : 0;
            shared_acc[layer][static_cast<size_t>(mi)][static_cast<size_t>(si)] += std::stod(frac_s);
        }
        for (const auto& [layer, rows] : per_layer) {
            rep << "-- pathway (layer " << layer << ") --\n";
            for (const std::string& r : rows) rep << r << '\n';
            rep << '\n';
        }
        rep << "-- depth trend: shared-group activation share per layer --\n";
        for (const auto& [layer, acc] : shared_acc) {
            auto share = [&](int mi) {
                const double all = acc[static_cast<size_t>(mi)][0] + acc[static_cast<size_t>(mi)][1];
                return all > 0 ? acc[static_cast<size_t>(mi)][1] / all : 0.0;
            };
            const double all = acc[0][0] + acc[0][1] + acc[1][0] + acc[1][1];
            const double combined = all > 0 ? (acc[0][1] + acc[1][1]) / all : 0.0;
            rep << "layer " << layer << ": image " << fmt(share(0)) << ", text " << fmt(share(1))
                << ", combined " << fmt(combined) << '\n';
        }
        rep << '\n';
    }

    const fs::path forcing_path = dir / "forcing.csv";
    if (fs::exists(forcing_path)) {
        rep << "-- expert-group forcing --\n";
        std::ifstream in(forcing_path.string());
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string group, c, t, i, o;
            std::getline(ls, group, ',');
            std::getline(ls, c, ',');
            std::getline(ls, t, ',');
            std::getline(ls, i, ',');
            std::getline(ls, o, ',');
            rep << "group " << group << ": cross " << c << ", text " << t << ", image " << i
                << ", overall " << o << '\n';
        }
        rep << '\n';
    }

    rep << "-- loss trajectory --\n";
    rep << "step lm aux total\n";
    {
        std::ifstream in(metrics_path.string());
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string step, lm, aux, total;
            std::getline(ls, step, ',');
            std::getline(ls, lm, ',');
            std::getline(ls, aux, ',');
            std::getline(ls, total, ',');
            rep << step << ' ' << fmt(std::stod(lm)) << ' ' << fmt(std::stod(aux)) << ' '
                << fmt(std::stod(total)) << '\n';
        }
    }
    return rep.str();
}

void export_report_file(const std::string& run_dir, const std::string& out_path) {
    const std::string report = export_report(run_dir);
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot open '" + out_path + "' for writing");
    out << report;
}

std::string consolidate_reports(const std::string& title,
                                const std::vector<std::pair<std::string, std::string>>& sections) {
    std::ostringstream os;
    os << "==== " << title << " ====\n\n";
    for (const auto& [label, body] : sections) {
        os << "======== " << label << " ========\n";
        os << body;
        os << '\n';
    }
    return os.str();
}

}  // namespace moiie
