#pragma once

#include <string>
#include <vector>

#include "moiie/trainer.hpp"

namespace moiie {

// Per-layer share of activations landing on the shared expert group,
// reported (not asserted) as the depth trend.
struct SharedShare {
    int layer = 0;
    double image = 0, text = 0, combined = 0;
};

struct PathwaySummary {
    RoutingTrace trace;
    std::vector<SharedShare> shared_share;
};

// Runs the dataset through the model with trace accumulation and writes the
// trace CSV (schema: layer,modality,expert_id,expert_group,
// activation_fraction,mean_gate_prob). Rejects dense models.
PathwaySummary pathway_stats(Model& model, const Dataset& ds, const std::string& csv_path);

std::vector<SharedShare> shared_group_share(const RoutingTrace& trace, const ExpertLayout& layout);

// Force-routes every token to one expert group (top_k capped at the group
// size) and evaluates; used to compare intra- vs inter-modality experts.
EvalResult evaluate_forced_group(Model& model, const Dataset& ds, ExpertGroup group);

struct GroupForcingRow {
    ExpertGroup group;
    EvalResult eval;
};
std::vector<GroupForcingRow> expert_group_ablation(Model& model, const Dataset& ds);
void write_forcing_csv(const std::vector<GroupForcingRow>& rows, const std::string& path);

// Consolidated structured-text report for one run directory (config echo,
// final accuracies, pathway tables per layer, depth trend, loss trajectory,
// forcing table when present). Deterministic: identical runs export
// byte-identical reports.
std::string export_report(const std::string& run_dir);
void export_report_file(const std::string& run_dir, const std::string& out_path);

// Joins several labeled reports into one sweep report.
std::string consolidate_reports(const std::string& title,
                                const std::vector<std::pair<std::string, std::string>>& sections);

}  // namespace moiie
