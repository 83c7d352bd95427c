#pragma once

#include <map>
#include <string>
#include <vector>

#include "moiie/model.hpp"

namespace moiie {

struct TrainingConfig {
    int stage = 1;
    double lr_connector = 1e-3;       // stage-1 group
    double lr_backbone = 1e-3;        // stage-2 base (backbone + connector)
    double lr_patch_embedder = 1e-4;  // stage-2, base/10 ratio with the backbone
    double alpha = 0.001;             // aux-loss weight
    double warmup_ratio = 0.03;
    int64_t total_steps = 2000;
    int64_t batch_size = 32;
    uint64_t seed = 42;
    Dtype dtype = Dtype::F32;
    int64_t log_every = 50;
    int64_t eval_every = 0;  // 0: evaluate at the end only
    // joint: upcycle + full fine-tune in one stage. split: dense fine-tune for
    // split_sft_steps, then upcycle and train only expert/router parameters.
    std::string stage2_mode = "joint";
    int64_t split_sft_steps = 0;  // 0: half of total_steps
    std::string stage1_trainable = "connector";

    void validate() const;
};

// Everything a run needs, parsed from one flat key=value file.
struct RunConfig {
    ModelConfig model;  // placement applies to stage 2
    MoeConfig moe;
    TrainingConfig train;
    uint64_t data_seed = 1234;
    DatasetSizes train_sizes = default_train_sizes();
    DatasetSizes eval_sizes = default_eval_sizes();
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");

// Stage-2 training variant: nullopt is the dense baseline (no experts).
using TrainVariant = std::optional<MoeVariant>;
std::string variant_label(const TrainVariant& v);
TrainVariant variant_from_label(const std::string& s);  // dense|vanilla|modality|moiie

// Canonical echo: every key, fixed order; hashing this names the run directory.
std::string serialize_config(const RunConfig& cfg, const TrainVariant& variant, int stage);
uint64_t config_hash(const std::string& canonical);

struct LossReport {
    int64_t step = 0;
    double total = 0, lm = 0, aux = 0;  // aux pre-weighting
    std::vector<double> layer_aux;
    double lr_backbone = 0, lr_connector = 0, lr_patch = 0;
};

struct TotalLoss {
    Value value;  // taped scalar driving backward
    LossReport report;
};

// total = lm + alpha * aux with aux the mean load-balance loss over the
// model's sparse layers (0 for a dense model).
TotalLoss total_loss(Tape& t, const Model::ForwardResult& fwd, const Batch& batch, double alpha);

// Linear warmup to base over ceil(warmup_ratio*total_steps) steps, then
// cosine decay to zero at total_steps.
double lr_at(int64_t step, int64_t total_steps, double warmup_ratio, double base);

// Decoupled-weight-decay Adam with bias correction; weight decay 0 here.
class AdamW {
  public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);
    // Applies one update to every (param, lr) pair using its accumulated grad.
    void step(const std::vector<std::pair<ParamRef, double>>& params_with_lr);

  private:
    struct State {
        Tensor m, v;
        int64_t t = 0;
    };
    double beta1_, beta2_, eps_, weight_decay_;
    std::map<std::string, State> state_;
};

struct EvalResult {
    double cross_modal = 0, text_only = 0, image_only = 0, overall = 0;
    int64_t examples = 0;
};

// Accuracy of argmax logits at each answer position, scored over the task's
// closed answer set; reported per task and overall. Deterministic. Options
// pass through to the sparse layers (group forcing).
EvalResult evaluate(Model& model, const Dataset& ds, int64_t batch_size = 64,
                    const MoeForwardOptions* options = nullptr);

struct StageOutcome {
    std::string run_dir;
    std::string checkpoint;
    std::string metrics_csv;
    EvalResult final_eval;
    std::vector<LossReport> logged;
    int64_t skipped_router_events = 0;
};

// Stage 1: dense model, connection module only, lm loss only.
StageOutcome run_stage1(const RunConfig& cfg, const std::string& out_root,
                        const Dataset* train_override = nullptr,
                        const Dataset* eval_override = nullptr);

// Stage 2: loads the stage-1 checkpoint, upcycles experts for sparse
// variants (dense baseline skips upcycling), unfreezes everything, trains
// on lm + alpha*aux.
StageOutcome run_stage2(const RunConfig& cfg, const TrainVariant& variant,
                        const std::string& stage1_checkpoint, const std::string& out_root,
                        const Dataset* train_override = nullptr,
                        const Dataset* eval_override = nullptr);

// Forward pass over a dataset accumulating routing statistics.
RoutingTrace collect_trace(Model& model, const Dataset& ds, int64_t batch_size = 64);

void write_eval_csv(const EvalResult& eval, const std::string& path);
EvalResult read_eval_csv(const std::string& path);

}  // namespace moiie
