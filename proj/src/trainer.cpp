#include "moiie/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace moiie {

namespace fs = std::filesystem;

void TrainingConfig::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (alpha < 0) throw ConfigError("alpha must be >= 0");
    if (warmup_ratio < 0 || warmup_ratio >= 1) throw ConfigError("warmup_ratio must be in [0,1)");
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
    if (lr_connector <= 0 || lr_backbone <= 0 || lr_patch_embedder <= 0)
        throw ConfigError("learning rates must be positive");
    if (stage2_mode != "joint" && stage2_mode != "split")
        throw ConfigError("stage2_mode must be joint or split");
    if (split_sft_steps < 0) throw ConfigError("split_sft_steps must be >= 0");
    if (stage == 1 && stage1_trainable != "connector")
        throw ConfigError("stage 1 trains the connection module only; stage1_trainable must be "
                          "'connector', got '" +
                          stage1_trainable + "'");
}

// --- config file ---------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_sizes(const DatasetSizes& s) {
    std::ostringstream os;
    os << s.cross_modal << ',' << s.text_only << ',' << s.image_only;
    return os.str();
}

DatasetSizes parse_sizes(const std::string& v, const std::string& key) {
    DatasetSizes s;
    char c1 = 0, c2 = 0;
    std::istringstream is(v);
    if (!(is >> s.cross_modal >> c1 >> s.text_only >> c2 >> s.image_only) || c1 != ',' || c2 != ',')
        throw ConfigError("config key '" + key + "' expects three comma-separated counts");
    return s;
}

int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        if (key == "d") cfg.model.d = parse_int(val, key);
        else if (key == "n_layers") cfg.model.n_layers = parse_int(val, key);
        else if (key == "n_heads") cfg.model.n_heads = parse_int(val, key);
        else if (key == "vocab_size") cfg.model.vocab_size = parse_int(val, key);
        else if (key == "patch_dim") cfg.model.patch_dim = parse_int(val, key);
        else if (key == "max_seq") cfg.model.max_seq = parse_int(val, key);
        else if (key == "placement") cfg.model.placement = placement_from_name(val);
        else if (key == "seed") cfg.model.seed = static_cast<uint64_t>(parse_int(val, key));
        else if (key == "dtype") cfg.model.dtype = dtype_from_name(val);
        else if (key == "experts_total") cfg.moe.experts_total = static_cast<int>(parse_int(val, key));
        else if (key == "balance") cfg.moe.balance = BalanceSpec::parse(val);
        else if (key == "top_k") cfg.moe.top_k = static_cast<int>(parse_int(val, key));
        else if (key == "aux_pool_mode") {
            if (val == "pool") cfg.moe.aux_mode = AuxPoolMode::PerPool;
            else if (val == "total") cfg.moe.aux_mode = AuxPoolMode::TotalExperts;
            else throw ConfigError("aux_pool_mode must be pool or total");
        } else if (key == "stage") cfg.train.stage = static_cast<int>(parse_int(val, key));
        else if (key == "alpha") cfg.train.alpha = parse_double(val, key);
        else if (key == "warmup_ratio") cfg.train.warmup_ratio = parse_double(val, key);
        else if (key == "total_steps") cfg.train.total_steps = parse_int(val, key);
        else if (key == "batch_size") cfg.train.batch_size = parse_int(val, key);
        else if (key == "lr_connector") cfg.train.lr_connector = parse_double(val, key);
        else if (key == "lr_backbone") cfg.train.lr_backbone = parse_double(val, key);
        else if (key == "lr_patch_embedder") cfg.train.lr_patch_embedder = parse_double(val, key);
        else if (key == "log_every") cfg.train.log_every = parse_int(val, key);
        else if (key == "eval_every") cfg.train.eval_every = parse_int(val, key);
        else if (key == "stage2_mode") cfg.train.stage2_mode = val;
        else if (key == "split_sft_steps") cfg.train.split_sft_steps = parse_int(val, key);
        else if (key == "stage1_trainable") cfg.train.stage1_trainable = val;
        else if (key == "data_seed") cfg.data_seed = static_cast<uint64_t>(parse_int(val, key));
        else if (key == "train_sizes") cfg.train_sizes = parse_sizes(val, key);
        else if (key == "eval_sizes") cfg.eval_sizes = parse_sizes(val, key);
        else throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown config key '" + key + "'");
    }
    cfg.train.seed = cfg.model.seed;
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string variant_label(const TrainVariant& v) {
    return v ? moe_variant_name(*v) : "dense";
}

TrainVariant variant_from_label(const std::string& s) {
    if (s == "dense") return std::nullopt;
    return moe_variant_from_name(s);
}

std::string serialize_config(const RunConfig& cfg, const TrainVariant& variant, int stage) {
    std::ostringstream os;
    os << "d = " << cfg.model.d << '\n'
       << "n_layers = " << cfg.model.n_layers << '\n'
       << "n_heads = " << cfg.model.n_heads << '\n'
       << "vocab_size = " << cfg.model.vocab_size << '\n'
       << "patch_dim = " << cfg.model.patch_dim << '\n'
       << "max_seq = " << cfg.model.max_seq << '\n'
       << "placement = " << placement_name(cfg.model.placement) << '\n'
       << "seed = " << cfg.model.seed << '\n'
       << "dtype = " << dtype_name(cfg.model.dtype) << '\n'
       << "experts_total = " << cfg.moe.experts_total << '\n'
       << "balance = " << cfg.moe.balance.to_string() << '\n'
       << "top_k = " << cfg.moe.top_k << '\n'
       << "aux_pool_mode = " << (cfg.moe.aux_mode == AuxPoolMode::PerPool ? "pool" : "total") << '\n'
       << "stage = " << stage << '\n'
       << "alpha = " << fmt_double(cfg.train.alpha) << '\n'
       << "warmup_ratio = " << fmt_double(cfg.train.warmup_ratio) << '\n'
       << "total_steps = " << cfg.train.total_steps << '\n'
       << "batch_size = " << cfg.train.batch_size << '\n'
       << "lr_connector = " << fmt_double(cfg.train.lr_connector) << '\n'
       << "lr_backbone = " << fmt_double(cfg.train.lr_backbone) << '\n'
       << "lr_patch_embedder = " << fmt_double(cfg.train.lr_patch_embedder) << '\n'
       << "log_every = " << cfg.train.log_every << '\n'
       << "eval_every = " << cfg.train.eval_every << '\n'
       << "stage2_mode = " << cfg.train.stage2_mode << '\n'
       << "split_sft_steps = " << cfg.train.split_sft_steps << '\n'
       << "stage1_trainable = " << cfg.train.stage1_trainable << '\n'
       << "data_seed = " << cfg.data_seed << '\n'
       << "train_sizes = " << fmt_sizes(cfg.train_sizes) << '\n'
       << "eval_sizes = " << fmt_sizes(cfg.eval_sizes) << '\n'
       << "variant = " << variant_label(variant) << '\n';
    return os.str();
}

uint64_t config_hash(const std::string& canonical) {
    uint64_t h = 1469598103934665603ull;
    for (char c : canonical) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    return h;
}

// --- losses and schedule --------------------------------------------------------

TotalLoss total_loss(Tape& t, const Model::ForwardResult& fwd, const Batch& batch, double alpha) {
    if (alpha < 0) throw ConfigError("alpha must be >= 0");
    TotalLoss out;
    Value lm = t.cross_entropy(fwd.logits, batch.targets, batch.loss_mask);
    out.report.lm = t.value(lm).item();
    Value aux;
    if (!fwd.layer_aux.empty()) {
        for (Value v : fwd.layer_aux) {
            aux = aux.valid() ? t.add(aux, v) : v;
            out.report.layer_aux.push_back(t.value(v).item());
        }
        if (fwd.layer_aux.size() > 1)
            aux = t.scale(aux, 1.0 / static_cast<double>(fwd.layer_aux.size()));
        out.report.aux = t.value(aux).item();
    }
    out.value = (aux.valid() && alpha > 0) ? t.add(lm, t.scale(aux, alpha)) : lm;
    out.report.total = out.report.lm + alpha * out.report.aux;
    return out;
}

double lr_at(int64_t step, int64_t total_steps, double warmup_ratio, double base) {
    if (step < 0 || step > total_steps)
        throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    const int64_t warmup = static_cast<int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (warmup > 0 && step < warmup)
        return base * static_cast<double>(step) / static_cast<double>(warmup);
    const double progress =
        total_steps == warmup ? 1.0
                              : static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// --- optimizer -------------------------------------------------------------------

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

namespace {

template <typename T>
bool adam_update_kernel(T* p, const T* g, T* m, T* v, int64_t n, double beta1, double beta2,
                        double eps, double weight_decay, double bc1, double bc2, double lr) {
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T one_minus_b1 = static_cast<T>(1.0 - beta1), one_minus_b2 = static_cast<T>(1.0 - beta2);
    const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
    const T epsv = static_cast<T>(eps), wd = static_cast<T>(weight_decay), lrv = static_cast<T>(lr);
    bool finite = true;
    for (int64_t i = 0; i < n; ++i) {
        const T gi = g ? g[i] : T(0);
        finite &= std::isfinite(gi);
        const T mi = b1 * m[i] + one_minus_b1 * gi;
        const T vi = b2 * v[i] + one_minus_b2 * gi * gi;
        m[i] = mi;
        v[i] = vi;
        p[i] -= lrv * ((mi * inv_bc1) / (std::sqrt(vi * inv_bc2) + epsv) + wd * p[i]);
    }
    return finite;
}

}  // namespace

void AdamW::step(const std::vector<std::pair<ParamRef, double>>& params_with_lr) {
    for (const auto& [ref, lr] : params_with_lr) {
        Tensor& p = *ref.tensor;
        State& st = state_[ref.name];
        if (st.t == 0) {
            st.m = Tensor::zeros(p.shape(), p.dtype());
            st.v = Tensor::zeros(p.shape(), p.dtype());
        }
        ++st.t;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
        const int64_t n = p.numel();
        bool finite = true;
        if (p.dtype() == Dtype::F32) {
            finite = adam_update_kernel<float>(p.as<float>().data(),
                                               p.has_grad() ? p.grad_as<float>().data() : nullptr,
                                               st.m.as<float>().data(), st.v.as<float>().data(), n,
                                               beta1_, beta2_, eps_, weight_decay_, bc1, bc2, lr);
        } else {
            finite = adam_update_kernel<double>(p.as<double>().data(),
                                                p.has_grad() ? p.grad_as<double>().data() : nullptr,
                                                st.m.as<double>().data(), st.v.as<double>().data(), n,
                                                beta1_, beta2_, eps_, weight_decay_, bc1, bc2, lr);
        }
        if (!finite) throw NumericError("non-finite gradient in parameter '" + ref.name + "'");
    }
}

// --- evaluation -------------------------------------------------------------------

EvalResult evaluate(Model& model, const Dataset& ds, int64_t batch_size,
                    const MoeForwardOptions* options) {
    if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
    EvalResult res;
    res.examples = ds.size();
    std::array<int64_t, 3> hit{}, total{};
    const std::array<std::vector<int32_t>, 3> candidates{answer_candidates(TaskKind::CrossModal),
                                                         answer_candidates(TaskKind::TextOnly),
                                                         answer_candidates(TaskKind::ImageOnly)};
    for (int64_t begin = 0; begin < ds.size(); begin += batch_size) {
        const int64_t end = std::min(ds.size(), begin + batch_size);
        std::vector<const SyntheticExample*> exs;
        for (int64_t i = begin; i < end; ++i) exs.push_back(&ds.examples[static_cast<size_t>(i)]);
        Batch batch = make_batch(exs, model.config().dtype);
        Tape t(model.config().dtype);
        auto fwd = model.forward(t, batch, false, options);
        const Tensor& logits = t.value(fwd.logits);
        const int64_t V = logits.cols();
        for (size_t e = 0; e < exs.size(); ++e) {
            const int64_t row = batch.answer_rows[e];
            const TaskKind task = exs[e]->task;
            const auto& cand = candidates[static_cast<size_t>(task)];
            int32_t best = cand[0];
            double best_v = logits.at(row * V + cand[0]);
            for (int32_t c : cand) {
                const double v = logits.at(row * V + c);
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            ++total[static_cast<size_t>(task)];
            if (best == exs[e]->answer_id) ++hit[static_cast<size_t>(task)];
        }
    }
    auto frac = [](int64_t h, int64_t t) { return t == 0 ? 0.0 : static_cast<double>(h) / static_cast<double>(t); };
    res.cross_modal = frac(hit[0], total[0]);
    res.text_only = frac(hit[1], total[1]);
    res.image_only = frac(hit[2], total[2]);
    res.overall = frac(hit[0] + hit[1] + hit[2], total[0] + total[1] + total[2]);
    return res;
}

void write_eval_csv(const EvalResult& eval, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "task,accuracy\n";
    out << "cross_modal," << fmt_double(eval.cross_modal) << '\n';
    out << "text_only," << fmt_double(eval.text_only) << '\n';
    out << "image_only," << fmt_double(eval.image_only) << '\n';
    out << "overall," << fmt_double(eval.overall) << '\n';
    out << "examples," << eval.examples << '\n';
}

EvalResult read_eval_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    EvalResult res;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const size_t comma = line.find(',');
        if (comma == std::string::npos) continue;
        const std::string key = line.substr(0, comma);
        const std::string val = line.substr(comma + 1);
        if (key == "cross_modal") res.cross_modal = std::stod(val);
        else if (key == "text_only") res.text_only = std::stod(val);
        else if (key == "image_only") res.image_only = std::stod(val);
        else if (key == "overall") res.overall = std::stod(val);
        else if (key == "examples") res.examples = std::stoll(val);
    }
    return res;
}

// --- training loops ----------------------------------------------------------------

namespace {

struct MetricWriter {
    std::ofstream out;
    explicit MetricWriter(const std::string& path) : out(path) {
        if (!out) throw IoError("cannot open '" + path + "' for writing");
        out << "step,lm,aux,total,lr_backbone,lr_connector,acc_cross_modal,acc_text_only,acc_image_only\n";
    }
    void row(const LossReport& r, const EvalResult* eval) {
        out << r.step << ',' << fmt_double(r.lm) << ',' << fmt_double(r.aux) << ','
            << fmt_double(r.total) << ',' << fmt_double(r.lr_backbone) << ','
            << fmt_double(r.lr_connector);
        if (eval)
            out << ',' << fmt_double(eval->cross_modal) << ',' << fmt_double(eval->text_only) << ','
                << fmt_double(eval->image_only);
        else
            out << ",,,";
        out << '\n';
    }
};

std::string make_run_dir(const std::string& out_root, const RunConfig& cfg, const TrainVariant& variant,
                         int stage) {
    const std::string canonical = serialize_config(cfg, variant, stage);
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(config_hash(canonical)));
    const fs::path dir = fs::path(out_root) / (std::string(hex) + "_s" + std::to_string(cfg.model.seed));
    fs::create_directories(dir / "traces");
    std::ofstream cfg_out(dir / "config.txt");
    if (!cfg_out) throw IoError("cannot write run config under '" + dir.string() + "'");
    cfg_out << canonical;
    return dir.string();
}

// (param, lr-multiplier) selection for one phase of training
using ParamPlan = std::vector<std::pair<ParamRef, double>>;

ParamPlan stage1_plan(Model& model, const TrainingConfig& tc) {
    ParamPlan plan;
    for (ParamRef& p : model.parameters(ParamGroup::Connector)) plan.emplace_back(p, tc.lr_connector);
    return plan;
}

ParamPlan stage2_plan(Model& model, const TrainingConfig& tc, bool moe_only) {
    ParamPlan plan;
    for (ParamRef& p : model.parameters()) {
        if (moe_only && p.name.find(".moe.") == std::string::npos) continue;
        const ParamGroup g = Model::group_of(p.name);
        plan.emplace_back(p, g == ParamGroup::PatchEmbedder ? tc.lr_patch_embedder : tc.lr_backbone);
    }
    return plan;
}

struct LoopState {
    AdamW opt;
    MetricWriter* metrics = nullptr;
    RoutingTrace window;
    int64_t skipped_router_events = 0;
    bool warned_empty_router = false;
    std::vector<LossReport> logged;
};

void train_range(Model& model, BatchStream& stream, const TrainingConfig& tc, const ParamPlan& plan,
                 int64_t step_begin, int64_t step_end, const std::string& run_dir,
                 const Dataset& eval_ds, LoopState& state) {
    const bool sparse = model.config().placement != Placement::Dense;
    state.window.total_experts = sparse ? model.config().moe->experts_total : 0;
    for (int64_t step = step_begin; step < step_end; ++step) {
        Batch batch = stream.next();
        Tape tape(model.config().dtype);
        auto fwd = model.forward(tape, batch, true);
        TotalLoss loss = total_loss(tape, fwd, batch, tc.alpha);
        model.zero_grads();
        tape.backward(loss.value);

        const double scale = lr_at(step, tc.total_steps, tc.warmup_ratio, 1.0);
        ParamPlan scaled = plan;
        for (auto& [ref, lr] : scaled) lr *= scale;
        state.opt.step(scaled);

        if (fwd.skipped_routers > 0) {
            state.skipped_router_events += fwd.skipped_routers;
            if (!state.warned_empty_router) {
                std::cerr << "note: a router saw no tokens this batch; it contributes 0 to the "
                             "balance loss and is excluded from the mean\n";
                state.warned_empty_router = true;
            }
        }
        state.window.merge(fwd.trace);

        loss.report.step = step;
        loss.report.lr_backbone = tc.stage == 1 ? 0.0 : lr_at(step, tc.total_steps, tc.warmup_ratio, tc.lr_backbone);
        loss.report.lr_connector = tc.stage == 1
                                       ? lr_at(step, tc.total_steps, tc.warmup_ratio, tc.lr_connector)
                                       : loss.report.lr_backbone;
        loss.report.lr_patch =
            tc.stage == 1 ? 0.0 : lr_at(step, tc.total_steps, tc.warmup_ratio, tc.lr_patch_embedder);

        const bool log_now = (step % tc.log_every == 0) || step + 1 == step_end;
        if (log_now) {
            const bool eval_now = tc.eval_every > 0 && step > 0 && step % tc.eval_every == 0;
            EvalResult eval;
            if (eval_now) eval = evaluate(model, eval_ds);
            state.metrics->row(loss.report, eval_now ? &eval : nullptr);
            state.logged.push_back(loss.report);
            if (sparse && !state.window.empty()) {
                char name[32];
                std::snprintf(name, sizeof(name), "step_%06lld.csv", static_cast<long long>(step));
                write_trace_csv_file(state.window, *model.layout(),
                                     (fs::path(run_dir) / "traces" / name).string());
                state.window = RoutingTrace{};
                state.window.total_experts = model.config().moe->experts_total;
            }
        }
    }
}

}  // namespace

RoutingTrace collect_trace(Model& model, const Dataset& ds, int64_t batch_size) {
    RoutingTrace trace;
    trace.total_experts = model.config().moe ? model.config().moe->experts_total : 0;
    for (int64_t begin = 0; begin < ds.size(); begin += batch_size) {
        const int64_t end = std::min(ds.size(), begin + batch_size);
        std::vector<const SyntheticExample*> exs;
        for (int64_t i = begin; i < end; ++i) exs.push_back(&ds.examples[static_cast<size_t>(i)]);
        Batch batch = make_batch(exs, model.config().dtype);
        Tape t(model.config().dtype);
        auto fwd = model.forward(t, batch, false);
        trace.merge(fwd.trace);
    }
    return trace;
}

StageOutcome run_stage1(const RunConfig& cfg_in, const std::string& out_root,
                        const Dataset* train_override, const Dataset* eval_override) {
    RunConfig cfg = cfg_in;
    cfg.train.stage = 1;
    cfg.train.validate();

    ModelConfig mc = cfg.model;
    mc.placement = Placement::Dense;
    mc.moe.reset();
    Model model(mc);

    const Dataset train_ds = train_override ? *train_override : make_dataset(cfg.train_sizes, cfg.data_seed);
    const Dataset eval_ds =
        eval_override ? *eval_override : make_dataset(cfg.eval_sizes, cfg.data_seed + 1);

    StageOutcome outcome;
    outcome.run_dir = make_run_dir(out_root, cfg, std::nullopt, 1);  // stage 1 is variant-agnostic
    outcome.metrics_csv = (fs::path(outcome.run_dir) / "metrics.csv").string();

    LoopState state{AdamW{}, nullptr, {}, 0, false, {}};
    MetricWriter metrics(outcome.metrics_csv);
    state.metrics = &metrics;

    BatchStream stream(train_ds, cfg.train.batch_size, mix_seed(cfg.model.seed, 0xD4, 1), mc.dtype);
    const ParamPlan plan = stage1_plan(model, cfg.train);
    train_range(model, stream, cfg.train, plan, 0, cfg.train.total_steps, outcome.run_dir, eval_ds,
                state);

    outcome.final_eval = evaluate(model, eval_ds);
    write_eval_csv(outcome.final_eval, (fs::path(outcome.run_dir) / "eval.csv").string());
    outcome.checkpoint = (fs::path(outcome.run_dir) / "checkpoint.moii").string();
    model.save_checkpoint(outcome.checkpoint);
    outcome.logged = std::move(state.logged);
    outcome.skipped_router_events = state.skipped_router_events;
    return outcome;
}

StageOutcome run_stage2(const RunConfig& cfg_in, const TrainVariant& variant,
                        const std::string& stage1_checkpoint, const std::string& out_root,
                        const Dataset* train_override, const Dataset* eval_override) {
    RunConfig cfg = cfg_in;
    cfg.train.stage = 2;
    cfg.train.validate();

    Model stage1 = Model::load_checkpoint(stage1_checkpoint);
    if (stage1.config().placement != Placement::Dense)
        throw ConfigError("stage 2 expects a dense stage-1 checkpoint");
    if (stage1.config().dtype != cfg.model.dtype)
        throw ConfigError("checkpoint dtype does not match the configured dtype");

    const Dataset train_ds = train_override ? *train_override : make_dataset(cfg.train_sizes, cfg.data_seed);
    const Dataset eval_ds =
        eval_override ? *eval_override : make_dataset(cfg.eval_sizes, cfg.data_seed + 1);

    StageOutcome outcome;
    outcome.run_dir = make_run_dir(out_root, cfg, variant, 2);
    outcome.metrics_csv = (fs::path(outcome.run_dir) / "metrics.csv").string();

    const bool sparse_run = variant.has_value();
    MoeConfig moe = cfg.moe;
    if (sparse_run) {
        moe.variant = *variant;
        if (cfg.model.placement == Placement::Dense)
            throw ConfigError("stage 2 with a sparse variant requires placement interleaved or full");
    }
    const uint64_t router_seed = mix_seed(cfg.model.seed, 0x707, 2);

    LoopState state{AdamW{}, nullptr, {}, 0, false, {}};
    MetricWriter metrics(outcome.metrics_csv);
    state.metrics = &metrics;
    BatchStream stream(train_ds, cfg.train.batch_size, mix_seed(cfg.model.seed, 0xD4, 2), cfg.model.dtype);

    const bool split = sparse_run && cfg.train.stage2_mode == "split";
    Model model = (sparse_run && !split)
                      ? Model::upcycled_from_dense(stage1, moe, cfg.model.placement, router_seed)
                      : std::move(stage1);
    if (split) {
        int64_t sft_steps = cfg.train.split_sft_steps > 0 ? cfg.train.split_sft_steps
                                                          : cfg.train.total_steps / 2;
        sft_steps = std::min(sft_steps, cfg.train.total_steps);
        // phase A: dense fine-tune, all parameters
        ParamPlan dense_plan = stage2_plan(model, cfg.train, false);
        train_range(model, stream, cfg.train, dense_plan, 0, sft_steps, outcome.run_dir, eval_ds, state);
        // phase B: upcycle, then expert/router parameters only
        Model sparse = Model::upcycled_from_dense(model, moe, cfg.model.placement, router_seed);
        model = std::move(sparse);
        ParamPlan moe_plan = stage2_plan(model, cfg.train, true);
        train_range(model, stream, cfg.train, moe_plan, sft_steps, cfg.train.total_steps,
                    outcome.run_dir, eval_ds, state);
    } else {
        ParamPlan plan = stage2_plan(model, cfg.train, false);
        train_range(model, stream, cfg.train, plan, 0, cfg.train.total_steps, outcome.run_dir, eval_ds,
                    state);
    }

    outcome.final_eval = evaluate(model, eval_ds);
    write_eval_csv(outcome.final_eval, (fs::path(outcome.run_dir) / "eval.csv").string());
    RoutingTrace final_trace = collect_trace(model, eval_ds, 64);
    if (!final_trace.empty())
        write_trace_csv_file(final_trace, *model.layout(),
                             (fs::path(outcome.run_dir) / "traces" / "final.csv").string());
    outcome.checkpoint = (fs::path(outcome.run_dir) / "checkpoint.moii").string();
    model.save_checkpoint(outcome.checkpoint);
    outcome.logged = std::move(state.logged);
    outcome.skipped_router_events = state.skipped_router_events;
    return outcome;
}

}  // namespace moiie
