#include "moiie/moe.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rng.hpp"

namespace moiie {

namespace {
constexpr double kRouterInitStd = 0.02;

uint64_t hash_indices(const std::vector<int32_t>& idx) {
    uint64_t h = 1469598103934665603ull;
    for (int32_t v : idx) {
        h ^= static_cast<uint64_t>(static_cast<uint32_t>(v)) + 0x9E3779B9u;
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace

const char* moe_variant_name(MoeVariant v) {
    switch (v) {
        case MoeVariant::Vanilla: return "vanilla";
        case MoeVariant::Modality: return "modality";
        case MoeVariant::MoIIE: return "moiie";
    }
    return "?";
}

MoeVariant moe_variant_from_name(const std::string& s) {
    if (s == "vanilla") return MoeVariant::Vanilla;
    if (s == "modality") return MoeVariant::Modality;
    if (s == "moiie") return MoeVariant::MoIIE;
    throw ConfigError("unknown MoE variant '" + s + "' (expected vanilla|modality|moiie)");
}

char expert_group_letter(ExpertGroup g) {
    switch (g) {
        case ExpertGroup::Text: return 'T';
        case ExpertGroup::Image: return 'I';
        case ExpertGroup::Shared: return 'S';
    }
    return '?';
}

std::string BalanceSpec::to_string() const {
    if (balanced) return "balanced";
    std::ostringstream os;
    os << "unbalanced:" << vision << ',' << language << ',' << shared;
    return os.str();
}

BalanceSpec BalanceSpec::parse(const std::string& s) {
    if (s == "balanced") return make_balanced();
    const std::string prefix = "unbalanced:";
    if (s.rfind(prefix, 0) == 0) {
        int v = 0, l = 0, sh = 0;
        char c1 = 0, c2 = 0;
        std::istringstream is(s.substr(prefix.size()));
        if ((is >> v >> c1 >> l >> c2 >> sh) && c1 == ',' && c2 == ',' && is.eof())
            return unbalanced(v, l, sh);
    }
    throw ConfigError("bad balance spec '" + s + "' (expected balanced or unbalanced:v,l,s)");
}

ExpertGroup ExpertLayout::group_of(int global_id) const {
    if (global_id < 0 || global_id >= total()) throw ShapeError("expert id out of range");
    if (global_id < text_count) return ExpertGroup::Text;
    if (global_id < text_count + image_count) return ExpertGroup::Image;
    return ExpertGroup::Shared;
}

std::vector<int> ExpertLayout::group_ids(ExpertGroup g) const {
    int begin = 0, end = 0;
    switch (g) {
        case ExpertGroup::Text: begin = 0, end = text_count; break;
        case ExpertGroup::Image: begin = text_count, end = text_count + image_count; break;
        case ExpertGroup::Shared: begin = text_count + image_count, end = total(); break;
    }
    std::vector<int> ids(static_cast<size_t>(end - begin));
    std::iota(ids.begin(), ids.end(), begin);
    return ids;
}

std::vector<int> ExpertLayout::text_pool() const {
    std::vector<int> pool = group_ids(ExpertGroup::Text);
    for (int id : group_ids(ExpertGroup::Shared)) pool.push_back(id);
    return pool;
}

std::vector<int> ExpertLayout::image_pool() const {
    std::vector<int> pool = group_ids(ExpertGroup::Image);
    for (int id : group_ids(ExpertGroup::Shared)) pool.push_back(id);
    return pool;
}

std::vector<int> ExpertLayout::full_pool() const {
    std::vector<int> pool(static_cast<size_t>(total()));
    std::iota(pool.begin(), pool.end(), 0);
    return pool;
}

ExpertLayout build_expert_layout(int total, const BalanceSpec& balance, int top_k) {
    ExpertLayout layout;
    layout.balance = balance;
    layout.top_k = top_k;
    if (balance.balanced) {
        if (total < 4 || total % 4 != 0)
            throw ConfigError("balanced layout needs a positive multiple of 4 experts, got " +
                              std::to_string(total));
        const int per_modality = total / 4;  // L
        layout.text_count = per_modality;
        layout.image_count = per_modality;
        layout.shared_count = 2 * per_modality;
    } else {
        if (balance.vision < 1 || balance.language < 1 || balance.shared < 0)
            throw ConfigError("unbalanced layout needs at least one expert per modality");
        if (balance.vision + balance.language + balance.shared != total)
            throw ConfigError("unbalanced counts must sum to the expert total");
        layout.image_count = balance.vision;
        layout.text_count = balance.language;
        layout.shared_count = balance.shared;
    }
    const int min_pool = std::min(layout.text_count, layout.image_count) + layout.shared_count;
    if (top_k < 1 || top_k > min_pool)
        throw ConfigError("top_k " + std::to_string(top_k) + " exceeds a candidate pool of size " +
                          std::to_string(min_pool));
    return layout;
}

ExpertLayout build_modality_layout(int total, int top_k) {
    if (total < 2 || total % 2 != 0)
        throw ConfigError("modality layout needs an even expert total, got " + std::to_string(total));
    ExpertLayout layout;
    layout.text_count = total / 2;
    layout.image_count = total / 2;
    layout.shared_count = 0;
    layout.top_k = top_k;
    if (top_k < 1 || top_k > total / 2)
        throw ConfigError("top_k " + std::to_string(top_k) + " exceeds the per-modality pool of " +
                          std::to_string(total / 2));
    return layout;
}

ExpertLayout build_vanilla_layout(int total, int top_k) {
    if (total < 1) throw ConfigError("need at least one expert");
    ExpertLayout layout;
    layout.shared_count = total;
    layout.top_k = top_k;
    if (top_k < 1 || top_k > total)
        throw ConfigError("top_k " + std::to_string(top_k) + " exceeds the expert pool of " +
                          std::to_string(total));
    return layout;
}

ExpertLayout layout_for_variant(MoeVariant v, int total, const BalanceSpec& balance, int top_k) {
    switch (v) {
        case MoeVariant::Vanilla: return build_vanilla_layout(total, top_k);
        case MoeVariant::Modality: return build_modality_layout(total, top_k);
        case MoeVariant::MoIIE: return build_expert_layout(total, balance, top_k);
    }
    throw ConfigError("bad MoE variant");
}

std::vector<int32_t> topk_select(const std::vector<double>& logits, int k) {
    const int n = static_cast<int>(logits.size());
    if (k < 1 || k > n) throw ConfigError("top-k of " + std::to_string(k) + " from pool of " + std::to_string(n));
    std::vector<int32_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int32_t a, int32_t b) {
        const double la = logits[static_cast<size_t>(a)], lb = logits[static_cast<size_t>(b)];
        if (la != lb) return la > lb;
        return a < b;  // ties toward the lower pool index
    });
    order.resize(static_cast<size_t>(k));
    return order;
}

GateDecision gate_topk(const Tensor& x, const Tensor& router_w, const std::vector<int>& pool, int k) {
    if (x.rank() != 1 || router_w.rank() != 2 || router_w.rows() != x.dim(0))
        throw ShapeError("gate_topk: expected x[d] and router weights [d, pool]");
    if (router_w.cols() != static_cast<int64_t>(pool.size()))
        throw ShapeError("gate_topk: pool size does not match router weight columns");
    x.check_finite("gate_topk input");
    const int64_t d = x.dim(0), p = router_w.cols();
    std::vector<double> logits(static_cast<size_t>(p), 0.0);
    for (int64_t j = 0; j < p; ++j) {
        double acc = 0;
        for (int64_t i = 0; i < d; ++i) acc += x.at(i) * router_w.at(i * p + j);
        logits[static_cast<size_t>(j)] = acc;
    }
    const std::vector<int32_t> sel = topk_select(logits, k);
    // softmax over the selected logits only
    double mx = logits[static_cast<size_t>(sel[0])];
    for (int32_t s : sel) mx = std::max(mx, logits[static_cast<size_t>(s)]);
    double denom = 0;
    std::vector<double> w(sel.size());
    for (size_t i = 0; i < sel.size(); ++i) {
        w[i] = std::exp(logits[static_cast<size_t>(sel[i])] - mx);
        denom += w[i];
    }
    GateDecision out;
    for (size_t i = 0; i < sel.size(); ++i) {
        out.expert_ids.push_back(static_cast<int32_t>(pool[static_cast<size_t>(sel[i])]));
        out.weights.push_back(w[i] / denom);
    }
    return out;
}

void RoutingTrace::merge(const RoutingTrace& other) {
    if (total_experts == 0) total_experts = other.total_experts;
    for (const auto& [idx, lt] : other.layers) {
        LayerTrace& mine = layer(idx);
        mine.image_tokens += lt.image_tokens;
        mine.text_tokens += lt.text_tokens;
        for (size_t e = 0; e < lt.image.size(); ++e) {
            mine.image[e].activations += lt.image[e].activations;
            mine.image[e].gate_sum += lt.image[e].gate_sum;
            mine.text[e].activations += lt.text[e].activations;
            mine.text[e].gate_sum += lt.text[e].gate_sum;
        }
    }
}

RoutingTrace::LayerTrace& RoutingTrace::layer(int index) {
    LayerTrace& lt = layers[index];
    if (lt.image.empty()) {
        lt.image.resize(static_cast<size_t>(total_experts));
        lt.text.resize(static_cast<size_t>(total_experts));
    }
    return lt;
}

void write_trace_csv(const RoutingTrace& trace, const ExpertLayout& layout, std::ostream& out) {
    out << "layer,modality,expert_id,expert_group,activation_fraction,mean_gate_prob\n";
    char buf[64];
    for (const auto& [idx, lt] : trace.layers) {
        const struct {
            const char* name;
            const std::vector<RoutingTrace::Cell>& cells;
            int64_t tokens;
        } sides[2] = {{"image", lt.image, lt.image_tokens}, {"text", lt.text, lt.text_tokens}};
        for (const auto& side : sides) {
            for (size_t e = 0; e < side.cells.size(); ++e) {
                const double denom = side.tokens > 0 ? static_cast<double>(side.tokens) : 1.0;
                const double frac = static_cast<double>(side.cells[e].activations) / denom;
                const double mean_gate = side.cells[e].gate_sum / denom;
                std::snprintf(buf, sizeof(buf), "%.12g,%.12g", frac, mean_gate);
                out << idx << ',' << side.name << ',' << e << ','
                    << expert_group_letter(layout.group_of(static_cast<int>(e))) << ',' << buf << '\n';
            }
        }
    }
}

void write_trace_csv_file(const RoutingTrace& trace, const ExpertLayout& layout, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_trace_csv(trace, layout, out);
    if (!out) throw IoError("failed writing '" + path + "'");
}

Value load_balance_loss(Tape& t, const std::vector<GateRecord>& records, AuxPoolMode mode) {
    Value acc;
    int active = 0;
    for (const GateRecord& r : records) {
        if (r.tokens == 0) continue;  // excluded from the mean; caller logs the skip
        const int64_t k = static_cast<int64_t>(r.pool_idx.size()) / r.tokens;
        std::vector<int64_t> count(static_cast<size_t>(r.pool_size), 0);
        for (int32_t p : r.pool_idx) ++count[static_cast<size_t>(p)];
        Tensor c({r.tokens, k}, t.dtype());
        for (int64_t i = 0; i < r.tokens * k; ++i)
            c.set(i, static_cast<double>(count[static_cast<size_t>(r.pool_idx[static_cast<size_t>(i)])]));
        const double pool_factor =
            mode == AuxPoolMode::PerPool ? static_cast<double>(r.pool_size) : static_cast<double>(r.total_experts);
        const double n = static_cast<double>(r.tokens);
        Value term = t.scale(t.sum(t.mul(r.weights, t.constant(std::move(c)))), pool_factor / (n * n));
        acc = acc.valid() ? t.add(acc, term) : term;
        ++active;
    }
    if (active == 0) throw NumericError("load_balance_loss: no routed tokens in any record");
    return active > 1 ? t.scale(acc, 1.0 / static_cast<double>(active)) : acc;
}

void MoeLayer::init(int64_t d, Dtype dt, uint64_t seed) {
    experts.resize(static_cast<size_t>(layout.total()));
    for (size_t e = 0; e < experts.size(); ++e) {
        uint64_t s = seed + 0x9E37u * (e + 1);
        experts[e].init(d, dt, rng::splitmix(s));
    }
    router_w.clear();
    for (int r = 0; r < n_routers(); ++r) {
        Tensor w({d, static_cast<int64_t>(router_pool(r).size())}, dt);
        uint64_t s = seed ^ (0xC0FFEEull + static_cast<uint64_t>(r));
        rng::fill_normal(w, kRouterInitStd, rng::splitmix(s));
        router_w.push_back(std::move(w));
    }
}

void MoeLayer::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    for (size_t e = 0; e < experts.size(); ++e)
        experts[e].collect(prefix + ".expert" + std::to_string(e), out);
    for (size_t r = 0; r < router_w.size(); ++r)
        out.push_back({prefix + ".router" + std::to_string(r) + ".w", &router_w[r]});
}

std::vector<int> MoeLayer::router_pool(int router_index) const {
    if (variant == MoeVariant::Vanilla) return layout.full_pool();
    return router_index == 0 ? layout.text_pool() : layout.image_pool();
}

int MoeLayer::router_for(ModalityTag tag) const {
    if (variant == MoeVariant::Vanilla) return 0;
    return tag == ModalityTag::Text ? 0 : 1;
}

MoeLayer::Output MoeLayer::forward(Tape& t, Value x, const std::vector<ModalityTag>& tags,
                                   int layer_index, RoutingTrace* trace, AuxPoolMode aux_mode,
                                   bool train, const MoeForwardOptions* options) {
    const Tensor& xv = t.value(x);
    const int64_t rows = xv.rows();
    if (static_cast<int64_t>(tags.size()) != rows)
        throw ShapeError("moe forward: one modality tag per row required");

    Output out;

    // Test fixture: externally injected gates, no routers involved.
    if (options && options->injected_gates) {
        Value acc;
        for (const auto& [row, decision] : *options->injected_gates) {
            if (row < 0 || row >= rows) throw ShapeError("injected gate row out of range");
            for (size_t j = 0; j < decision.expert_ids.size(); ++j) {
                const int32_t e = decision.expert_ids[static_cast<size_t>(j)];
                Value xe = t.gather_rows(x, {row});
                Value ye = experts[static_cast<size_t>(e)].forward(t, xe, train);
                Value we = t.constant(Tensor::from({decision.weights[j]}, {1}, t.dtype()));
                Value part = t.scatter_rows_scaled(ye, we, {row}, rows);
                acc = acc.valid() ? t.add(acc, part) : part;
            }
        }
        if (!acc.valid()) throw ShapeError("injected gates: empty decision list");
        out.y = acc;
        return out;
    }

    // Group rows by serving router.
    std::vector<std::vector<int32_t>> router_rows(static_cast<size_t>(n_routers()));
    for (int64_t r = 0; r < rows; ++r) {
        const ModalityTag tag = tags[static_cast<size_t>(r)];
        if (tag == ModalityTag::Pad) continue;  // pads are never routed
        if (tag != ModalityTag::Image && tag != ModalityTag::Text)
            throw ShapeError("moe forward: unknown modality tag");
        router_rows[static_cast<size_t>(router_for(tag))].push_back(static_cast<int32_t>(r));
    }

    const bool forced = options && options->forced_group.has_value();
    std::vector<GateRecord> records;
    Value acc;

    for (int r = 0; r < n_routers(); ++r) {
        const auto& group_rows = router_rows[static_cast<size_t>(r)];
        if (group_rows.empty()) {
            ++out.skipped_routers;
            continue;
        }
        std::vector<int> pool = router_pool(r);
        int use_router = r;
        // Candidate columns within the chosen router's pool (identity unless
        // a group is forced).
        std::vector<int32_t> cols(pool.size());
        std::iota(cols.begin(), cols.end(), 0);
        int k = layout.top_k;

        if (forced) {
            const std::vector<int> want = layout.group_ids(*options->forced_group);
            if (want.empty()) throw ConfigError("forced expert group is empty");
            auto columns_for = [&](int router_index, std::vector<int32_t>& cols_out) {
                cols_out.clear();
                const std::vector<int> rp = router_pool(router_index);
                for (size_t j = 0; j < rp.size(); ++j)
                    if (layout.group_of(rp[j]) == *options->forced_group)
                        cols_out.push_back(static_cast<int32_t>(j));
            };
            columns_for(r, cols);
            if (cols.empty()) {
                // This router never scores the forced group; borrow the other
                // router's scores for it.
                use_router = 1 - r;
                columns_for(use_router, cols);
            }
            if (cols.empty()) throw ConfigError("no router scores the forced expert group");
            pool = router_pool(use_router);
            k = std::min<int>(layout.top_k, static_cast<int>(cols.size()));
        }

        const int64_t n = static_cast<int64_t>(group_rows.size());
        Value xr = t.gather_rows(x, group_rows);
        Value logits = t.matmul(xr, t.param(router_w[static_cast<size_t>(use_router)], train && !forced));
        const Tensor& raw = t.value(logits);

        // top-k per token over the candidate columns
        std::vector<int32_t> sel(static_cast<size_t>(n * k));
        std::vector<double> cand(cols.size());
        const int64_t p = raw.cols();
        for (int64_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < cols.size(); ++j) cand[j] = raw.at(i * p + cols[j]);
            const std::vector<int32_t> local = topk_select(cand, k);
            for (int j = 0; j < k; ++j)
                sel[static_cast<size_t>(i * k + j)] = cols[static_cast<size_t>(local[static_cast<size_t>(j)])];
        }
        t.note_selection(hash_indices(sel));

        Value chosen = t.gather_per_row(logits, sel, k);
        Value w = t.softmax(chosen, 1);  // normalize over the selected logits only
        const Tensor& wv = t.value(w);

        // trace + public decisions
        for (int64_t i = 0; i < n; ++i) {
            const int32_t row = group_rows[static_cast<size_t>(i)];
            const ModalityTag tag = tags[static_cast<size_t>(row)];
            GateDecision dec;
            for (int j = 0; j < k; ++j) {
                const int global = pool[static_cast<size_t>(sel[static_cast<size_t>(i * k + j)])];
                const double weight = wv.at(i * k + j);
                dec.expert_ids.push_back(static_cast<int32_t>(global));
                dec.weights.push_back(weight);
                if (trace && !forced) {
                    RoutingTrace::LayerTrace& lt = trace->layer(layer_index);
                    auto& cell = (tag == ModalityTag::Image ? lt.image : lt.text)[static_cast<size_t>(global)];
                    ++cell.activations;
                    cell.gate_sum += weight;
                }
            }
            out.decisions.emplace_back(row, std::move(dec));
        }
        if (trace && !forced) {
            RoutingTrace::LayerTrace& lt = trace->layer(layer_index);
            int64_t img = 0;
            for (int32_t row : group_rows) img += tags[static_cast<size_t>(row)] == ModalityTag::Image ? 1 : 0;
            lt.image_tokens += img;
            lt.text_tokens += n - img;
        }

        // dispatch: gather each expert's tokens, run it once, combine scaled
        for (size_t local_e = 0; local_e < pool.size(); ++local_e) {
            std::vector<int32_t> rows_e;      // row index within the gathered group
            std::vector<int32_t> dst_rows;    // destination row in the full batch
            std::vector<int64_t> w_slots;     // flat index into w
            for (int64_t i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j)
                    if (sel[static_cast<size_t>(i * k + j)] == static_cast<int32_t>(local_e)) {
                        rows_e.push_back(static_cast<int32_t>(i));
                        dst_rows.push_back(group_rows[static_cast<size_t>(i)]);
                        w_slots.push_back(i * k + j);
                    }
            if (rows_e.empty()) continue;
            Value xe = t.gather_rows(xr, rows_e);
            Value ye = experts[static_cast<size_t>(pool[local_e])].forward(t, xe, train && !forced);
            Value we = t.gather_elems(w, w_slots);
            Value part = t.scatter_rows_scaled(ye, we, dst_rows, rows);
            acc = acc.valid() ? t.add(acc, part) : part;
        }

        if (!forced)
            records.push_back(GateRecord{w, sel, static_cast<int>(pool.size()), layout.total(), n});
    }

    if (!acc.valid())  // every token was padding
        acc = t.constant(Tensor::zeros({rows, xv.cols()}, t.dtype()));
    out.y = acc;
    if (!records.empty()) {
        out.aux = load_balance_loss(t, records, aux_mode);
        out.aux_valid = true;
    }
    return out;
}

}  // namespace moiie
