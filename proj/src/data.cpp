#include "moiie/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "rng.hpp"

namespace moiie {

namespace {

using rng::splitmix;

uint64_t draw_mod(uint64_t& state, uint64_t n) { return splitmix(state) % n; }

// Box-Muller from the splitmix stream, so files regenerate identically
// across standard libraries.
double draw_normal(uint64_t& state) { return rng::normal(state); }

Tensor features_from_attrs(const std::vector<std::pair<int, int>>& attrs, uint64_t& state) {
    Tensor f = Tensor::zeros({static_cast<int64_t>(attrs.size()), kPatchDim}, Dtype::F64);
    for (size_t p = 0; p < attrs.size(); ++p) {
        const int64_t base = static_cast<int64_t>(p) * kPatchDim;
        f.set(base + attrs[p].first, 1.0);
        f.set(base + kAttrCount + attrs[p].second, 1.0);
    }
    for (int64_t i = 0; i < f.numel(); ++i) f.set(i, f.at(i) + kPatchNoise * draw_normal(state));
    return f;
}

std::vector<std::pair<int, int>> draw_attrs(uint64_t& state) {
    std::vector<std::pair<int, int>> attrs(kPatchCount);
    for (auto& a : attrs) {
        a.first = static_cast<int>(draw_mod(state, kAttrCount));
        a.second = static_cast<int>(draw_mod(state, kAttrCount));
    }
    return attrs;
}

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    uint64_t z = a;
    z ^= 0x9E3779B97F4A7C15ull + b + (z << 6) + (z >> 2);
    (void)splitmix(z);
    z ^= 0xC2B2AE3D27D4EB4Full * (c + 1);
    return splitmix(z);
}

const char* task_name(TaskKind t) {
    switch (t) {
        case TaskKind::CrossModal: return "cross_modal";
        case TaskKind::TextOnly: return "text_only";
        case TaskKind::ImageOnly: return "image_only";
    }
    return "?";
}

TaskKind task_from_name(const std::string& s) {
    if (s == "cross_modal") return TaskKind::CrossModal;
    if (s == "text_only") return TaskKind::TextOnly;
    if (s == "image_only") return TaskKind::ImageOnly;
    throw IoError("unknown task name '" + s + "'");
}

std::vector<int32_t> answer_candidates(TaskKind t) {
    std::vector<int32_t> out;
    switch (t) {
        case TaskKind::TextOnly:
            for (int i = 0; i < 10; ++i) out.push_back(vocab::kDigit0 + i);
            break;
        case TaskKind::CrossModal:
            for (int i = 0; i < kAttrCount; ++i) out.push_back(vocab::kShape0 + i);
            break;
        case TaskKind::ImageOnly:
            for (int i = 0; i < kAttrCount; ++i) out.push_back(vocab::kColor0 + i);
            break;
    }
    return out;
}

SyntheticExample gen_cross_modal_example(uint64_t seed) {
    uint64_t state = seed;
    for (int attempt = 0; attempt < 100; ++attempt) {
        auto attrs = draw_attrs(state);
        std::array<int, kAttrCount> color_count{};
        for (const auto& a : attrs) ++color_count[static_cast<size_t>(a.first)];
        std::vector<int> unique_colors;
        for (int c = 0; c < kAttrCount; ++c)
            if (color_count[static_cast<size_t>(c)] == 1) unique_colors.push_back(c);
        if (unique_colors.empty()) continue;
        const int color = unique_colors[draw_mod(state, unique_colors.size())];
        int shape = -1;
        for (const auto& a : attrs)
            if (a.first == color) shape = a.second;

        SyntheticExample ex;
        ex.task = TaskKind::CrossModal;
        ex.seed = seed;
        ex.patch_attrs = std::move(attrs);
        ex.patch_features = features_from_attrs(ex.patch_attrs, state);
        ex.text_ids = {vocab::kQueryShapeOf, static_cast<int32_t>(vocab::kColor0 + color),
                       vocab::kAnswerSlot};
        ex.answer_position = kPatchCount + 2;
        ex.answer_id = static_cast<int32_t>(vocab::kShape0 + shape);
        return ex;
    }
    throw NumericError("cross-modal generator: no unique color after 100 attempts");
}

SyntheticExample gen_text_only_example(uint64_t seed) {
    uint64_t state = seed;
    const int a = static_cast<int>(draw_mod(state, 10));
    const int b = static_cast<int>(draw_mod(state, 10));
    SyntheticExample ex;
    ex.task = TaskKind::TextOnly;
    ex.seed = seed;
    ex.text_ids = {static_cast<int32_t>(vocab::kDigit0 + a), static_cast<int32_t>(vocab::kDigit0 + b),
                   vocab::kPlus, vocab::kAnswerSlot};
    ex.answer_position = 3;
    ex.answer_id = static_cast<int32_t>(vocab::kDigit0 + (a + b) % 10);
    return ex;
}

SyntheticExample gen_image_only_example(uint64_t seed) {
    uint64_t state = seed;
    SyntheticExample ex;
    ex.task = TaskKind::ImageOnly;
    ex.seed = seed;
    ex.patch_attrs = draw_attrs(state);
    ex.patch_features = features_from_attrs(ex.patch_attrs, state);
    std::array<int, kAttrCount> count{};
    for (const auto& a : ex.patch_attrs) ++count[static_cast<size_t>(a.first)];
    int best = 0;
    for (int c = 1; c < kAttrCount; ++c)
        if (count[static_cast<size_t>(c)] > count[static_cast<size_t>(best)]) best = c;  // ties keep the lower id
    ex.text_ids = {vocab::kQueryMajority, vocab::kAnswerSlot};
    ex.answer_position = kPatchCount + 1;
    ex.answer_id = static_cast<int32_t>(vocab::kColor0 + best);
    return ex;
}

SyntheticExample gen_example(TaskKind task, uint64_t seed) {
    switch (task) {
        case TaskKind::CrossModal: return gen_cross_modal_example(seed);
        case TaskKind::TextOnly: return gen_text_only_example(seed);
        case TaskKind::ImageOnly: return gen_image_only_example(seed);
    }
    throw ConfigError("bad task kind");
}

Dataset make_dataset(const DatasetSizes& sizes, uint64_t seed) {
    if (sizes.cross_modal < 0 || sizes.text_only < 0 || sizes.image_only < 0 || sizes.total() < 1)
        throw ConfigError("make_dataset: sizes must be non-negative with a positive total");
    Dataset ds;
    ds.seed = seed;
    ds.examples.reserve(static_cast<size_t>(sizes.total()));
    const std::array<std::pair<TaskKind, int64_t>, 3> plan{
        {{TaskKind::CrossModal, sizes.cross_modal},
         {TaskKind::TextOnly, sizes.text_only},
         {TaskKind::ImageOnly, sizes.image_only}}};
    for (const auto& [task, count] : plan)
        for (int64_t j = 0; j < count; ++j)
            ds.examples.push_back(
                gen_example(task, mix_seed(seed, static_cast<uint64_t>(task), static_cast<uint64_t>(j))));
    // seeded interleave
    uint64_t state = mix_seed(seed, 0x5u, 0x717u);
    for (size_t i = ds.examples.size(); i > 1; --i)
        std::swap(ds.examples[i - 1], ds.examples[draw_mod(state, i)]);
    return ds;
}

DatasetSizes default_train_sizes() { return {4000, 3000, 3000}; }
DatasetSizes default_eval_sizes() { return {800, 600, 600}; }

void save_dataset_jsonl(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    nlohmann::json header{
        {"format", "moiie-dataset"}, {"version", 1}, {"seed", ds.seed}, {"count", ds.size()}};
    out << header.dump() << '\n';
    for (const auto& ex : ds.examples) {
        nlohmann::json j{{"task", task_name(ex.task)},
                         {"seed", ex.seed},
                         {"patch_attrs", ex.patch_attrs},
                         {"text_ids", ex.text_ids},
                         {"answer_position", ex.answer_position},
                         {"answer_id", ex.answer_id}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing '" + path + "'");
}

Dataset load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty dataset file '" + path + "'");
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("format", "") != "moiie-dataset" || header.value("version", 0) != 1)
        throw IoError("'" + path + "' is not a version-1 dataset file");
    Dataset ds;
    ds.seed = header.value("seed", 0ull);
    int64_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        const TaskKind task = task_from_name(j.at("task").get<std::string>());
        const uint64_t seed = j.at("seed").get<uint64_t>();
        // Records are regenerated from (task, seed); the stored fields double
        // as a consistency check against generator drift.
        SyntheticExample ex = gen_example(task, seed);
        if (ex.patch_attrs != j.at("patch_attrs").get<std::vector<std::pair<int, int>>>() ||
            ex.text_ids != j.at("text_ids").get<std::vector<int32_t>>() ||
            ex.answer_position != j.at("answer_position").get<int32_t>() ||
            ex.answer_id != j.at("answer_id").get<int32_t>())
            throw IoError(path + ":" + std::to_string(line_no) +
                          ": record does not match its regenerated example (generator version mismatch?)");
        ds.examples.push_back(std::move(ex));
    }
    if (ds.examples.empty()) throw IoError("dataset file '" + path + "' has no records");
    return ds;
}

int64_t Batch::non_pad_tokens() const {
    int64_t n = 0;
    for (ModalityTag t : tags) n += (t != ModalityTag::Pad) ? 1 : 0;
    return n;
}

Batch make_batch(const std::vector<const SyntheticExample*>& examples, Dtype dtype, bool allow_padding) {
    if (examples.empty()) throw ShapeError("make_batch: empty batch");
    const int64_t B = static_cast<int64_t>(examples.size());
    int64_t T = 0;
    for (const auto* ex : examples) T = std::max(T, ex->total_tokens());
    if (!allow_padding) {
        for (const auto* ex : examples)
            if (ex->total_tokens() != T)
                throw ShapeError("make_batch: mixed sequence lengths require explicit padding");
    }
    Batch b;
    b.batch_size = B;
    b.seq_len = T;
    b.tags.assign(static_cast<size_t>(B * T), ModalityTag::Pad);
    b.pos_ids.resize(static_cast<size_t>(B * T));
    b.targets.assign(static_cast<size_t>(B * T), 0);
    b.loss_mask.assign(static_cast<size_t>(B * T), 0);

    int64_t patch_rows = 0;
    for (const auto* ex : examples) patch_rows += ex->image_tokens();
    Tensor feats = Tensor::zeros({patch_rows, kPatchDim}, dtype);
    int64_t patch_cursor = 0;

    for (int64_t e = 0; e < B; ++e) {
        const SyntheticExample& ex = *examples[static_cast<size_t>(e)];
        const int64_t base = e * T;
        const int64_t m = ex.image_tokens();
        for (int64_t p = 0; p < m; ++p) {
            const int64_t row = base + p;
            b.tags[static_cast<size_t>(row)] = ModalityTag::Image;
            b.image_rows.push_back(static_cast<int32_t>(row));
            for (int64_t j = 0; j < kPatchDim; ++j)
                feats.set((patch_cursor + p) * kPatchDim + j, ex.patch_features.at(p * kPatchDim + j));
        }
        patch_cursor += m;
        const int64_t n = static_cast<int64_t>(ex.text_ids.size());
        for (int64_t i = 0; i < n; ++i) {
            const int64_t row = base + m + i;
            b.tags[static_cast<size_t>(row)] = ModalityTag::Text;
            b.text_rows.push_back(static_cast<int32_t>(row));
            b.token_ids.push_back(ex.text_ids[static_cast<size_t>(i)]);
        }
        for (int64_t i = m + n; i < T; ++i) {
            const int64_t row = base + i;
            b.text_rows.push_back(static_cast<int32_t>(row));
            b.token_ids.push_back(vocab::kPad);
        }
        for (int64_t i = 0; i < T; ++i) b.pos_ids[static_cast<size_t>(base + i)] = static_cast<int32_t>(i);
        const int64_t ans_row = base + ex.answer_position;
        b.targets[static_cast<size_t>(ans_row)] = ex.answer_id;
        b.loss_mask[static_cast<size_t>(ans_row)] = 1;
        b.answer_rows.push_back(static_cast<int32_t>(ans_row));
        b.example_task.push_back(ex.task);
    }
    b.patch_features = std::move(feats);
    return b;
}

BatchStream::BatchStream(const Dataset& dataset, int64_t batch_size, uint64_t seed, Dtype dtype)
    : dataset_(&dataset), batch_size_(batch_size), seed_(seed), dtype_(dtype) {
    if (batch_size_ < 1) throw ConfigError("batch_size must be >= 1");
    if (dataset.size() < batch_size_)
        throw ConfigError("dataset smaller than one batch (" + std::to_string(dataset.size()) + " < " +
                          std::to_string(batch_size_) + ")");
    order_.resize(static_cast<size_t>(dataset.size()));
    reshuffle();
}

void BatchStream::reshuffle() {
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int64_t>(i);
    uint64_t state = mix_seed(seed_, 0xBA7C4ull, static_cast<uint64_t>(epoch_));
    for (size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[draw_mod(state, i)]);
    cursor_ = 0;
}

Batch BatchStream::next() {
    if (cursor_ + static_cast<size_t>(batch_size_) > order_.size()) {
        ++epoch_;
        reshuffle();
    }
    std::vector<const SyntheticExample*> exs;
    exs.reserve(static_cast<size_t>(batch_size_));
    for (int64_t i = 0; i < batch_size_; ++i)
        exs.push_back(&dataset_->examples[static_cast<size_t>(order_[cursor_++])]);
    return make_batch(exs, dtype_);
}

}  // namespace moiie
