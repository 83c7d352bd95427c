#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moiie/tensor.hpp"

namespace moiie {

// --- vocabulary -----------------------------------------------------------
// Fixed id layout; ids 31..63 are reserved.
namespace vocab {
inline constexpr int32_t kDigit0 = 0;  // 0..9
inline constexpr int32_t kPlus = 10;
inline constexpr int32_t kPad = 11;
inline constexpr int32_t kAnswerSlot = 12;
inline constexpr int32_t kQueryShapeOf = 13;
inline constexpr int32_t kQueryMajority = 14;
inline constexpr int32_t kColor0 = 15;  // 15..22
inline constexpr int32_t kShape0 = 23;  // 23..30
inline constexpr int32_t kSize = 64;
}  // namespace vocab

enum class ModalityTag : uint8_t { Image = 0, Text = 1, Pad = 2 };
enum class TaskKind : uint8_t { CrossModal = 0, TextOnly = 1, ImageOnly = 2 };

const char* task_name(TaskKind t);
TaskKind task_from_name(const std::string& s);
// Closed answer vocabulary per task (digits / shapes / colors), used by
// multiple-choice style evaluation.
std::vector<int32_t> answer_candidates(TaskKind t);

inline constexpr int kPatchCount = 16;    // patches per image
inline constexpr int kPatchDim = 16;      // synthetic patch-feature width
inline constexpr int kAttrCount = 8;      // distinct colors / shapes
inline constexpr double kPatchNoise = 0.05;

// --- examples ---------------------------------------------------------------
struct SyntheticExample {
    TaskKind task = TaskKind::TextOnly;
    uint64_t seed = 0;
    Tensor patch_features;  // [m, kPatchDim] float64, empty when m == 0
    std::vector<std::pair<int, int>> patch_attrs;  // (color_id, shape_id) per patch
    std::vector<int32_t> text_ids;
    int32_t answer_position = 0;  // absolute position (m + text offset)
    int32_t answer_id = 0;

    int64_t image_tokens() const { return static_cast<int64_t>(patch_attrs.size()); }
    int64_t total_tokens() const { return image_tokens() + static_cast<int64_t>(text_ids.size()); }
};

// Deterministic generators; the same seed reproduces the same bytes.
SyntheticExample gen_cross_modal_example(uint64_t seed);
SyntheticExample gen_text_only_example(uint64_t seed);
SyntheticExample gen_image_only_example(uint64_t seed);
SyntheticExample gen_example(TaskKind task, uint64_t seed);

// --- dataset ----------------------------------------------------------------
struct DatasetSizes {
    int64_t cross_modal = 0;
    int64_t text_only = 0;
    int64_t image_only = 0;
    int64_t total() const { return cross_modal + text_only + image_only; }
};

struct Dataset {
    std::vector<SyntheticExample> examples;
    uint64_t seed = 0;

    int64_t size() const { return static_cast<int64_t>(examples.size()); }
};

// Generates sizes.cross_modal/text_only/image_only examples and interleaves
// them in a seeded shuffled order. The 40/30/30 mix is the default used by
// default_train_sizes()/default_eval_sizes().
Dataset make_dataset(const DatasetSizes& sizes, uint64_t seed);
DatasetSizes default_train_sizes();
DatasetSizes default_eval_sizes();

void save_dataset_jsonl(const Dataset& ds, const std::string& path);
Dataset load_dataset_jsonl(const std::string& path);

// --- batching ---------------------------------------------------------------
// A padded batch flattened to batch_size*seq_len rows. Text is padded to the
// batch maximum with the PAD token; pad rows are excluded from the loss mask
// and carry ModalityTag::Pad so routing skips them.
struct Batch {
    int64_t batch_size = 0;
    int64_t seq_len = 0;
    Tensor patch_features;              // [n_patch_rows, kPatchDim], model dtype
    std::vector<int32_t> image_rows;    // destination row per patch row
    std::vector<int32_t> token_ids;     // per text/pad row
    std::vector<int32_t> text_rows;     // destination row per token id
    std::vector<ModalityTag> tags;      // [batch_size*seq_len]
    std::vector<int32_t> pos_ids;       // [batch_size*seq_len]
    std::vector<int32_t> targets;       // [batch_size*seq_len]
    std::vector<uint8_t> loss_mask;     // [batch_size*seq_len]
    std::vector<TaskKind> example_task;
    std::vector<int32_t> answer_rows;   // per example

    int64_t rows() const { return batch_size * seq_len; }
    int64_t non_pad_tokens() const;
};

// allow_padding=false rejects mixed sequence lengths instead of padding.
Batch make_batch(const std::vector<const SyntheticExample*>& examples, Dtype dtype,
                 bool allow_padding = true);

// Deterministic epoch-reshuffling batch iterator (drops the trailing
// partial batch so every step sees a full batch).
class BatchStream {
  public:
    BatchStream(const Dataset& dataset, int64_t batch_size, uint64_t seed, Dtype dtype);
    Batch next();

  private:
    void reshuffle();
    const Dataset* dataset_;
    int64_t batch_size_;
    uint64_t seed_;
    Dtype dtype_;
    int64_t epoch_ = 0;
    size_t cursor_ = 0;
    std::vector<int64_t> order_;
};

// Seed mixing used everywhere deterministic sub-streams are derived.
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0);

}  // namespace moiie
