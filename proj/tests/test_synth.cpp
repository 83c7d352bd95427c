#include <doctest.h>

#include <array>
#include <filesystem>
#include <fstream>

#include "moiie/data.hpp"
#include "test_helpers.hpp"

using namespace moiie;

TEST_SUITE_BEGIN("synth");

namespace {

// Independent labeler: reads only patch_attrs/text_ids, never the generator
// internals.
int32_t brute_force_label(const SyntheticExample& ex) {
    switch (ex.task) {
        case TaskKind::TextOnly: {
            const int a = ex.text_ids.at(0) - vocab::kDigit0;
            const int b = ex.text_ids.at(1) - vocab::kDigit0;
            return static_cast<int32_t>(vocab::kDigit0 + (a + b) % 10);
        }
        case TaskKind::CrossModal: {
            const int color = ex.text_ids.at(1) - vocab::kColor0;
            int found = -1, hits = 0;
            for (const auto& [c, s] : ex.patch_attrs)
                if (c == color) {
                    found = s;
                    ++hits;
                }
            REQUIRE(hits == 1);
            return static_cast<int32_t>(vocab::kShape0 + found);
        }
        case TaskKind::ImageOnly: {
            std::array<int, kAttrCount> count{};
            for (const auto& [c, s] : ex.patch_attrs) ++count[static_cast<size_t>(c)];
            int best = 0;
            for (int c = 1; c < kAttrCount; ++c)
                if (count[static_cast<size_t>(c)] > count[static_cast<size_t>(best)]) best = c;
            return static_cast<int32_t>(vocab::kColor0 + best);
        }
    }
    return -1;
}

bool examples_identical(const SyntheticExample& a, const SyntheticExample& b) {
    return a.task == b.task && a.seed == b.seed && a.patch_attrs == b.patch_attrs &&
           a.text_ids == b.text_ids && a.answer_position == b.answer_position &&
           a.answer_id == b.answer_id &&
           (a.patch_attrs.empty() || a.patch_features.values_equal(b.patch_features));
}

}  // namespace

TEST_CASE("cross-modal examples") {
    SUBCASE("structure and label rule") {
        for (uint64_t seed = 0; seed < 300; ++seed) {
            SyntheticExample ex = gen_cross_modal_example(seed);
            CHECK(ex.patch_attrs.size() == kPatchCount);
            CHECK(ex.patch_features.rows() == kPatchCount);
            CHECK(ex.patch_features.cols() == kPatchDim);
            REQUIRE(ex.text_ids.size() == 3);
            CHECK(ex.text_ids[0] == vocab::kQueryShapeOf);
            CHECK(ex.text_ids[2] == vocab::kAnswerSlot);
            CHECK(ex.answer_position == 18);
            CHECK(ex.answer_id == brute_force_label(ex));  // includes the uniqueness scan
        }
    }
    SUBCASE("determinism") {
        for (uint64_t seed : {0ull, 17ull, 123456789ull})
            CHECK(examples_identical(gen_cross_modal_example(seed), gen_cross_modal_example(seed)));
    }
}

TEST_CASE("text-only examples") {
    SUBCASE("modular sum rule") {
        bool saw_7_plus_5 = false, saw_0_plus_0 = false;
        for (uint64_t seed = 0; seed < 2000; ++seed) {
            SyntheticExample ex = gen_text_only_example(seed);
            REQUIRE(ex.text_ids.size() == 4);
            CHECK(ex.text_ids[2] == vocab::kPlus);
            CHECK(ex.text_ids[3] == vocab::kAnswerSlot);
            CHECK(ex.answer_position == 3);
            CHECK(ex.image_tokens() == 0);
            CHECK(ex.answer_id == brute_force_label(ex));
            const int a = ex.text_ids[0], b = ex.text_ids[1];
            if (a == 7 && b == 5) {
                CHECK(ex.answer_id == 2);  // (7+5) mod 10
                saw_7_plus_5 = true;
            }
            if (a == 0 && b == 0) {
                CHECK(ex.answer_id == 0);
                saw_0_plus_0 = true;
            }
        }
        CHECK(saw_7_plus_5);
        CHECK(saw_0_plus_0);
    }
    SUBCASE("determinism") {
        CHECK(examples_identical(gen_text_only_example(99), gen_text_only_example(99)));
    }
}

TEST_CASE("image-only examples") {
    int ties_seen = 0;
    for (uint64_t seed = 0; seed < 2000; ++seed) {
        SyntheticExample ex = gen_image_only_example(seed);
        REQUIRE(ex.text_ids.size() == 2);
        CHECK(ex.text_ids[0] == vocab::kQueryMajority);
        CHECK(ex.answer_position == 17);
        CHECK(ex.answer_id == brute_force_label(ex));

        // tie-break contract: when the majority count is shared, the lower
        // color id must win
        std::array<int, kAttrCount> count{};
        for (const auto& [c, s] : ex.patch_attrs) ++count[static_cast<size_t>(c)];
        const int label_color = ex.answer_id - vocab::kColor0;
        int max_count = 0;
        for (int c = 0; c < kAttrCount; ++c) max_count = std::max(max_count, count[static_cast<size_t>(c)]);
        int tied = 0;
        for (int c = 0; c < kAttrCount; ++c)
            if (count[static_cast<size_t>(c)] == max_count) {
                ++tied;
                CHECK(label_color <= c);
            }
        CHECK(count[static_cast<size_t>(label_color)] == max_count);
        if (tied > 1) ++ties_seen;
    }
    CHECK(ties_seen > 10);  // the tie-break rule was actually exercised
    CHECK(examples_identical(gen_image_only_example(4), gen_image_only_example(4)));
}

TEST_CASE("dataset assembly") {
    SUBCASE("exact task counts and seeded interleave") {
        Dataset ds = make_dataset({40, 30, 30}, 11);
        CHECK(ds.size() == 100);
        std::array<int, 3> counts{};
        for (const auto& ex : ds.examples) ++counts[static_cast<size_t>(ex.task)];
        CHECK(counts[0] == 40);
        CHECK(counts[1] == 30);
        CHECK(counts[2] == 30);
        // the shuffle must actually interleave tasks
        bool mixed = false;
        for (size_t i = 40; i < ds.examples.size() && !mixed; ++i)
            mixed = ds.examples[i].task == TaskKind::CrossModal;
        CHECK(mixed);
        // determinism
        Dataset again = make_dataset({40, 30, 30}, 11);
        for (int64_t i = 0; i < ds.size(); ++i)
            CHECK(examples_identical(ds.examples[static_cast<size_t>(i)], again.examples[static_cast<size_t>(i)]));
    }
    SUBCASE("empty dataset rejected") {
        CHECK_THROWS_AS(make_dataset({0, 0, 0}, 1), ConfigError);
    }
    SUBCASE("labeler oracle over a mixed dataset") {
        Dataset ds = make_dataset({200, 150, 150}, 23);
        for (const auto& ex : ds.examples) CHECK(ex.answer_id == brute_force_label(ex));
    }
}

TEST_CASE("batch padding contract") {
    SyntheticExample text = gen_text_only_example(8);    // 4 tokens
    SyntheticExample cross = gen_cross_modal_example(9); // 19 tokens
    SyntheticExample image = gen_image_only_example(10); // 18 tokens
    Batch b = make_batch({&text, &cross, &image}, Dtype::F64);
    CHECK(b.seq_len == 19);
    CHECK(b.rows() == 3 * 19);
    CHECK(b.non_pad_tokens() == 4 + 19 + 18);

    // pads sit at the tail of each sequence and are excluded from the loss
    int64_t pad_rows = 0, mask_rows = 0;
    for (size_t r = 0; r < b.tags.size(); ++r) {
        if (b.tags[r] == ModalityTag::Pad) {
            ++pad_rows;
            CHECK(b.loss_mask[r] == 0);
        }
        mask_rows += b.loss_mask[r];
    }
    CHECK(pad_rows == (19 - 4) + 0 + 1);
    CHECK(mask_rows == 3);  // one answer position per example
    CHECK(b.targets[static_cast<size_t>(b.answer_rows[0])] == text.answer_id);

    // pad token ids are written as PAD so they embed like a real token
    for (size_t i = 0; i < b.token_ids.size(); ++i) {
        const int64_t row = b.text_rows[i];
        if (b.tags[static_cast<size_t>(row)] == ModalityTag::Pad) CHECK(b.token_ids[i] == vocab::kPad);
    }
}

TEST_CASE("dataset file round trip") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "moiie_ds_test.jsonl").string();
    Dataset ds = make_dataset({12, 9, 9}, 777);
    save_dataset_jsonl(ds, path);
    Dataset loaded = load_dataset_jsonl(path);
    REQUIRE(loaded.size() == ds.size());
    for (int64_t i = 0; i < ds.size(); ++i)
        CHECK(examples_identical(ds.examples[static_cast<size_t>(i)], loaded.examples[static_cast<size_t>(i)]));
    fs::remove(path);

    SUBCASE("corrupt files are rejected") {
        const std::string bad = (fs::temp_directory_path() / "moiie_ds_bad.jsonl").string();
        {
            std::ofstream out(bad);
            out << "{\"format\":\"moiie-dataset\",\"version\":1,\"seed\":1,\"count\":1}\n";
            out << "{\"task\":\"text_only\",\"seed\":5,\"patch_attrs\":[],\"text_ids\":[1,1,10,12],"
                   "\"answer_position\":3,\"answer_id\":9}\n";  // wrong ids for seed 5
        }
        CHECK_THROWS_AS(load_dataset_jsonl(bad), IoError);
        fs::remove(bad);
        CHECK_THROWS_AS(load_dataset_jsonl("/nonexistent/nowhere.jsonl"), IoError);
    }
}

TEST_CASE("batch stream determinism and full coverage per epoch") {
    Dataset ds = make_dataset({8, 6, 6}, 3);
    BatchStream a(ds, 5, 42, Dtype::F64), b(ds, 5, 42, Dtype::F64);
    for (int i = 0; i < 6; ++i) {
        Batch ba = a.next(), bb = b.next();
        CHECK(ba.token_ids == bb.token_ids);
        CHECK(ba.answer_rows == bb.answer_rows);
        CHECK(ba.patch_features.values_equal(bb.patch_features));
    }
}

TEST_SUITE_END();
