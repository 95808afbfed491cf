#include <algorithm>

#include "doctest.h"
#include "test_util.hpp"
#include "trialmatch/corpus.hpp"
#include "trialmatch/error.hpp"

using namespace trialmatch;

namespace {

std::string words(std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += (i ? " t" : "t") + std::to_string(i);
    return s;
}

std::vector<std::string> toks(const std::string& s) { return split_whitespace(s); }

Dataset tiny_dataset() {
    Dataset ds;
    ds.trials.push_back({"NCT1", {{"inc1", CriterionKind::inclusion, "age over 50"}}});
    PatientRecord a{"p1", "NCT1", {{"n1", "note one", "2020-01-01"}}, {}, {1, "eligible"}};
    PatientRecord b{"p2", "NCT1", {}, {{RowCategory::diagnosis, "code", "E11", std::nullopt}}, {0, std::nullopt}};
    ds.patients = {a, b};
    return ds;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("chunk_text stride and tail") {
    auto c = chunk_text(words(10), 4, 1);
    REQUIRE(c.size() == 3);
    CHECK(c[0] == "t0 t1 t2 t3");
    CHECK(c[1] == "t3 t4 t5 t6");
    CHECK(c[2] == "t6 t7 t8 t9");

    auto short_text = chunk_text(words(3), 8, 2);
    REQUIRE(short_text.size() == 1);
    CHECK(short_text[0] == words(3));

    CHECK(chunk_text("", 4, 1).empty());
    CHECK(chunk_text("   \n ", 4, 1).empty());
    CHECK_THROWS_AS(chunk_text(words(5), 4, 4), ConfigError);
    CHECK_THROWS_AS(chunk_text(words(5), 0, 0), ConfigError);
}

TEST_CASE("chunk coverage property") {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = rng.below(60);
        const std::size_t size = 1 + rng.below(10);
        const std::size_t overlap = rng.below(size);
        const auto text = words(n);
        const auto chunks = chunk_text(text, size, overlap);
        std::vector<std::string> rebuilt;
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            auto t = toks(chunks[i]);
            CHECK(t.size() <= size);
            rebuilt.insert(rebuilt.end(), t.begin() + static_cast<std::ptrdiff_t>(i == 0 ? 0 : overlap), t.end());
        }
        CHECK(rebuilt == toks(text));
    }
}

TEST_CASE("chunk_patient modality and ordinals") {
    PatientRecord p{"p", "T", {{"n1", "a b c", {}}, {"n2", "", {}}}, {{RowCategory::medication, "drug", "x", "2020"}}, {}};
    ChunkingConfig cfg{2, 0};
    // notes give "a b", "c"; the row serializes to 6 tokens, so 3 chunks
    auto mixed = chunk_patient(p, Modality::mixed, cfg);
    REQUIRE(mixed.size() == 5);
    for (std::size_t i = 0; i < mixed.size(); ++i) {
        CHECK(mixed[i].ordinal == i);
        CHECK(mixed[i].chunk_id == "p:c" + std::to_string(i));
        CHECK(mixed[i].source == (i < 2 ? ChunkSource::note : ChunkSource::structured));
        CHECK_FALSE(mixed[i].text.empty());
    }
    auto notes = chunk_patient(p, Modality::unstructured, cfg);
    CHECK(notes.size() == 2);
    for (const auto& c : notes) CHECK(c.source == ChunkSource::note);
    auto rows = chunk_patient(p, Modality::structured, cfg);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].text == "medication |");
    CHECK(rows[0].ordinal == 0);
    for (const auto& c : rows) CHECK(c.source == ChunkSource::structured);
}

TEST_CASE("serialize_row template") {
    CHECK(serialize_row({RowCategory::diagnosis, "code", "E11", "2021-06-01"}) == "diagnosis | code = E11 (2021-06-01)");
    CHECK(serialize_row({RowCategory::allergy, "agent", "penicillin", std::nullopt}) == "allergy | agent = penicillin");
}

TEST_CASE("normalize_label mapping") {
    CHECK(normalize_label(DatasetFamily::sigir, "potential").value == 1);
    CHECK(normalize_label(DatasetFamily::sigir, "eligible").value == 1);
    CHECK(normalize_label(DatasetFamily::sigir, "irrelevant").value == 0);
    CHECK(normalize_label(DatasetFamily::trec, "excluded").value == 0);
    CHECK(normalize_label(DatasetFamily::trec, "eligible").value == 1);
    CHECK(normalize_label(DatasetFamily::n2c2, "MET").value == 1);
    CHECK(normalize_label(DatasetFamily::n2c2, "NOT MET").value == 0);
    CHECK(normalize_label(DatasetFamily::n2c2, "MET").raw_class == "MET");
    CHECK_THROWS_WITH_AS(normalize_label(DatasetFamily::sigir, "maybe"), doctest::Contains("potential"), DataError);

    for (auto fam : {DatasetFamily::n2c2, DatasetFamily::sigir, DatasetFamily::trec, DatasetFamily::mcpmd})
        for (const auto& term : taxonomy(fam)) {
            auto once = normalize_label(fam, term);
            auto twice = normalize_label(fam, *once.raw_class);
            CHECK(once == twice);
        }
}

TEST_CASE("jsonl round trip and ordering") {
    auto dir = testutil::temp_dir("corpus_rt");
    auto ds = tiny_dataset();
    write_dataset(ds, dir / "patients.jsonl", dir / "trials.jsonl");
    auto back = load_dataset(dir / "patients.jsonl", dir / "trials.jsonl");
    CHECK(back == ds);
    CHECK(back.patients.size() == 2);
    CHECK(back.trials.size() == 1);
}

TEST_CASE("load_dataset errors") {
    auto dir = testutil::temp_dir("corpus_err");
    const std::string trial = R"({"trial_id":"NCT1","criteria":[{"criterion_id":"c","kind":"inclusion","text":"x"}]})";
    testutil::write_text(dir / "trials.jsonl", trial + "\n");
    auto patient = [](const std::string& id, const std::string& trial_id) {
        return R"({"patient_id":")" + id + R"(","trial_id":")" + trial_id +
               R"(","label":{"value":1,"raw_class":null},"notes":[{"note_id":"n","text":"hello","date":null}],"structured":[]})";
    };

    testutil::write_text(dir / "dangling.jsonl", patient("a", "NCT999") + "\n");
    CHECK_THROWS_WITH_AS(load_dataset(dir / "dangling.jsonl", dir / "trials.jsonl"), doctest::Contains("NCT999"),
                         DataError);

    std::string dup;
    for (int i = 1; i <= 7; ++i) dup += patient(i == 7 ? "p3" : "p" + std::to_string(i), "NCT1") + "\n";
    testutil::write_text(dir / "dup.jsonl", dup);
    CHECK_THROWS_WITH_AS(load_dataset(dir / "dup.jsonl", dir / "trials.jsonl"), doctest::Contains("lines 3 and 7"),
                         DataError);

    testutil::write_text(dir / "bad.jsonl", patient("a", "NCT1") + "\n{not json\n");
    CHECK_THROWS_WITH_AS(load_dataset(dir / "bad.jsonl", dir / "trials.jsonl"), doctest::Contains(":2:"), DataError);

    testutil::write_text(dir / "empty.jsonl", "");
    CHECK_THROWS_WITH_AS(load_dataset(dir / "empty.jsonl", dir / "trials.jsonl"), doctest::Contains("empty"),
                         DataError);
}

TEST_CASE("synthetic determinism and label counts") {
    SyntheticConfig cfg;
    cfg.n_trials = 2;
    cfg.patients_per_trial = 50;
    cfg.positive_fraction = 0.3;
    auto a = generate_synthetic(cfg, 7);
    auto b = generate_synthetic(cfg, 7);
    CHECK(a == b);
    auto dir = testutil::temp_dir("synth_det");
    write_dataset(a, dir / "pa.jsonl", dir / "ta.jsonl");
    write_dataset(b, dir / "pb.jsonl", dir / "tb.jsonl");
    CHECK(testutil::read_text(dir / "pa.jsonl") == testutil::read_text(dir / "pb.jsonl"));
    CHECK(testutil::read_text(dir / "ta.jsonl") == testutil::read_text(dir / "tb.jsonl"));
    CHECK_FALSE(generate_synthetic(cfg, 8) == a);

    cfg.n_trials = 1;
    cfg.patients_per_trial = 100;
    auto c = generate_synthetic(cfg, 1);
    CHECK(std::count_if(c.patients.begin(), c.patients.end(), [](const auto& p) { return p.label.value == 1; }) == 30);

    cfg.positive_fraction = 1.5;
    CHECK_THROWS_AS(generate_synthetic(cfg, 1), ConfigError);
}

TEST_CASE("random split is stratified and disjoint") {
    SyntheticConfig cfg;
    cfg.n_trials = 3;
    cfg.patients_per_trial = 40;
    auto ds = generate_synthetic(cfg, 3);
    SplitSpec spec;
    spec.test_fraction = 0.25;
    spec.seed = 9;
    auto s = make_split(ds, spec);
    CHECK(s.test.size() == 30);
    CHECK(s.train.size() + s.test.size() == ds.patients.size());
    for (const auto& id : s.test) CHECK(s.train.count(id) == 0);
    std::size_t pos_test = 0;
    for (const auto& p : ds.patients) pos_test += p.label.value == 1 && s.test.count(p.patient_id);
    CHECK(pos_test == 9);  // round(0.25 * 36)
    auto again = make_split(ds, spec);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
}

TEST_CASE("cross-trial split exclusion levels") {
    SyntheticConfig cfg;
    cfg.n_trials = 3;
    cfg.patients_per_trial = 100;
    auto ds = generate_synthetic(cfg, 5);
    SplitSpec spec;
    spec.mode = SplitMode::cross_trial;
    spec.target_trial = "SYN002";
    spec.seed = 4;
    for (double e : {1.0, 0.8, 0.6, 0.4, 0.2, 0.0}) {
        spec.exclusion_fraction = e;
        if (e == 0.0) {
            CHECK_THROWS_AS(make_split(ds, spec), DataError);  // empty test set
            continue;
        }
        auto s = make_split(ds, spec);
        std::size_t target_train = 0;
        for (const auto& p : ds.patients) {
            if (p.trial_id != "SYN002") {
                CHECK(s.train.count(p.patient_id) == 1);
                continue;
            }
            target_train += s.train.count(p.patient_id);
            CHECK(s.train.count(p.patient_id) + s.test.count(p.patient_id) == 1);
        }
        CHECK(target_train == static_cast<std::size_t>(std::llround((1.0 - e) * 100)));
        CHECK(s.test.size() == 100 - target_train);
    }
    spec.target_trial = "NOPE";
    CHECK_THROWS_AS(make_split(ds, spec), DataError);
    spec.target_trial.reset();
    CHECK_THROWS_AS(make_split(ds, spec), ConfigError);
}

}
