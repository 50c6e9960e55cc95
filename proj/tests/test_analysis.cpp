#include "arpipe/analysis.hpp"

#include "arpipe/util/jsonio.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>

using namespace arpipe;

namespace {

std::vector<std::string> toks(const std::string& text) {
    return analysis::tokenize(text);
}

backend::BackendClient mock_client(backend::MockBehavior behavior = {}) {
    backend::BackendPolicy policy;
    policy.max_in_flight = 1;
    policy.backoff_base_ms = 0;
    return backend::BackendClient(std::make_shared<backend::MockBackend>(behavior), policy);
}

std::filesystem::path fresh_path(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("arpipe_analysis_" + name);
    std::filesystem::remove_all(p);
    return p;
}

// Scripted verdicts keyed by chunk text; counts invocations.
struct StubJudge final : analysis::Judge {
    std::map<std::string, std::optional<bool>> verdicts;
    int calls = 0;
    std::string label_text = "stub";
    std::string label() const override { return label_text; }
    std::optional<bool> answerable(const std::string&, const std::string&,
                                   const std::string& chunk_text) override {
        ++calls;
        const auto it = verdicts.find(chunk_text);
        if (it == verdicts.end()) return false;
        return it->second;
    }
};

} // namespace

TEST_CASE("tokenize folds case and keeps punctuation attached") {
    CHECK(toks("The THE the") == std::vector<std::string>{"the", "the", "the"});
    CHECK(toks("End. Stop!") == std::vector<std::string>{"end.", "stop!"});
    CHECK(toks("") == std::vector<std::string>{});
    CHECK(analysis::word_count("one  two\tthree\n") == 3);
}

TEST_CASE("sentence bleu matches hand-computed values") {
    SUBCASE("worked four-gram example") {
        const double score = analysis::bleu(toks("a b c d x"), {toks("a b c d e")});
        // (4/5 * 3/4 * 2/3 * 1/2)^(1/4), brevity penalty 1
        CHECK(score == doctest::Approx(std::pow(0.2, 0.25)).epsilon(1e-9));
        CHECK(score == doctest::Approx(0.6687).epsilon(1e-4));
    }

    SUBCASE("identity and disjoint") {
        CHECK(analysis::bleu(toks("a b c d e"), {toks("a b c d e")}) == doctest::Approx(1.0));
        CHECK(analysis::bleu(toks("a b c d"), {toks("e f g h")}) == 0.0);
    }

    SUBCASE("clipping caps repeated n-grams at the reference count") {
        CHECK(analysis::bleu(toks("a a a a"), {toks("a a")}, 1) == doctest::Approx(0.5));
    }

    SUBCASE("short hypotheses cap the n-gram order") {
        CHECK(analysis::bleu(toks("a b"), {toks("a b")}) == doctest::Approx(1.0));
    }

    SUBCASE("brevity penalty against the closest reference") {
        const double score = analysis::bleu(toks("a b c"), {toks("a b c d e f")});
        CHECK(score == doctest::Approx(std::exp(1.0 - 2.0)).epsilon(1e-12));
    }

    SUBCASE("closest-length ties break to the shorter reference") {
        const double score =
            analysis::bleu(toks("a b c d"), {toks("a b c"), toks("a b c d e")});
        CHECK(score == doctest::Approx(1.0)); // r=3 < c=4: no penalty
    }

    SUBCASE("clip max is taken across references") {
        // "a a" appears twice in the second reference only.
        const double p1 = analysis::bleu(toks("a a a"), {toks("a b"), toks("a a a b")}, 1);
        CHECK(p1 == doctest::Approx(1.0));
    }

    SUBCASE("validation") {
        CHECK_THROWS_AS(analysis::bleu({}, {toks("a")}), Error);
        CHECK_THROWS_AS(analysis::bleu(toks("a"), {}), Error);
        CHECK_THROWS_AS(analysis::bleu(toks("a"), {{}}), Error);
        CHECK_THROWS_AS(analysis::bleu(toks("a"), {toks("a")}, 0), Error);
    }
}

TEST_CASE("self-bleu pools sorted texts and averages leave-one-out scores") {
    SUBCASE("identical corpus scores one, disjoint scores zero") {
        CHECK(analysis::self_bleu({"a b c", "a b c", "a b c"}) == doctest::Approx(1.0));
        CHECK(analysis::self_bleu({"a b", "c d", "e f"}) == 0.0);
    }

    SUBCASE("input order is irrelevant") {
        std::vector<std::string> docs = {"the cat sat", "a dog ran fast", "the cat sat down",
                                         "birds fly south", "a dog ran"};
        const double base = analysis::self_bleu(docs);
        util::Rng rng(3);
        for (int i = 0; i < 5; ++i) {
            rng.shuffle(docs);
            CHECK(analysis::self_bleu(docs) == base);
        }
    }

    SUBCASE("empty documents are dropped before pooling") {
        CHECK(analysis::self_bleu({"", "a b c", "a b c", "  "}) == doctest::Approx(1.0));
        CHECK_THROWS_AS(analysis::self_bleu({"", "a b"}), Error);
        CHECK_THROWS_AS(analysis::self_bleu({"only one"}), Error);
    }

    SUBCASE("sample cap restricts the pool deterministically") {
        std::vector<std::string> docs;
        for (int i = 0; i < 10; ++i) docs.push_back("doc number " + std::to_string(i));
        analysis::SelfBleuOptions opt;
        opt.sample_cap = 4;
        opt.seed = 9;
        const double a = analysis::self_bleu(docs, opt);
        const double b = analysis::self_bleu(docs, opt);
        CHECK(a == b);
        std::vector<std::pair<std::string, std::string>> id_texts;
        for (int i = 0; i < 10; ++i) id_texts.emplace_back("id" + std::to_string(i), docs[i]);
        const auto report = analysis::diversity_report("lbl", id_texts, opt);
        CHECK(report.n_docs_sampled == 4);
        CHECK(report.per_doc.size() == 4);
    }
}

TEST_CASE("diversity report maps scores back to document ids") {
    const std::vector<std::pair<std::string, std::string>> id_texts = {
        {"idz", "z z z"}, {"idb", "a b c d"}, {"ida", "a b c d"}};
    const auto report = analysis::diversity_report("paraphrase", id_texts);
    CHECK(report.label == "paraphrase");
    REQUIRE(report.per_doc.size() == 3);
    // Pool order is sorted (text, id): the duplicate text's ids stay sorted.
    CHECK(report.per_doc[0].first == "ida");
    CHECK(report.per_doc[1].first == "idb");
    CHECK(report.per_doc[2].first == "idz");
    CHECK(report.per_doc[0].second == doctest::Approx(1.0));
    CHECK(report.per_doc[1].second == doctest::Approx(1.0));
    CHECK(report.per_doc[2].second == 0.0);
    CHECK(report.mean == doctest::Approx(2.0 / 3.0));

    const auto csv = analysis::to_csv(report);
    CHECK(csv.find("id,self_bleu\n") == 0);
    CHECK(csv.find("ida,1.000000") != std::string::npos);
    CHECK(csv.find("idz,0.000000") != std::string::npos);
    const auto md = analysis::to_markdown(report);
    CHECK(md.find("paraphrase") != std::string::npos);
    CHECK(md.find("0.666667") != std::string::npos);
    const auto j = analysis::to_json(report);
    CHECK(j.at("per_doc").size() == 3);
    CHECK(j.at("label") == "paraphrase");
}

TEST_CASE("coverage questions load from jsonl with validation") {
    const auto path = fresh_path("questions.jsonl");
    util::write_file_atomic(path,
                            R"({"question":"Q1?","answer":"A1","doc_id":"d1"})"
                            "\n\n"
                            R"({"question":"Q2?","answer":"A2","doc_id":"d2"})"
                            "\n");
    const auto questions = analysis::load_questions(path);
    REQUIRE(questions.size() == 2);
    CHECK(questions[0].question == "Q1?");
    CHECK(questions[1].doc_id == "d2");

    CHECK_THROWS_AS(analysis::load_questions(fresh_path("missing.jsonl")), Error);

    const auto bad = fresh_path("bad.jsonl");
    util::write_file_atomic(bad, "not json\n");
    CHECK_THROWS_WITH_AS(analysis::load_questions(bad), doctest::Contains(":1:"), Error);

    const auto empty_field = fresh_path("empty_field.jsonl");
    util::write_file_atomic(empty_field, R"({"question":"","answer":"A","doc_id":"d"})"
                                         "\n");
    CHECK_THROWS_AS(analysis::load_questions(empty_field), Error);
}

TEST_CASE("substring judge folds case") {
    analysis::SubstringJudge judge;
    CHECK(judge.label() == "substring");
    CHECK(*judge.answerable("q", "Cape Arrow", "the cape arrow lighthouse") == true);
    CHECK(*judge.answerable("q", "Cape Arrow", "a different coast") == false);
}

TEST_CASE("model judge parses strict yes/no from the backend") {
    auto client = mock_client();
    analysis::ModelJudge judge(client, 4);
    CHECK(judge.label() == "model:mock-1");
    // The mock says YES iff a question word of five or more letters appears
    // in the chunk.
    CHECK(*judge.answerable("Where is the lighthouse located?", "gold",
                            "The lighthouse stands on the cape.") == true);
    CHECK(*judge.answerable("Where is the lighthouse located?", "gold",
                            "Nothing of note.") == false);
}

TEST_CASE("memoized judge caches verdicts on disk by question, chunk and label") {
    const auto memo_path = fresh_path("judge_memo.jsonl");
    StubJudge stub;
    stub.verdicts["c1"] = true;
    stub.verdicts["c2"] = std::nullopt;

    {
        util::DiskMemo memo(memo_path);
        analysis::MemoizedJudge judge(stub, memo);
        CHECK(judge.label() == "stub");
        CHECK(*judge.answerable("q", "g", "c1") == true);
        CHECK(*judge.answerable("q", "g", "c1") == true);
        CHECK(stub.calls == 1);
        CHECK_FALSE(judge.answerable("q", "g", "c2").has_value());
        CHECK_FALSE(judge.answerable("q", "g", "c2").has_value());
        CHECK(stub.calls == 2); // errors are cached too
    }

    // Fresh memo over the same file: verdicts replay without inner calls.
    util::DiskMemo memo(memo_path);
    analysis::MemoizedJudge judge(stub, memo);
    CHECK(*judge.answerable("q", "g", "c1") == true);
    CHECK_FALSE(judge.answerable("q", "g", "c2").has_value());
    CHECK(stub.calls == 2);

    // A different label is a different cache line.
    stub.label_text = "other";
    analysis::MemoizedJudge relabeled(stub, memo);
    CHECK(*relabeled.answerable("q", "g", "c1") == true);
    CHECK(stub.calls == 3);
}

TEST_CASE("coverage curve finds the first answerable chunk") {
    std::map<std::string, std::vector<std::string>> chunks;
    chunks["d1"] = {"chunk one", "chunk two", "the gold answer lives here", "chunk four",
                    "chunk five"};

    analysis::SubstringJudge judge;
    const std::vector<analysis::CoverageQuestion> questions = {
        {"Where does it live?", "gold answer lives", "d1"}};
    const auto report = analysis::coverage_curve(questions, chunks, judge, 5);

    REQUIRE(report.curve.size() == 6);
    CHECK(report.curve[0] == std::pair<long long, double>{0, 0.0});
    CHECK(report.curve[1].second == 0.0);
    CHECK(report.curve[2].second == 0.0);
    CHECK(report.curve[3].second == doctest::Approx(1.0));
    CHECK(report.curve[4].second == doctest::Approx(1.0));
    CHECK(report.curve[5].second == doctest::Approx(1.0));
    CHECK(report.n_questions == 1);
    CHECK(report.judge_label == "substring");
    CHECK(report.never_answerable_docs == 0);
    CHECK(report.judge_errors == 0);

    // Monotone by construction.
    for (std::size_t i = 1; i < report.curve.size(); ++i) {
        CHECK(report.curve[i].second >= report.curve[i - 1].second);
    }

    SUBCASE("questions for unknown docs are counted, never covered") {
        const std::vector<analysis::CoverageQuestion> extra = {
            {"Where does it live?", "gold answer lives", "d1"},
            {"Orphan?", "whatever", "missing"}};
        const auto r2 = analysis::coverage_curve(extra, chunks, judge, 5);
        CHECK(r2.never_answerable_docs == 1);
        CHECK(r2.curve[3].second == doctest::Approx(0.5));
    }

    SUBCASE("k_max below the hit leaves the question uncovered") {
        const auto r2 = analysis::coverage_curve(questions, chunks, judge, 2);
        CHECK(r2.curve.back().second == 0.0);
    }

    SUBCASE("k_max zero yields the origin point only") {
        const auto r2 = analysis::coverage_curve(questions, chunks, judge, 0);
        REQUIRE(r2.curve.size() == 1);
        CHECK(r2.curve[0].first == 0);
    }

    SUBCASE("k_max past the chunk list holds the last value") {
        const auto r2 = analysis::coverage_curve(questions, chunks, judge, 9);
        REQUIRE(r2.curve.size() == 10);
        CHECK(r2.curve[9].second == doctest::Approx(1.0));
    }
}

TEST_CASE("coverage judging is lazy and failure-tolerant") {
    SUBCASE("stops at the first yes") {
        StubJudge stub;
        stub.verdicts["c1"] = true;
        std::map<std::string, std::vector<std::string>> chunks;
        chunks["d"] = std::vector<std::string>(100, "cx");
        chunks["d"][0] = "c1";
        const std::vector<analysis::CoverageQuestion> questions = {{"q?", "a", "d"}};
        analysis::coverage_curve(questions, chunks, stub, 100);
        CHECK(stub.calls == 1);
    }

    SUBCASE("judge failures are counted and treated as no") {
        StubJudge stub;
        stub.verdicts["c1"] = false;
        stub.verdicts["c2"] = std::nullopt;
        stub.verdicts["c3"] = true;
        std::map<std::string, std::vector<std::string>> chunks;
        chunks["d"] = {"c1", "c2", "c3"};
        const std::vector<analysis::CoverageQuestion> questions = {{"q?", "a", "d"}};
        const auto report = analysis::coverage_curve(questions, chunks, stub, 3);
        CHECK(report.judge_errors == 1);
        CHECK(report.curve[2].second == 0.0);
        CHECK(report.curve[3].second == doctest::Approx(1.0));
    }

    SUBCASE("negative k_max is rejected") {
        StubJudge stub;
        CHECK_THROWS_AS(analysis::coverage_curve({}, {}, stub, -1), Error);
    }
}

TEST_CASE("coverage emitters carry the curve") {
    std::map<std::string, std::vector<std::string>> chunks;
    chunks["d1"] = {"the answer here"};
    analysis::SubstringJudge judge;
    const auto report =
        analysis::coverage_curve({{"q?", "answer here", "d1"}}, chunks, judge, 2);
    const auto csv = analysis::to_csv(report);
    CHECK(csv.find("k,fraction_answerable\n") == 0);
    CHECK(csv.find("1,1.000000") != std::string::npos);
    const auto md = analysis::to_markdown(report);
    CHECK(md.find("substring") != std::string::npos);
    const auto j = analysis::to_json(report);
    CHECK(j.at("curve").size() == 3);
}

TEST_CASE("chunks regroup by doc in generation order") {
    const auto rec = [](const std::string& doc, std::uint64_t seed, const std::string& text) {
        dataset::SyntheticRecord r;
        r.method = dataset::Method::paraphrase;
        r.doc_id = doc;
        r.text = text;
        r.word_count = util::word_count(text);
        r.prompt_hash = "ph";
        r.model_id = "m";
        r.seed = seed;
        r.record_id = dataset::make_record_id(r.method, doc, std::nullopt, seed);
        return r;
    };
    std::vector<dataset::SyntheticRecord> records = {
        rec("d2", 7, "late"), rec("d1", 9, "third"), rec("d1", 7, "first"),
        rec("d1", 8, "second")};
    const auto grouped = analysis::chunks_by_doc(records);
    REQUIRE(grouped.size() == 2);
    CHECK(grouped.at("d1") == std::vector<std::string>{"first", "second", "third"});
    CHECK(grouped.at("d2") == std::vector<std::string>{"late"});

    // QA records contribute their canonical question-answer text.
    dataset::SyntheticRecord qa;
    qa.method = dataset::Method::synth_qa;
    qa.doc_id = "d3";
    qa.qa_pairs = std::vector<dataset::QaPair>{{"What?", "This"}};
    qa.word_count = 2;
    qa.prompt_hash = "ph";
    qa.model_id = "m";
    qa.seed = 1;
    qa.record_id = dataset::make_record_id(qa.method, qa.doc_id, std::nullopt, qa.seed);
    const auto with_qa = analysis::chunks_by_doc({qa});
    CHECK(with_qa.at("d3") == std::vector<std::string>{"What? This"});
}
