#include "arpipe/synthgen.hpp"

#include "arpipe/prompts.hpp"
#include "arpipe/util/digest.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>

using namespace arpipe;
using synthgen::StrategyMode;

namespace {

// Transport whose reply is scripted per request. Keeps the job-runner tests
// independent of the mock's prose generator.
struct ScriptBackend final : backend::TextBackend {
    std::function<std::string(const backend::GenerationRequest&)> fn;
    explicit ScriptBackend(std::function<std::string(const backend::GenerationRequest&)> f)
        : fn(std::move(f)) {}
    std::string model_id() const override { return "script"; }
    std::string complete(const backend::GenerationRequest& req) override { return fn(req); }
};

backend::BackendClient make_client(std::shared_ptr<backend::TextBackend> transport,
                                   backend::CallSink sink = {}) {
    backend::BackendPolicy policy;
    policy.max_in_flight = 1;
    policy.max_attempts = 3;
    policy.backoff_base_ms = 0;
    return backend::BackendClient(std::move(transport), policy, std::move(sink));
}

corpus::Document doc_of(std::string id, std::string body) {
    corpus::Document d;
    d.doc_id = std::move(id);
    d.title = d.doc_id;
    d.body = std::move(body);
    d.source_tag = "test";
    return d;
}

std::string words(int n, const std::string& stem = "w") {
    std::string out;
    for (int i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += stem + std::to_string(i);
    }
    return out;
}

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("arpipe_synthgen_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("strategy blocks: prefixes, continuations, preamble, empties") {
    const auto blocks = synthgen::parse_strategy_blocks(
        "Intro line, not a strategy.\n"
        "## First strategy\n"
        "continues here\n"
        "##    \n"
        "##\tTabbed lead\n"
        "## padded   \n"
        "## Last");
    REQUIRE(blocks.size() == 4);
    CHECK(blocks[0] == "First strategy\ncontinues here");
    CHECK(blocks[1] == "Tabbed lead");
    CHECK(blocks[2] == "padded");
    CHECK(blocks[3] == "Last");

    // Interior blank lines survive; only trailing whitespace is stripped.
    const auto multi = synthgen::parse_strategy_blocks("## A\n\ncontinued\n");
    REQUIRE(multi.size() == 1);
    CHECK(multi[0] == "A\n\ncontinued");

    CHECK(synthgen::parse_strategy_blocks("no markers at all").empty());
    CHECK(synthgen::parse_strategy_blocks("").empty());
}

TEST_CASE("strategy block emit/parse round trip") {
    util::Rng rng(2024);
    const std::string vocab[] = {"recall", "timeline", "map", "recite", "dates", "people"};
    for (int iter = 0; iter < 30; ++iter) {
        std::vector<std::string> texts;
        const int count = static_cast<int>(rng.range(1, 6));
        for (int i = 0; i < count; ++i) {
            std::string text;
            const int lines = static_cast<int>(rng.range(1, 4));
            for (int l = 0; l < lines; ++l) {
                if (l) text += '\n';
                const int wn = static_cast<int>(rng.range(1, 5));
                for (int w = 0; w < wn; ++w) {
                    if (w) text += ' ';
                    text += vocab[rng.range(0, 5)];
                }
            }
            texts.push_back(std::move(text));
        }
        std::string emitted = "Preamble that should vanish.\n";
        for (const auto& t : texts) {
            const auto nl = t.find('\n');
            emitted += "## " + t.substr(0, nl == std::string::npos ? t.size() : nl);
            if (nl != std::string::npos) emitted += "\n" + t.substr(nl + 1);
            emitted += '\n';
        }
        CHECK(synthgen::parse_strategy_blocks(emitted) == texts);
    }
}

TEST_CASE("task-specific proposals split at the marker") {
    const auto with = synthgen::parse_proposal(
        StrategyMode::task_specific, "Q1?\nQ2?\n<start_strategies>\n## S1\n## S2");
    REQUIRE(with.raw_question_block.has_value());
    CHECK(*with.raw_question_block == "Q1?\nQ2?");
    CHECK(with.strategy_texts == std::vector<std::string>{"S1", "S2"});
    CHECK_FALSE(with.missing_marker);

    const auto missing =
        synthgen::parse_proposal(StrategyMode::task_specific, "## S1\n## S2");
    CHECK(missing.missing_marker);
    REQUIRE(missing.raw_question_block.has_value());
    CHECK(missing.raw_question_block->empty());
    CHECK(missing.strategy_texts == std::vector<std::string>{"S1", "S2"});

    const auto agnostic =
        synthgen::parse_proposal(StrategyMode::task_agnostic, "## S1\n## S2");
    CHECK_FALSE(agnostic.raw_question_block.has_value());
    CHECK(agnostic.strategy_texts.size() == 2);
}

TEST_CASE("qa lines split at the first question-mark boundary") {
    const auto parse = synthgen::parse_qa_lines(
        "Is A? B? C\n"
        "\n"
        "No split marker here\n"
        "Empty answer?   \n"
        "Where is it? Right here.");
    REQUIRE(parse.pairs.size() == 2);
    CHECK(parse.pairs[0].first == "Is A?");
    CHECK(parse.pairs[0].second == "B? C");
    CHECK(parse.pairs[1].first == "Where is it?");
    CHECK(parse.pairs[1].second == "Right here.");
    CHECK(parse.dropped_lines == 2);

    CHECK(synthgen::parse_qa_lines("").pairs.empty());
    CHECK(synthgen::parse_qa_lines("").dropped_lines == 0);
}

TEST_CASE("proposal outcomes carry ids, flags and raw output") {
    const auto doc = doc_of("d1", "The lighthouse body.");

    SUBCASE("well formed task-agnostic") {
        auto client = make_client(std::make_shared<ScriptBackend>(
            [](const backend::GenerationRequest&) { return std::string("## Alpha\n## Beta"); }));
        const auto out = synthgen::propose_strategies(doc, StrategyMode::task_agnostic, client,
                                                      /*seed=*/7, /*proposal_ordinal=*/2);
        REQUIRE(out.strategies.size() == 2);
        CHECK(out.strategies[0].strategy_id == "d1:task_agnostic:2:0");
        CHECK(out.strategies[1].strategy_id == "d1:task_agnostic:2:1");
        CHECK(out.strategies[0].doc_id == "d1");
        CHECK(out.strategies[0].mode == StrategyMode::task_agnostic);
        CHECK(out.strategies[0].proposal_ordinal == 2);
        CHECK(out.strategies[1].ordinal == 1);
        CHECK(out.strategies[0].text == "Alpha");
        CHECK(out.raw_text == "## Alpha\n## Beta");
        CHECK(out.model_id == "script");
        const auto prompt = prompts::render(prompts::TemplateId::strategies_task_agnostic,
                                            {{"chunk", doc.body}});
        CHECK(out.prompt_hash == util::sha256_hex16(prompt));
        CHECK_FALSE(out.flagged);
        CHECK_FALSE(out.raw_question_block.has_value());
    }

    SUBCASE("zero strategies flags the proposal") {
        auto client = make_client(std::make_shared<ScriptBackend>(
            [](const backend::GenerationRequest&) { return std::string("nothing useful"); }));
        const auto out =
            synthgen::propose_strategies(doc, StrategyMode::task_agnostic, client, 7, 0);
        CHECK(out.strategies.empty());
        CHECK(out.flagged);
        CHECK(out.flag_reason == "zero_strategies");
    }

    SUBCASE("task-specific keeps the question block") {
        auto client = make_client(std::make_shared<ScriptBackend>(
            [](const backend::GenerationRequest&) {
                return std::string("Q one?\n<start_strategies>\n## S");
            }));
        const auto out =
            synthgen::propose_strategies(doc, StrategyMode::task_specific, client, 7, 0);
        REQUIRE(out.raw_question_block.has_value());
        CHECK(*out.raw_question_block == "Q one?");
        CHECK(out.strategies[0].strategy_id == "d1:task_specific:0:0");
        CHECK_FALSE(out.flagged);
    }

    SUBCASE("missing marker flags even with strategies present") {
        auto client = make_client(std::make_shared<ScriptBackend>(
            [](const backend::GenerationRequest&) { return std::string("## S1\n## S2"); }));
        const auto out =
            synthgen::propose_strategies(doc, StrategyMode::task_specific, client, 7, 0);
        CHECK(out.flagged);
        CHECK(out.flag_reason == "missing_marker");
        CHECK(out.strategies.size() == 2);
    }
}

TEST_CASE("single-record operations fill canonical fields") {
    backend::MockBehavior behavior;
    behavior.seed = 5;
    behavior.words_per_output = 40;
    behavior.qa_pairs_per_output = 4;
    auto client = make_client(std::make_shared<backend::MockBackend>(behavior));
    const auto doc = doc_of("doc-a", "The lighthouse at Cape Arrow was completed in 1884.");

    SUBCASE("paraphrase") {
        const auto rec = synthgen::paraphrase(doc, client, /*seed=*/3);
        CHECK(rec.method == dataset::Method::paraphrase);
        CHECK(rec.doc_id == "doc-a");
        CHECK_FALSE(rec.strategy_id.has_value());
        CHECK(rec.model_id == "mock-1");
        CHECK(rec.seed == 3);
        CHECK(rec.word_count == 40);
        CHECK(rec.word_count == util::word_count(rec.text));
        const auto prompt =
            prompts::render(prompts::TemplateId::paraphrase, {{"chunk", doc.body}});
        CHECK(rec.prompt_hash == util::sha256_hex16(prompt));
        CHECK(rec.record_id ==
              dataset::make_record_id(dataset::Method::paraphrase, "doc-a", std::nullopt, 3));
    }

    SUBCASE("apply_strategy checks ownership and tags the method by mode") {
        synthgen::Strategy s;
        s.strategy_id = "doc-a:task_agnostic:0:0";
        s.doc_id = "doc-a";
        s.mode = StrategyMode::task_agnostic;
        s.text = "Build a timeline of the dated events.";
        const auto rec = synthgen::apply_strategy(doc, s, client, 9);
        CHECK(rec.method == dataset::Method::ar_task_agnostic);
        CHECK(rec.strategy_id == s.strategy_id);
        CHECK(rec.strategy_text == s.text);
        CHECK(rec.word_count == 40);

        synthgen::Strategy other = s;
        other.doc_id = "doc-b";
        CHECK_THROWS_AS(synthgen::apply_strategy(doc, other, client, 9), Error);
    }

    SUBCASE("synth_qa parses the pairs it asked for") {
        const auto out = synthgen::synth_qa(doc, client, 4);
        CHECK(out.record.method == dataset::Method::synth_qa);
        REQUIRE(out.record.qa_pairs.has_value());
        CHECK(out.record.qa_pairs->size() == 4);
        CHECK_FALSE(out.zero_pairs);
        CHECK(out.dropped_lines == 0);
        CHECK(out.record.word_count ==
              util::word_count(dataset::canonical_text(out.record)));
    }

    SUBCASE("repeat is local") {
        const auto rec = synthgen::repeat(doc, 6);
        CHECK(rec.method == dataset::Method::repeat);
        CHECK(rec.text == doc.body);
        CHECK(rec.model_id == "local");
        CHECK(rec.prompt_hash == util::sha256_hex16(doc.body));
        CHECK(rec.seed == 6);
    }
}

TEST_CASE("budget loop crosses the word budget then stops") {
    backend::MockBehavior behavior;
    behavior.seed = 1;
    behavior.words_per_output = 100;
    auto client = make_client(std::make_shared<backend::MockBackend>(behavior));

    const std::vector<corpus::Document> docs = {doc_of("a", words(30)),
                                                doc_of("b", words(30, "v"))};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::paraphrase;
    spec.word_budget = 900;
    spec.seed = 11;

    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("budget");
    const auto stats = synthgen::run_generation_job(docs, spec, client, store, dir);

    CHECK(stats.records == 10);
    CHECK(stats.rounds == 5);
    CHECK(stats.words_total == 1000);
    CHECK_FALSE(stats.stalled);
    CHECK(stats.failed_units == 0);

    const auto records = dataset::load_records(dir);
    REQUIRE(records.size() == 10);
    CHECK(std::is_sorted(records.begin(), records.end(),
                         [](const auto& a, const auto& b) { return a.record_id < b.record_id; }));
    std::map<std::uint64_t, int> by_seed;
    for (const auto& r : records) {
        CHECK(r.word_count == 100);
        ++by_seed[r.seed];
    }
    REQUIRE(by_seed.size() == 5); // one seed per round
    for (std::uint64_t s = 11; s < 16; ++s) CHECK(by_seed.at(s) == 2);
}

TEST_CASE("zero budget writes an empty dataset") {
    backend::MockBehavior behavior;
    auto client = make_client(std::make_shared<backend::MockBackend>(behavior));
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::paraphrase;
    spec.word_budget = 0;
    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("zero");
    const auto stats =
        synthgen::run_generation_job({doc_of("a", "one two three")}, spec, client, store, dir);
    CHECK(stats.records == 0);
    CHECK(stats.rounds == 0);
    CHECK(dataset::load_records(dir).empty());
    CHECK(dataset::load_summary(dir).at("records").get<long long>() == 0);
}

TEST_CASE("job validation") {
    backend::MockBehavior behavior;
    auto client = make_client(std::make_shared<backend::MockBackend>(behavior));
    synthgen::MemoryUnitStore store;
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::repeat;
    spec.word_budget = 10;
    const auto dir = fresh_dir("validate");
    CHECK_THROWS_AS(synthgen::run_generation_job({}, spec, client, store, dir), Error);
    spec.word_budget = -1;
    CHECK_THROWS_AS(
        synthgen::run_generation_job({doc_of("a", "x")}, spec, client, store, dir), Error);
    spec.word_budget = 10;
    CHECK_THROWS_AS(synthgen::run_generation_job({doc_of("a", "x"), doc_of("a", "y")}, spec,
                                                 client, store, dir),
                    Error);
}

TEST_CASE("repeat jobs need no backend traffic") {
    backend::MockBehavior behavior;
    behavior.fail_after_requests = 0; // any request would throw
    auto transport = std::make_shared<backend::MockBackend>(behavior);
    auto client = make_client(transport);

    const std::vector<corpus::Document> docs = {doc_of("a", words(100)),
                                                doc_of("b", words(100, "v"))};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::repeat;
    spec.word_budget = 150;
    spec.seed = 4;

    std::vector<backend::CallRecord> sunk;
    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("repeat");
    const auto stats = synthgen::run_generation_job(
        docs, spec, client, store, dir,
        [&](const backend::CallRecord& rec) { sunk.push_back(rec); });

    CHECK(stats.records == 2);
    CHECK(stats.rounds == 1);
    CHECK(transport->requests_served() == 0);
    REQUIRE(sunk.size() == 2);
    for (const auto& rec : sunk) {
        CHECK(rec.status == "ok");
        CHECK(rec.attempt_count == 0);
        CHECK(rec.output_words == 100);
    }
    std::vector<std::string> tags = {sunk[0].tag, sunk[1].tag};
    std::sort(tags.begin(), tags.end());
    CHECK(tags[0] == "a|repeat|0");
    CHECK(tags[1] == "b|repeat|0");
}

TEST_CASE("active reading rotates one strategy per doc per round") {
    backend::MockBehavior behavior;
    behavior.seed = 9;
    behavior.strategies_per_proposal = 2;
    behavior.words_per_output = 50;
    auto client = make_client(std::make_shared<backend::MockBackend>(behavior));

    const std::vector<corpus::Document> docs = {doc_of("d1", words(20)),
                                                doc_of("d2", words(20, "v"))};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::ar_task_agnostic;
    spec.word_budget = 1000000;
    spec.passes_cap = 3;
    spec.seed = 21;

    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("rotate");
    const auto stats = synthgen::run_generation_job(docs, spec, client, store, dir);

    CHECK(stats.rounds == 3);
    CHECK(stats.records == 6);
    CHECK(stats.proposals == 4); // two per doc: 2 strategies each, 3 needed
    CHECK(stats.flagged_proposals == 0);
    CHECK(stats.retired_docs == 0);

    // Round r uses strategies[r]; proposals are consumed in arrival order.
    std::map<std::uint64_t, std::vector<std::string>> ids_by_round_seed;
    for (const auto& r : dataset::load_records(dir)) {
        CHECK(r.method == dataset::Method::ar_task_agnostic);
        REQUIRE(r.strategy_id.has_value());
        REQUIRE(r.strategy_text.has_value());
        if (r.doc_id == "d1") ids_by_round_seed[r.seed].push_back(*r.strategy_id);
    }
    CHECK(ids_by_round_seed.at(21) == std::vector<std::string>{"d1:task_agnostic:0:0"});
    CHECK(ids_by_round_seed.at(22) == std::vector<std::string>{"d1:task_agnostic:0:1"});
    CHECK(ids_by_round_seed.at(23) == std::vector<std::string>{"d1:task_agnostic:1:0"});
}

TEST_CASE("task-specific mode tolerates a missing marker but flags it") {
    backend::MockBehavior behavior;
    behavior.seed = 2;
    behavior.strategies_per_proposal = 2;
    behavior.words_per_output = 30;

    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::ar_task_specific;
    spec.word_budget = 1;
    spec.passes_cap = 1;
    spec.seed = 8;
    const std::vector<corpus::Document> docs = {doc_of("d1", words(15))};

    SUBCASE("marker present") {
        auto client = make_client(std::make_shared<backend::MockBackend>(behavior));
        synthgen::MemoryUnitStore store;
        const auto dir = fresh_dir("ts_ok");
        const auto stats = synthgen::run_generation_job(docs, spec, client, store, dir);
        CHECK(stats.records == 1);
        CHECK(stats.flagged_proposals == 0);
        const auto records = dataset::load_records(dir);
        REQUIRE(records.size() == 1);
        CHECK(records[0].method == dataset::Method::ar_task_specific);
        CHECK(records[0].strategy_id->find(":task_specific:") != std::string::npos);
    }

    SUBCASE("marker suppressed") {
        behavior.emit_marker = false;
        auto client = make_client(std::make_shared<backend::MockBackend>(behavior));
        synthgen::MemoryUnitStore store;
        const auto stats =
            synthgen::run_generation_job(docs, spec, client, store, fresh_dir("ts_flag"));
        CHECK(stats.records == 1); // strategies still usable
        CHECK(stats.flagged_proposals == 1);
    }
}

TEST_CASE("docs retire after two consecutive empty proposals") {
    auto client = make_client(std::make_shared<ScriptBackend>(
        [](const backend::GenerationRequest&) { return std::string("nothing useful"); }));
    const std::vector<corpus::Document> docs = {doc_of("a", words(10)),
                                                doc_of("b", words(10, "v"))};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::ar_task_agnostic;
    spec.word_budget = 500;
    spec.seed = 3;

    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("retire");
    const auto stats = synthgen::run_generation_job(docs, spec, client, store, dir);

    CHECK(stats.stalled);
    CHECK(stats.retired_docs == 2);
    CHECK(stats.proposals == 4);
    CHECK(stats.flagged_proposals == 4);
    CHECK(stats.records == 0);
    CHECK(stats.rounds == 0);
    CHECK(dataset::load_summary(dir).at("stalled").get<bool>());
}

TEST_CASE("one barren doc retires while the rest keep producing") {
    const std::string poison = "zzqq unanswerable";
    auto client = make_client(std::make_shared<ScriptBackend>(
        [&](const backend::GenerationRequest& req) -> std::string {
            const auto shape = backend::classify_prompt(req.prompt);
            if (shape == backend::PromptShape::strategies_task_agnostic) {
                if (req.prompt.find(poison) != std::string::npos) return "no strategies";
                return "## One\n## Two";
            }
            return words(50, "out");
        }));
    const std::vector<corpus::Document> docs = {doc_of("good", words(10)),
                                                doc_of("bad", poison)};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::ar_task_agnostic;
    spec.word_budget = 120;
    spec.seed = 5;

    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("mixed");
    const auto stats = synthgen::run_generation_job(docs, spec, client, store, dir);

    CHECK_FALSE(stats.stalled);
    CHECK(stats.retired_docs == 1);
    CHECK(stats.records == 3); // 50-word outputs against a 120-word budget
    for (const auto& r : dataset::load_records(dir)) CHECK(r.doc_id == "good");
}

TEST_CASE("resume replays stored units without new traffic") {
    backend::MockBehavior behavior;
    behavior.seed = 7;
    behavior.words_per_output = 100;

    const std::vector<corpus::Document> docs = {doc_of("a", words(25)),
                                                doc_of("b", words(25, "v"))};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::paraphrase;
    spec.word_budget = 900;
    spec.seed = 13;

    synthgen::MemoryUnitStore store;
    const auto dir1 = fresh_dir("resume1");
    auto first_transport = std::make_shared<backend::MockBackend>(behavior);
    auto first = make_client(first_transport);
    const auto stats1 = synthgen::run_generation_job(docs, spec, first, store, dir1);
    CHECK(stats1.records == 10);
    CHECK(first_transport->requests_served() == 10);

    // Same store, a transport that would fail on any call: pure replay.
    backend::MockBehavior dead = behavior;
    dead.fail_after_requests = 0;
    auto second = make_client(std::make_shared<backend::MockBackend>(dead));
    const auto dir2 = fresh_dir("resume2");
    const auto stats2 = synthgen::run_generation_job(docs, spec, second, store, dir2);
    CHECK(stats2.records == stats1.records);
    CHECK(stats2.words_total == stats1.words_total);
    CHECK(slurp(dir1 / "records-00000.jsonl") == slurp(dir2 / "records-00000.jsonl"));
}

TEST_CASE("halted jobs resume to the uninterrupted result") {
    backend::MockBehavior behavior;
    behavior.seed = 3;
    behavior.words_per_output = 100;

    const std::vector<corpus::Document> docs = {doc_of("a", words(25)),
                                                doc_of("b", words(25, "u")),
                                                doc_of("c", words(25, "v"))};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::paraphrase;
    spec.word_budget = 500;
    spec.seed = 17;

    // Uninterrupted baseline: 2 rounds x 3 docs.
    const auto base_dir = fresh_dir("halt_base");
    {
        auto client = make_client(std::make_shared<backend::MockBackend>(behavior));
        synthgen::MemoryUnitStore store;
        const auto stats = synthgen::run_generation_job(docs, spec, client, store, base_dir);
        CHECK(stats.records == 6);
        CHECK(stats.rounds == 2);
    }

    // Kill the transport after 4 requests: round two halts mid-batch.
    synthgen::MemoryUnitStore store;
    {
        backend::MockBehavior dying = behavior;
        dying.fail_after_requests = 4;
        auto client = make_client(std::make_shared<backend::MockBackend>(dying));
        CHECK_THROWS_AS(synthgen::run_generation_job(docs, spec, client, store,
                                                     fresh_dir("halt_cut")),
                        synthgen::JobHalted);
        CHECK(store.size() == 4); // three round-one units plus the one that landed
    }

    // Resume with a healthy transport: only the two missing units hit it.
    const auto resumed_dir = fresh_dir("halt_resume");
    auto transport = std::make_shared<backend::MockBackend>(behavior);
    auto client = make_client(transport);
    const auto stats = synthgen::run_generation_job(docs, spec, client, store, resumed_dir);
    CHECK(stats.records == 6);
    CHECK(transport->requests_served() == 2);
    CHECK(slurp(base_dir / "records-00000.jsonl") ==
          slurp(resumed_dir / "records-00000.jsonl"));
}

TEST_CASE("protocol failures burn the unit, not the job") {
    backend::MockBehavior behavior;
    behavior.seed = 6;
    behavior.words_per_output = 100;
    behavior.fail_substring = "POISON";

    std::vector<backend::CallRecord> sunk;
    auto client = make_client(std::make_shared<backend::MockBackend>(behavior),
                              [&](const backend::CallRecord& rec) { sunk.push_back(rec); });

    const std::vector<corpus::Document> docs = {doc_of("a", words(25)),
                                                doc_of("b", "POISON body text")};
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::paraphrase;
    spec.word_budget = 250;
    spec.seed = 2;

    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("poison");
    const auto stats = synthgen::run_generation_job(docs, spec, client, store, dir);

    CHECK(stats.records == 3);
    CHECK(stats.rounds == 3);
    CHECK(stats.failed_units == 3);
    CHECK_FALSE(stats.stalled);
    for (const auto& r : dataset::load_records(dir)) CHECK(r.doc_id == "a");
    CHECK(dataset::load_summary(dir).at("failed_units").get<long long>() == 3);

    int failures = 0;
    for (const auto& rec : sunk) {
        if (rec.status == "protocol") ++failures;
    }
    CHECK(failures == 3);
}

TEST_CASE("qa line drops are counted through the job") {
    auto client = make_client(std::make_shared<ScriptBackend>(
        [](const backend::GenerationRequest&) {
            return std::string("Good question? An answer\n"
                               "bad line without a marker\n"
                               "Another one? Also fine");
        }));
    synthgen::GenJobSpec spec;
    spec.method = dataset::Method::synth_qa;
    spec.word_budget = 1;
    spec.seed = 1;

    synthgen::MemoryUnitStore store;
    const auto dir = fresh_dir("qadrop");
    const auto stats =
        synthgen::run_generation_job({doc_of("a", words(10))}, spec, client, store, dir);
    CHECK(stats.records == 1);
    CHECK(stats.qa_dropped_lines == 1);
    const auto records = dataset::load_records(dir);
    REQUIRE(records.size() == 1);
    REQUIRE(records[0].qa_pairs.has_value());
    CHECK(records[0].qa_pairs->size() == 2);
    CHECK(dataset::load_summary(dir).at("qa_dropped_lines").get<long long>() == 1);
}
