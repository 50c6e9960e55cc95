#include <doctest.h>

#include "arpipe/prompts.hpp"
#include "arpipe/util/jsonio.hpp"

#include <map>
#include <string>
#include <vector>

using namespace arpipe;

namespace {

const std::vector<std::string> kDocs = {
    "X",
    "Line one with {braces} and \"quotes\".\nLine two has a tab\there and unicode: "
    "\xc3\xa9\xc3\xbc\xe4\xb8\x96\xe7\x95\x8c.\n\nFinal line after a blank.",
    "The lighthouse at Cape Arrow was completed in 1884 by the engineer Mare Holt. Its lamp, a "
    "second-order Fresnel lens, was lit for the first time on 3 March 1885. The tower stands 42 "
    "metres tall and was automated in 1963.",
};

const std::vector<std::string> kStrategies = {
    "S",
    "Build a timeline of every dated event.\nFor each entry, note who was involved and {why} it "
    "mattered.",
    "Create a concept map linking every person to the places and dates they are associated "
    "with, then recite the map from memory.",
};

std::string golden(const std::string& name, int binding) {
    return util::read_file("fixtures/prompts/" + name + "_b" + std::to_string(binding) + ".txt");
}

} // namespace

TEST_CASE("generation templates render byte-identically to goldens") {
    for (int b = 0; b < 3; ++b) {
        CAPTURE(b);
        CHECK(prompts::render(prompts::TemplateId::paraphrase, {{"chunk", kDocs[b]}}) ==
              golden("paraphrase", b));
        CHECK(prompts::render(prompts::TemplateId::synth_qa, {{"chunk", kDocs[b]}}) ==
              golden("synth_qa", b));
        CHECK(prompts::render(prompts::TemplateId::strategies_task_agnostic,
                              {{"chunk", kDocs[b]}}) ==
              golden("strategies_task_agnostic", b));
        CHECK(prompts::render(prompts::TemplateId::strategies_task_specific,
                              {{"chunk", kDocs[b]}}) ==
              golden("strategies_task_specific", b));
        CHECK(prompts::render(prompts::TemplateId::apply_strategy,
                              {{"strategy", kStrategies[b]}, {"chunk", kDocs[b]}}) ==
              golden("apply_strategy", b));
    }
}

TEST_CASE("template names round trip") {
    using prompts::TemplateId;
    for (const auto id : {TemplateId::paraphrase, TemplateId::synth_qa,
                          TemplateId::apply_strategy, TemplateId::strategies_task_agnostic,
                          TemplateId::strategies_task_specific, TemplateId::answerability_judge,
                          TemplateId::answer_grader, TemplateId::answer_closed_book,
                          TemplateId::answer_gold_context}) {
        CHECK(prompts::template_from_name(prompts::template_name(id)) == id);
    }
    CHECK_THROWS_AS(prompts::template_from_name("nope"), Error);
}

TEST_CASE("render rejects missing and extra bindings") {
    CHECK_THROWS_WITH_AS(prompts::render(prompts::TemplateId::paraphrase, {}),
                         doctest::Contains("chunk"), Error);
    CHECK_THROWS_WITH_AS(prompts::render(prompts::TemplateId::paraphrase,
                                         {{"chunk", "d"}, {"bogus", "x"}}),
                         doctest::Contains("bogus"), Error);
    CHECK_THROWS_AS(prompts::render(prompts::TemplateId::apply_strategy, {{"chunk", "d"}}),
                    Error);
}

TEST_CASE("substituted text is never rescanned") {
    const auto out = prompts::render(prompts::TemplateId::apply_strategy,
                                     {{"strategy", "{chunk}"}, {"chunk", "BODY"}});
    CHECK(out.find("{chunk}") != std::string::npos);
    CHECK(out.find("BODY") != std::string::npos);
}

TEST_CASE("evaluation templates carry their placeholders") {
    const auto judge = prompts::render(prompts::TemplateId::answerability_judge,
                                       {{"question", "Q?"}, {"text", "T"}});
    CHECK(judge.find("Q?") != std::string::npos);
    CHECK(judge.find("YES or NO") != std::string::npos);

    const auto grader = prompts::render(prompts::TemplateId::answer_grader,
                                        {{"question", "Q?"},
                                         {"gold_answer", "G"},
                                         {"candidate", "C"}});
    CHECK(grader.find("CORRECT, INCORRECT, or NOT_ATTEMPTED") != std::string::npos);

    const auto closed = prompts::render(prompts::TemplateId::answer_closed_book,
                                        {{"question", "Q?"}});
    CHECK(closed.find("Q?") != std::string::npos);

    const auto gold = prompts::render(prompts::TemplateId::answer_gold_context,
                                      {{"documents", "DOCS"}, {"question", "Q?"}});
    CHECK(gold.find("DOCS") < gold.find("Q?"));
}

TEST_CASE("task specific template mentions the marker") {
    const auto body = prompts::template_body(prompts::TemplateId::strategies_task_specific);
    CHECK(std::string(body).find(prompts::kStartStrategiesMarker) != std::string::npos);
}
