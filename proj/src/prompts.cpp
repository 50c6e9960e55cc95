#include "arpipe/prompts.hpp"

#include "arpipe/util/jsonio.hpp"

#include <algorithm>

namespace arpipe::prompts {

namespace {

#include "prompt_texts.inc"

constexpr std::string_view k_answerability_judge =
    R"PROMPT(Can the following question be answered using only the information in the text below?
Respond with exactly one word: YES or NO.

Question: {question}

Text:
{text})PROMPT";

constexpr std::string_view k_answer_grader =
    R"PROMPT(Grade the candidate answer against the gold answer for the question below.
Respond with exactly one word: CORRECT, INCORRECT, or NOT_ATTEMPTED.
CORRECT means the candidate answer contains the gold answer's information without contradicting it.
NOT_ATTEMPTED means the candidate declined to answer or gave no answer.

Question: {question}
Gold answer: {gold_answer}
Candidate answer: {candidate})PROMPT";

constexpr std::string_view k_answer_closed_book = R"PROMPT(Answer the question concisely.

{question})PROMPT";

constexpr std::string_view k_answer_gold_context =
    R"PROMPT(Answer the question concisely, using the reference documents below.

{documents}

{question})PROMPT";

struct TemplateInfo {
    TemplateId id;
    std::string_view name;
    std::string_view body;
    std::vector<std::string> placeholders;
};

const std::vector<TemplateInfo>& registry() {
    static const std::vector<TemplateInfo> templates = {
        {TemplateId::paraphrase, "paraphrase", k_paraphrase, {"chunk"}},
        {TemplateId::synth_qa, "synth_qa", k_synth_qa, {"chunk"}},
        {TemplateId::apply_strategy, "apply_strategy", k_apply_strategy, {"strategy", "chunk"}},
        {TemplateId::strategies_task_agnostic, "strategies_task_agnostic",
         k_strategies_task_agnostic, {"chunk"}},
        {TemplateId::strategies_task_specific, "strategies_task_specific",
         k_strategies_task_specific, {"chunk"}},
        {TemplateId::answerability_judge, "answerability_judge", k_answerability_judge,
         {"question", "text"}},
        {TemplateId::answer_grader, "answer_grader", k_answer_grader,
         {"question", "gold_answer", "candidate"}},
        {TemplateId::answer_closed_book, "answer_closed_book", k_answer_closed_book, {"question"}},
        {TemplateId::answer_gold_context, "answer_gold_context", k_answer_gold_context,
         {"documents", "question"}},
    };
    return templates;
}

const TemplateInfo& info(TemplateId id) {
    for (const auto& t : registry()) {
        if (t.id == id) return t;
    }
    throw Error("unknown template id");
}

} // namespace

std::string_view template_body(TemplateId id) {
    return info(id).body;
}

std::vector<std::string> template_placeholders(TemplateId id) {
    return info(id).placeholders;
}

std::string_view template_name(TemplateId id) {
    return info(id).name;
}

TemplateId template_from_name(std::string_view name) {
    for (const auto& t : registry()) {
        if (t.name == name) return t.id;
    }
    throw Error("unknown template name: " + std::string(name));
}

std::string render(TemplateId id, const std::map<std::string, std::string>& bindings) {
    const TemplateInfo& tpl = info(id);
    for (const auto& name : tpl.placeholders) {
        if (!bindings.contains(name)) {
            throw Error("render: missing binding for placeholder: " + name);
        }
    }
    for (const auto& [key, _] : bindings) {
        if (std::find(tpl.placeholders.begin(), tpl.placeholders.end(), key) ==
            tpl.placeholders.end()) {
            throw Error("render: binding for unknown placeholder: " + key);
        }
    }

    const std::string_view body = tpl.body;
    std::string out;
    out.reserve(body.size() + 256);
    std::size_t pos = 0;
    while (pos < body.size()) {
        // Earliest occurrence of any declared placeholder from here on.
        std::size_t best = std::string_view::npos;
        const std::string* best_name = nullptr;
        for (const auto& name : tpl.placeholders) {
            const std::string token = "{" + name + "}";
            const std::size_t at = body.find(token, pos);
            if (at < best) {
                best = at;
                best_name = &name;
            }
        }
        if (best == std::string_view::npos) {
            out.append(body.substr(pos));
            break;
        }
        out.append(body.substr(pos, best - pos));
        out.append(bindings.at(*best_name));
        pos = best + best_name->size() + 2;
    }
    return out;
}

} // namespace arpipe::prompts
