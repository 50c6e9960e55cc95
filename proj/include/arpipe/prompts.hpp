#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace arpipe::prompts {

/// Fixed prompt templates. The first five drive data generation and are the
/// versioned wording this pipeline is built around; the rest are the
/// evaluation and measurement prompts.
enum class TemplateId {
    paraphrase,
    synth_qa,
    apply_strategy,
    strategies_task_agnostic,
    strategies_task_specific,
    answerability_judge,
    answer_grader,
    answer_closed_book,
    answer_gold_context,
};

std::string_view template_body(TemplateId id);
std::vector<std::string> template_placeholders(TemplateId id);
std::string_view template_name(TemplateId id);
TemplateId template_from_name(std::string_view name);

/// Substitutes placeholder values into the template body, verbatim and in a
/// single pass (substituted text is never rescanned). Bindings must cover
/// exactly the template's placeholder set; anything missing or extra is an
/// error naming the placeholder.
std::string render(TemplateId id, const std::map<std::string, std::string>& bindings);

/// Marker separating the self-synthesized question block from the strategy
/// list in task-specific strategy output.
inline constexpr std::string_view kStartStrategiesMarker = "<start_strategies>";

} // namespace arpipe::prompts
