#pragma once

#include "arpipe/backend.hpp"
#include "arpipe/corpus.hpp"
#include "arpipe/util/memo.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace arpipe::evalharness {

struct QAItem {
    std::string question_id;
    std::string question;
    std::string gold_answer;
    std::vector<std::string> ref_doc_ids; // may be empty (closed book only)
    std::string category;                 // empty when absent
};

/// One item per line: question_id, question, answer, ref_doc_ids, category.
std::vector<QAItem> load_benchmark(const std::filesystem::path& path);

enum class AnswerMode { closed_book, gold_context };
enum class GraderMode { string_match, model_grader };

std::string to_string(AnswerMode mode);
std::string to_string(GraderMode mode);
AnswerMode answer_mode_from_string(std::string_view s);
GraderMode grader_mode_from_string(std::string_view s);

enum class Verdict { correct, incorrect, not_attempted };

std::string to_string(Verdict v);

struct GradeVerdict {
    Verdict verdict = Verdict::incorrect;
    std::string grader_label; // "string-match" | "model-grader"
    std::optional<std::string> raw_grader_output;
    bool error_flag = false; // grader failed or stayed unparseable after retry
};

/// The candidate answer, verbatim from the backend. gold_context mode
/// requires a non-empty, resolvable ref_doc_ids list and puts the reference
/// bodies before the question; closed_book prompts with the question alone.
std::string answer(const QAItem& item, AnswerMode mode, backend::BackendClient& client,
                   const corpus::DocStore& docs, std::uint64_t seed);

/// string_match: correct iff the case-folded gold answer is a substring of
/// the case-folded candidate (never not_attempted). model_grader: fixed
/// three-way grading prompt at temperature 0, parsed strictly; unparseable
/// output is retried once with a fresh seed, then scored incorrect with the
/// error flag set. Verdicts are cached in `memo` when provided, keyed by
/// (question digest, answer digest, grader label).
GradeVerdict grade(const QAItem& item, const std::string& answer, GraderMode mode,
                   backend::BackendClient* client, std::uint64_t seed,
                   util::DiskMemo* memo = nullptr);

struct ItemResult {
    std::string question_id;
    std::string category;
    std::string answer;
    GradeVerdict grade;
    bool answer_failed = false; // backend never produced an answer; graded as ""
};

struct CategoryStats {
    long long total = 0;
    long long correct = 0;
};

struct EvalReport {
    AnswerMode mode = AnswerMode::closed_book;
    GraderMode grader_mode = GraderMode::string_match;
    std::string grader_label;
    long long total = 0;
    long long correct = 0;
    long long incorrect = 0;
    long long not_attempted = 0;
    long long answer_failures = 0;
    long long grader_errors = 0;
    double accuracy = 0.0;
    std::map<std::string, CategoryStats> per_category; // only when categories present
    std::vector<ItemResult> items;                     // sorted by question_id
};

/// Answers then grades every item exactly once, with the client's bounded
/// parallelism. Items are processed in question_id order, so the report is a
/// pure function of (benchmark, seed, backend behavior, memo contents).
EvalReport evaluate(const std::vector<QAItem>& benchmark, AnswerMode mode,
                    GraderMode grader_mode, backend::BackendClient& client,
                    const corpus::DocStore& docs, std::uint64_t seed,
                    util::DiskMemo* verdict_memo = nullptr);

std::string to_markdown(const EvalReport& report);
std::string to_csv(const EvalReport& report);
ojson item_to_json(const ItemResult& item);
ojson to_json(const EvalReport& report);

} // namespace arpipe::evalharness
