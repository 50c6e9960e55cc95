#include "arpipe/evalharness.hpp"

#include "arpipe/prompts.hpp"
#include "arpipe/util/digest.hpp"
#include "arpipe/util/text.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

namespace arpipe::evalharness {

std::vector<QAItem> load_benchmark(const std::filesystem::path& path) {
    std::vector<QAItem> items;
    const bool found = util::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
        if (util::trim(line).empty()) return;
        const auto where = [&] { return path.string() + ":" + std::to_string(line_no); };
        try {
            const json j = json::parse(line);
            QAItem item;
            item.question_id = j.at("question_id").get<std::string>();
            item.question = j.at("question").get<std::string>();
            item.gold_answer = j.at("answer").get<std::string>();
            if (j.contains("ref_doc_ids") && !j["ref_doc_ids"].is_null()) {
                item.ref_doc_ids = j["ref_doc_ids"].get<std::vector<std::string>>();
            }
            if (j.contains("category") && !j["category"].is_null()) {
                item.category = j["category"].get<std::string>();
            }
            if (item.question_id.empty()) throw Error(where() + ": empty question_id");
            if (item.question.empty() || item.gold_answer.empty()) {
                throw Error(where() + ": question and answer must be non-empty");
            }
            items.push_back(std::move(item));
        } catch (const json::exception& e) {
            throw Error(where() + ": bad benchmark line: " + e.what());
        }
    });
    if (!found) throw Error("benchmark file not found: " + path.string());
    return items;
}

std::string to_string(AnswerMode mode) {
    return mode == AnswerMode::closed_book ? "closed_book" : "gold_context";
}

std::string to_string(GraderMode mode) {
    return mode == GraderMode::string_match ? "string_match" : "model_grader";
}

AnswerMode answer_mode_from_string(std::string_view s) {
    if (s == "closed_book") return AnswerMode::closed_book;
    if (s == "gold_context") return AnswerMode::gold_context;
    throw Error("unknown answer mode: " + std::string(s));
}

GraderMode grader_mode_from_string(std::string_view s) {
    if (s == "string_match") return GraderMode::string_match;
    if (s == "model_grader") return GraderMode::model_grader;
    throw Error("unknown grader mode: " + std::string(s));
}

std::string to_string(Verdict v) {
    switch (v) {
    case Verdict::correct: return "correct";
    case Verdict::incorrect: return "incorrect";
    case Verdict::not_attempted: return "not_attempted";
    }
    return "incorrect";
}

namespace {

std::string grader_label_for(GraderMode mode) {
    return mode == GraderMode::string_match ? "string-match" : "model-grader";
}

backend::GenerationRequest answer_request(const QAItem& item, AnswerMode mode,
                                          const corpus::DocStore& docs, std::uint64_t seed) {
    backend::GenerationRequest req;
    if (mode == AnswerMode::closed_book) {
        req.prompt =
            prompts::render(prompts::TemplateId::answer_closed_book, {{"question", item.question}});
    } else {
        if (item.ref_doc_ids.empty()) {
            throw Error("gold_context requires ref_doc_ids for question " + item.question_id);
        }
        std::string documents;
        for (const auto& doc_id : item.ref_doc_ids) {
            const auto* doc = docs.find(doc_id);
            if (!doc) {
                throw Error("question " + item.question_id + " references unknown document " +
                            doc_id);
            }
            if (!documents.empty()) documents += "\n\n";
            documents += doc->body;
        }
        req.prompt = prompts::render(prompts::TemplateId::answer_gold_context,
                                     {{"documents", documents}, {"question", item.question}});
    }
    req.temperature = 0.0;
    req.seed = util::derive_seed(seed, {"answer", item.question_id});
    req.tag = "answer|" + item.question_id;
    return req;
}

backend::GenerationRequest grade_request(const QAItem& item, const std::string& candidate,
                                         std::uint64_t seed, int attempt) {
    backend::GenerationRequest req;
    req.prompt = prompts::render(prompts::TemplateId::answer_grader,
                                 {{"question", item.question},
                                  {"gold_answer", item.gold_answer},
                                  {"candidate", candidate}});
    req.temperature = 0.0;
    req.seed = attempt == 0 ? util::derive_seed(seed, {"grade", item.question_id})
                            : util::derive_seed(seed, {"grade", item.question_id, "retry"});
    req.tag = "grade|" + item.question_id;
    return req;
}

std::optional<Verdict> parse_verdict(const std::string& raw) {
    const std::string v = util::fold_case(util::trim(raw));
    if (v == "correct") return Verdict::correct;
    if (v == "incorrect") return Verdict::incorrect;
    if (v == "not_attempted") return Verdict::not_attempted;
    return std::nullopt;
}

std::string memo_key(const QAItem& item, const std::string& candidate, const std::string& label) {
    return util::sha256_hex16(item.question) + ":" + util::sha256_hex16(candidate) + ":" + label;
}

GradeVerdict verdict_from_memo(const json& j, const std::string& label) {
    GradeVerdict gv;
    gv.grader_label = label;
    const std::string verdict = j.at("verdict").get<std::string>();
    if (verdict == "correct") gv.verdict = Verdict::correct;
    else if (verdict == "not_attempted") gv.verdict = Verdict::not_attempted;
    else gv.verdict = Verdict::incorrect;
    if (j.contains("raw") && !j["raw"].is_null()) gv.raw_grader_output = j["raw"].get<std::string>();
    gv.error_flag = j.value("error", false);
    return gv;
}

json verdict_to_memo(const GradeVerdict& gv) {
    json j;
    j["verdict"] = to_string(gv.verdict);
    j["raw"] = gv.raw_grader_output ? json(*gv.raw_grader_output) : json(nullptr);
    j["error"] = gv.error_flag;
    return j;
}

GradeVerdict grade_string_match(const QAItem& item, const std::string& candidate) {
    GradeVerdict gv;
    gv.grader_label = grader_label_for(GraderMode::string_match);
    gv.verdict = util::contains_folded(candidate, item.gold_answer) ? Verdict::correct
                                                                    : Verdict::incorrect;
    return gv;
}

GradeVerdict settle_grader_outcome(const backend::Outcome& outcome, GradeVerdict gv,
                                   bool final_attempt) {
    if (!outcome.ok()) {
        gv.verdict = Verdict::incorrect;
        gv.error_flag = true;
        return gv;
    }
    gv.raw_grader_output = outcome.result->text;
    if (const auto verdict = parse_verdict(outcome.result->text)) {
        gv.verdict = *verdict;
        return gv;
    }
    if (final_attempt) {
        gv.verdict = Verdict::incorrect;
        gv.error_flag = true;
    }
    return gv;
}

} // namespace

std::string answer(const QAItem& item, AnswerMode mode, backend::BackendClient& client,
                   const corpus::DocStore& docs, std::uint64_t seed) {
    return client.generate(answer_request(item, mode, docs, seed)).text;
}

GradeVerdict grade(const QAItem& item, const std::string& candidate, GraderMode mode,
                   backend::BackendClient* client, std::uint64_t seed, util::DiskMemo* memo) {
    if (mode == GraderMode::string_match) return grade_string_match(item, candidate);
    if (!client) throw Error("model_grader requires a backend");

    const std::string label = grader_label_for(mode);
    const std::string key = memo_key(item, candidate, label);
    if (memo) {
        if (const auto hit = memo->get(key)) return verdict_from_memo(*hit, label);
    }

    GradeVerdict gv;
    gv.grader_label = label;
    for (int attempt = 0; attempt < 2; ++attempt) {
        const auto outcome = client->try_generate(grade_request(item, candidate, seed, attempt));
        gv = settle_grader_outcome(outcome, gv, attempt == 1);
        if (!outcome.ok() || gv.error_flag || parse_verdict(outcome.result->text)) break;
    }
    if (memo) memo->put(key, verdict_to_memo(gv));
    return gv;
}

EvalReport evaluate(const std::vector<QAItem>& benchmark, AnswerMode mode, GraderMode grader_mode,
                    backend::BackendClient& client, const corpus::DocStore& docs,
                    std::uint64_t seed, util::DiskMemo* verdict_memo) {
    if (benchmark.empty()) throw Error("evaluate: empty benchmark");
    std::vector<QAItem> items = benchmark;
    std::sort(items.begin(), items.end(),
              [](const QAItem& a, const QAItem& b) { return a.question_id < b.question_id; });
    {
        std::set<std::string> ids;
        for (const auto& item : items) {
            if (!ids.insert(item.question_id).second) {
                throw Error("duplicate question_id: " + item.question_id);
            }
        }
    }

    EvalReport report;
    report.mode = mode;
    report.grader_mode = grader_mode;
    report.grader_label = grader_label_for(grader_mode);
    report.total = static_cast<long long>(items.size());

    // Answer phase. Request construction is eager so unresolvable refs are
    // fatal before any backend traffic.
    std::vector<backend::GenerationRequest> requests;
    requests.reserve(items.size());
    for (const auto& item : items) requests.push_back(answer_request(item, mode, docs, seed));
    const auto outcomes = client.generate_batch(requests);

    report.items.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& res = report.items[i];
        res.question_id = items[i].question_id;
        res.category = items[i].category;
        if (outcomes[i].ok()) {
            res.answer = outcomes[i].result->text;
        } else {
            res.answer_failed = true;
            ++report.answer_failures;
        }
    }

    // Grade phase. Memo hits and string matches resolve locally; the rest go
    // through up to two batched grader passes (retry with a fresh seed).
    if (grader_mode == GraderMode::string_match) {
        for (std::size_t i = 0; i < items.size(); ++i) {
            report.items[i].grade = grade_string_match(items[i], report.items[i].answer);
        }
    } else {
        std::vector<std::size_t> open;
        for (std::size_t i = 0; i < items.size(); ++i) {
            auto& res = report.items[i];
            res.grade.grader_label = report.grader_label;
            if (verdict_memo) {
                const auto hit =
                    verdict_memo->get(memo_key(items[i], res.answer, report.grader_label));
                if (hit) {
                    res.grade = verdict_from_memo(*hit, report.grader_label);
                    continue;
                }
            }
            open.push_back(i);
        }
        for (int attempt = 0; attempt < 2 && !open.empty(); ++attempt) {
            std::vector<backend::GenerationRequest> grade_requests;
            grade_requests.reserve(open.size());
            for (const std::size_t i : open) {
                grade_requests.push_back(grade_request(items[i], report.items[i].answer, seed,
                                                       attempt));
            }
            const auto grade_outcomes = client.generate_batch(grade_requests);
            std::vector<std::size_t> still_open;
            for (std::size_t k = 0; k < open.size(); ++k) {
                const std::size_t i = open[k];
                auto& res = report.items[i];
                res.grade = settle_grader_outcome(grade_outcomes[k], res.grade, attempt == 1);
                const bool unparsed = grade_outcomes[k].ok() &&
                                      !parse_verdict(grade_outcomes[k].result->text);
                if (attempt == 0 && unparsed) {
                    still_open.push_back(i);
                    continue;
                }
                if (verdict_memo) {
                    verdict_memo->put(memo_key(items[i], res.answer, report.grader_label),
                                      verdict_to_memo(res.grade));
                }
            }
            open = std::move(still_open);
        }
    }

    const bool categories_present =
        std::any_of(items.begin(), items.end(), [](const QAItem& q) { return !q.category.empty(); });
    for (const auto& res : report.items) {
        switch (res.grade.verdict) {
        case Verdict::correct: ++report.correct; break;
        case Verdict::incorrect: ++report.incorrect; break;
        case Verdict::not_attempted: ++report.not_attempted; break;
        }
        if (res.grade.error_flag) ++report.grader_errors;
        if (categories_present) {
            auto& stats = report.per_category[res.category.empty() ? "uncategorized"
                                                                   : res.category];
            ++stats.total;
            if (res.grade.verdict == Verdict::correct) ++stats.correct;
        }
    }
    report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.total);
    return report;
}

namespace {

std::string format_accuracy(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

} // namespace

std::string to_markdown(const EvalReport& report) {
    std::string md = "# QA evaluation\n\n";
    md += "mode: " + to_string(report.mode) + ", grader: " + report.grader_label + "\n\n";
    md += "| split | correct | total | accuracy |\n|---|---|---|---|\n";
    md += "| all | " + std::to_string(report.correct) + " | " + std::to_string(report.total) +
          " | " + format_accuracy(report.accuracy) + " |\n";
    for (const auto& [category, stats] : report.per_category) {
        const double acc = static_cast<double>(stats.correct) / static_cast<double>(stats.total);
        md += "| " + category + " | " + std::to_string(stats.correct) + " | " +
              std::to_string(stats.total) + " | " + format_accuracy(acc) + " |\n";
    }
    md += "\nincorrect: " + std::to_string(report.incorrect) +
          ", not attempted: " + std::to_string(report.not_attempted) +
          ", answer failures: " + std::to_string(report.answer_failures) +
          ", grader errors: " + std::to_string(report.grader_errors) + "\n";
    return md;
}

std::string to_csv(const EvalReport& report) {
    std::string csv = "split,correct,total,accuracy\n";
    csv += "all," + std::to_string(report.correct) + "," + std::to_string(report.total) + "," +
           format_accuracy(report.accuracy) + "\n";
    for (const auto& [category, stats] : report.per_category) {
        const double acc = static_cast<double>(stats.correct) / static_cast<double>(stats.total);
        csv += category + "," + std::to_string(stats.correct) + "," + std::to_string(stats.total) +
               "," + format_accuracy(acc) + "\n";
    }
    return csv;
}

ojson item_to_json(const ItemResult& item) {
    ojson j;
    j["question_id"] = item.question_id;
    j["category"] = item.category.empty() ? ojson(nullptr) : ojson(item.category);
    j["answer"] = item.answer;
    j["verdict"] = to_string(item.grade.verdict);
    j["grader_label"] = item.grade.grader_label;
    j["raw_grader_output"] =
        item.grade.raw_grader_output ? ojson(*item.grade.raw_grader_output) : ojson(nullptr);
    j["answer_failed"] = item.answer_failed;
    j["grader_error"] = item.grade.error_flag;
    return j;
}

ojson to_json(const EvalReport& report) {
    ojson j;
    j["mode"] = to_string(report.mode);
    j["grader"] = report.grader_label;
    j["total"] = report.total;
    j["correct"] = report.correct;
    j["incorrect"] = report.incorrect;
    j["not_attempted"] = report.not_attempted;
    j["answer_failures"] = report.answer_failures;
    j["grader_errors"] = report.grader_errors;
    j["accuracy"] = report.accuracy;
    ojson categories = ojson::object();
    for (const auto& [category, stats] : report.per_category) {
        categories[category] = ojson{{"correct", stats.correct},
                                     {"total", stats.total},
                                     {"accuracy", static_cast<double>(stats.correct) /
                                                      static_cast<double>(stats.total)}};
    }
    j["per_category"] = categories;
    ojson items = ojson::array();
    for (const auto& item : report.items) items.push_back(item_to_json(item));
    j["items"] = items;
    return j;
}

} // namespace arpipe::evalharness
