#include "arpipe/analysis.hpp"

#include "arpipe/prompts.hpp"
#include "arpipe/util/digest.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>

namespace arpipe::analysis {

long long word_count(std::string_view text) {
    return util::word_count(text);
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> words;
    for (const auto w : util::split_words(text)) {
        words.push_back(util::fold_case(w));
    }
    return words;
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

namespace {

// Words cannot contain whitespace, so '\n' joins n-grams collision-free.
std::string ngram_key(const std::vector<std::string>& words, std::size_t at, int n) {
    std::string key = words[at];
    for (int i = 1; i < n; ++i) {
        key += '\n';
        key += words[at + static_cast<std::size_t>(i)];
    }
    return key;
}

std::unordered_map<std::string, long long> ngram_counts(const std::vector<std::string>& words,
                                                        int n) {
    std::unordered_map<std::string, long long> counts;
    if (static_cast<int>(words.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
        ++counts[ngram_key(words, i, n)];
    }
    return counts;
}

} // namespace

double bleu(const std::vector<std::string>& hypothesis,
            const std::vector<std::vector<std::string>>& references, int max_n) {
    if (hypothesis.empty()) throw Error("bleu: empty hypothesis");
    if (references.empty()) throw Error("bleu: no references");
    for (const auto& ref : references) {
        if (ref.empty()) throw Error("bleu: empty reference");
    }
    if (max_n < 1) throw Error("bleu: max_n must be >= 1");

    const auto c = static_cast<long long>(hypothesis.size());
    long long r = static_cast<long long>(references[0].size());
    for (const auto& ref : references) {
        const auto len = static_cast<long long>(ref.size());
        const long long d_new = std::llabs(len - c);
        const long long d_old = std::llabs(r - c);
        if (d_new < d_old || (d_new == d_old && len < r)) r = len;
    }

    const int effective_max = std::min<long long>(max_n, c);
    double log_sum = 0.0;
    for (int n = 1; n <= effective_max; ++n) {
        const auto hyp_counts = ngram_counts(hypothesis, n);
        std::unordered_map<std::string, long long> clip;
        for (const auto& ref : references) {
            for (const auto& [key, count] : ngram_counts(ref, n)) {
                auto& slot = clip[key];
                slot = std::max(slot, count);
            }
        }
        long long matched = 0;
        long long total = 0;
        for (const auto& [key, count] : hyp_counts) {
            total += count;
            const auto it = clip.find(key);
            if (it != clip.end()) matched += std::min(count, it->second);
        }
        if (matched == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    }
    const double bp =
        c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
    return bp * std::exp(log_sum / effective_max);
}

// ---------------------------------------------------------------------------
// Self-BLEU
// ---------------------------------------------------------------------------

namespace {

// Canonical pool: indices into the sorted text list, sample-capped. Sorting
// first makes the pool (and the fixed summation order) independent of input
// order.
std::vector<std::size_t> pick_pool(std::size_t n, int cap, std::uint64_t seed) {
    std::vector<std::size_t> indices(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    if (cap > 0 && n > static_cast<std::size_t>(cap)) {
        util::Rng rng(util::derive_seed(seed, {"selfbleu", "pool"}));
        rng.shuffle(indices);
        indices.resize(static_cast<std::size_t>(cap));
        std::sort(indices.begin(), indices.end());
    }
    return indices;
}

std::vector<double> self_bleu_scores(const std::vector<std::string>& docs,
                                     const SelfBleuOptions& options,
                                     std::vector<std::size_t>* pool_out) {
    std::vector<std::string> sorted = docs;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::vector<std::string>> tokens;
    std::vector<std::string> texts;
    for (auto& text : sorted) {
        auto words = tokenize(text);
        if (words.empty()) continue;
        tokens.push_back(std::move(words));
        texts.push_back(std::move(text));
    }
    if (tokens.size() < 2) throw Error("self_bleu: need at least 2 non-empty documents");

    const auto pool = pick_pool(tokens.size(), options.sample_cap, options.seed);
    if (pool.size() < 2) throw Error("self_bleu: sample cap leaves fewer than 2 documents");
    std::vector<double> scores;
    scores.reserve(pool.size());
    for (const std::size_t i : pool) {
        std::vector<std::vector<std::string>> refs;
        refs.reserve(pool.size() - 1);
        for (const std::size_t j : pool) {
            if (j != i) refs.push_back(tokens[j]);
        }
        scores.push_back(bleu(tokens[i], refs, options.max_n));
    }
    if (pool_out) *pool_out = pool;
    return scores;
}

} // namespace

double self_bleu(const std::vector<std::string>& docs, const SelfBleuOptions& options) {
    const auto scores = self_bleu_scores(docs, options, nullptr);
    double sum = 0.0;
    for (const double s : scores) sum += s;
    return sum / static_cast<double>(scores.size());
}

DiversityReport diversity_report(const std::string& label,
                                 const std::vector<std::pair<std::string, std::string>>& id_texts,
                                 const SelfBleuOptions& options) {
    // Scores are computed over sorted texts; map them back to ids by text
    // identity so the report can name documents.
    std::vector<std::pair<std::string, std::string>> by_text; // (text, id)
    for (const auto& [id, text] : id_texts) by_text.emplace_back(text, id);
    std::sort(by_text.begin(), by_text.end());

    std::vector<std::string> docs;
    for (const auto& [text, _] : by_text) docs.push_back(text);

    std::vector<std::size_t> pool;
    const auto scores = self_bleu_scores(docs, options, &pool);

    // Ids of the kept (non-empty) texts, in the same sorted order the scorer
    // used.
    std::vector<std::string> kept_ids;
    for (const auto& [text, id] : by_text) {
        if (!tokenize(text).empty()) kept_ids.push_back(id);
    }

    DiversityReport report;
    report.label = label;
    report.max_n = options.max_n;
    report.n_docs_sampled = static_cast<int>(pool.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < pool.size(); ++k) {
        report.per_doc.emplace_back(kept_ids[pool[k]], scores[k]);
        sum += scores[k];
    }
    report.mean = sum / static_cast<double>(scores.size());
    return report;
}

namespace {

std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

std::string to_csv(const DiversityReport& report) {
    std::string csv = "id,self_bleu\n";
    for (const auto& [id, score] : report.per_doc) {
        csv += id + "," + format_score(score) + "\n";
    }
    return csv;
}

std::string to_markdown(const DiversityReport& report) {
    std::string md = "# Diversity (self-BLEU)\n\n";
    md += "| label | mean self-BLEU | docs sampled | max n |\n";
    md += "|---|---|---|---|\n";
    md += "| " + report.label + " | " + format_score(report.mean) + " | " +
          std::to_string(report.n_docs_sampled) + " | " + std::to_string(report.max_n) + " |\n";
    return md;
}

ojson to_json(const DiversityReport& report) {
    ojson j;
    j["label"] = report.label;
    j["mean"] = report.mean;
    j["n_docs_sampled"] = report.n_docs_sampled;
    j["max_n"] = report.max_n;
    ojson per_doc = ojson::array();
    for (const auto& [id, score] : report.per_doc) {
        per_doc.push_back(ojson{{"id", id}, {"score", score}});
    }
    j["per_doc"] = per_doc;
    return j;
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

std::vector<CoverageQuestion> load_questions(const std::filesystem::path& path) {
    std::vector<CoverageQuestion> questions;
    const bool found = util::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
        if (util::trim(line).empty()) return;
        try {
            const json j = json::parse(line);
            CoverageQuestion q;
            q.question = j.at("question").get<std::string>();
            q.answer = j.at("answer").get<std::string>();
            q.doc_id = j.at("doc_id").get<std::string>();
            if (q.question.empty() || q.answer.empty() || q.doc_id.empty()) {
                throw Error(path.string() + ":" + std::to_string(line_no) +
                            ": question, answer and doc_id must be non-empty");
            }
            questions.push_back(std::move(q));
        } catch (const json::exception& e) {
            throw Error(path.string() + ":" + std::to_string(line_no) + ": bad question line: " +
                        e.what());
        }
    });
    if (!found) throw Error("questions file not found: " + path.string());
    return questions;
}

std::optional<bool> SubstringJudge::answerable(const std::string&, const std::string& gold_answer,
                                               const std::string& chunk_text) {
    return util::contains_folded(chunk_text, gold_answer);
}

ModelJudge::ModelJudge(backend::BackendClient& client, std::uint64_t seed)
    : client_(client), seed_(seed) {}

std::string ModelJudge::label() const {
    return "model:" + client_.model_id();
}

std::optional<bool> ModelJudge::answerable(const std::string& question, const std::string&,
                                           const std::string& chunk_text) {
    backend::GenerationRequest req;
    req.prompt = prompts::render(prompts::TemplateId::answerability_judge,
                                 {{"question", question}, {"text", chunk_text}});
    req.temperature = 0.0;
    req.seed = util::derive_seed(seed_, {"judge", question, chunk_text});
    req.tag = "judge|" + util::sha256_hex16(question) + "|" + util::sha256_hex16(chunk_text);
    const auto outcome = client_.try_generate(req);
    if (!outcome.ok()) return std::nullopt;
    const std::string verdict = util::fold_case(util::trim(outcome.result->text));
    if (verdict == "yes") return true;
    if (verdict == "no") return false;
    return std::nullopt;
}

MemoizedJudge::MemoizedJudge(Judge& inner, util::DiskMemo& memo) : inner_(inner), memo_(memo) {}

std::optional<bool> MemoizedJudge::answerable(const std::string& question,
                                              const std::string& gold_answer,
                                              const std::string& chunk_text) {
    const std::string key = util::sha256_hex16(question) + ":" +
                            util::sha256_hex16(chunk_text) + ":" + inner_.label();
    if (const auto hit = memo_.get(key)) {
        const std::string v = hit->get<std::string>();
        if (v == "yes") return true;
        if (v == "no") return false;
        return std::nullopt;
    }
    const auto verdict = inner_.answerable(question, gold_answer, chunk_text);
    memo_.put(key, verdict ? (*verdict ? "yes" : "no") : "error");
    return verdict;
}

CoverageReport coverage_curve(const std::vector<CoverageQuestion>& questions,
                              const std::map<std::string, std::vector<std::string>>& chunks_by_doc,
                              Judge& judge, long long k_max) {
    if (k_max < 0) throw Error("coverage: k_max must be >= 0");
    CoverageReport report;
    report.n_questions = static_cast<long long>(questions.size());
    report.judge_label = judge.label();

    // first_yes[i] = 1-based index of the first answerable chunk, or 0.
    std::vector<long long> first_yes(questions.size(), 0);
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const auto& q = questions[i];
        const auto it = chunks_by_doc.find(q.doc_id);
        if (it == chunks_by_doc.end() || it->second.empty()) {
            ++report.never_answerable_docs;
            continue;
        }
        const auto& chunks = it->second;
        const long long limit = std::min<long long>(k_max, static_cast<long long>(chunks.size()));
        for (long long k = 1; k <= limit; ++k) {
            const auto verdict =
                judge.answerable(q.question, q.answer, chunks[static_cast<std::size_t>(k - 1)]);
            if (!verdict) {
                ++report.judge_errors;
                continue;
            }
            if (*verdict) {
                first_yes[i] = k;
                break;
            }
        }
    }

    report.curve.emplace_back(0, 0.0);
    if (questions.empty()) return report;
    for (long long k = 1; k <= k_max; ++k) {
        long long covered = 0;
        for (const long long f : first_yes) {
            if (f != 0 && f <= k) ++covered;
        }
        report.curve.emplace_back(k, static_cast<double>(covered) /
                                         static_cast<double>(questions.size()));
    }
    return report;
}

std::string to_csv(const CoverageReport& report) {
    std::string csv = "k,fraction_answerable\n";
    for (const auto& [k, fraction] : report.curve) {
        csv += std::to_string(k) + "," + format_score(fraction) + "\n";
    }
    return csv;
}

std::string to_markdown(const CoverageReport& report) {
    std::string md = "# Coverage (answerable vs first-k chunks)\n\n";
    md += "judge: " + report.judge_label + ", questions: " + std::to_string(report.n_questions);
    md += ", unanswerable (no chunks): " + std::to_string(report.never_answerable_docs);
    md += ", judge errors: " + std::to_string(report.judge_errors) + "\n\n";
    md += "| k | fraction answerable |\n|---|---|\n";
    for (const auto& [k, fraction] : report.curve) {
        md += "| " + std::to_string(k) + " | " + format_score(fraction) + " |\n";
    }
    return md;
}

ojson to_json(const CoverageReport& report) {
    ojson j;
    j["judge"] = report.judge_label;
    j["n_questions"] = report.n_questions;
    j["never_answerable_docs"] = report.never_answerable_docs;
    j["judge_errors"] = report.judge_errors;
    ojson curve = ojson::array();
    for (const auto& [k, fraction] : report.curve) {
        curve.push_back(ojson{{"k", k}, {"fraction", fraction}});
    }
    j["curve"] = curve;
    return j;
}

std::map<std::string, std::vector<std::string>>
chunks_by_doc(const std::vector<dataset::SyntheticRecord>& records) {
    std::vector<const dataset::SyntheticRecord*> ordered;
    ordered.reserve(records.size());
    for (const auto& rec : records) ordered.push_back(&rec);
    std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) {
        if (a->seed != b->seed) return a->seed < b->seed;
        return a->record_id < b->record_id;
    });
    std::map<std::string, std::vector<std::string>> by_doc;
    for (const auto* rec : ordered) {
        by_doc[rec->doc_id].push_back(dataset::canonical_text(*rec));
    }
    return by_doc;
}

} // namespace arpipe::analysis
