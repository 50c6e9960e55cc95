#pragma once

#include "arpipe/backend.hpp"
#include "arpipe/dataset.hpp"
#include "arpipe/util/memo.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace arpipe::analysis {

/// Maximal runs of non-whitespace characters under Unicode whitespace. The
/// unit every budget and report in the pipeline is denominated in.
long long word_count(std::string_view text);

/// Whitespace words after ASCII case folding, punctuation kept attached.
std::vector<std::string> tokenize(std::string_view text);

/// Sentence BLEU: modified n-gram precision clipped at the per-n-gram
/// maximum across references, uniform geometric mean over n = 1..max_n
/// (capped at the hypothesis length), brevity penalty exp(1 - r/c) against
/// the closest reference length (ties to the shorter). Unsmoothed: any
/// zero precision zeroes the score.
double bleu(const std::vector<std::string>& hypothesis,
            const std::vector<std::vector<std::string>>& references, int max_n = 4);

struct SelfBleuOptions {
    int max_n = 4;
    int sample_cap = 100; // documents scored; also the reference pool size
    std::uint64_t seed = 0;
};

struct DiversityReport {
    std::string label;
    std::vector<std::pair<std::string, double>> per_doc; // id -> score, pool order
    double mean = 0.0;
    int n_docs_sampled = 0;
    int max_n = 4;
};

/// Mean BLEU of each pooled document against the rest of the pool. The pool
/// is chosen from the lexicographically sorted texts, so the result is
/// invariant to input order. Lower = more diverse.
double self_bleu(const std::vector<std::string>& docs, const SelfBleuOptions& options = {});

DiversityReport diversity_report(const std::string& label,
                                 const std::vector<std::pair<std::string, std::string>>& id_texts,
                                 const SelfBleuOptions& options = {});

std::string to_csv(const DiversityReport& report);
std::string to_markdown(const DiversityReport& report);
ojson to_json(const DiversityReport& report);

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

struct CoverageQuestion {
    std::string question;
    std::string answer;
    std::string doc_id;
};

std::vector<CoverageQuestion> load_questions(const std::filesystem::path& path);

class Judge {
public:
    virtual ~Judge() = default;
    virtual std::string label() const = 0;
    /// true = answerable from the chunk; nullopt = judge failure (counted,
    /// treated as not answerable).
    virtual std::optional<bool> answerable(const std::string& question,
                                           const std::string& gold_answer,
                                           const std::string& chunk_text) = 0;
};

/// Case-folded substring test on the gold answer. Exact and free.
class SubstringJudge : public Judge {
public:
    std::string label() const override { return "substring"; }
    std::optional<bool> answerable(const std::string& question, const std::string& gold_answer,
                                   const std::string& chunk_text) override;
};

/// One backend call per (question, chunk): fixed YES/NO prompt at
/// temperature 0, parsed case-insensitively.
class ModelJudge : public Judge {
public:
    ModelJudge(backend::BackendClient& client, std::uint64_t seed);
    std::string label() const override;
    std::optional<bool> answerable(const std::string& question, const std::string& gold_answer,
                                   const std::string& chunk_text) override;

private:
    backend::BackendClient& client_;
    std::uint64_t seed_;
};

/// Verdicts cached by (question digest, chunk digest, judge label).
class MemoizedJudge : public Judge {
public:
    MemoizedJudge(Judge& inner, util::DiskMemo& memo);
    std::string label() const override { return inner_.label(); }
    std::optional<bool> answerable(const std::string& question, const std::string& gold_answer,
                                   const std::string& chunk_text) override;

private:
    Judge& inner_;
    util::DiskMemo& memo_;
};

struct CoverageReport {
    std::vector<std::pair<long long, double>> curve; // (k, fraction), k=0 first
    long long n_questions = 0;
    std::string judge_label;
    long long never_answerable_docs = 0; // questions whose doc has no chunks
    long long judge_errors = 0;
};

/// Fraction of questions answerable from at least one of the first k chunks
/// of their source document, for k = 0..k_max. Chunks are judged lazily in
/// order, so a question stops consuming judge calls at its first yes.
CoverageReport coverage_curve(const std::vector<CoverageQuestion>& questions,
                              const std::map<std::string, std::vector<std::string>>& chunks_by_doc,
                              Judge& judge, long long k_max);

std::string to_csv(const CoverageReport& report);
std::string to_markdown(const CoverageReport& report);
ojson to_json(const CoverageReport& report);

/// Per-document chunk texts in generation order (ascending record seed,
/// record_id as tie-break).
std::map<std::string, std::vector<std::string>>
chunks_by_doc(const std::vector<dataset::SyntheticRecord>& records);

} // namespace arpipe::analysis
