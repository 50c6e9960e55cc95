#pragma once

#include "arpipe/backend.hpp"
#include "arpipe/corpus.hpp"
#include "arpipe/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace arpipe::synthgen {

enum class StrategyMode { task_agnostic, task_specific };

std::string_view to_string(StrategyMode mode);
StrategyMode strategy_mode_for(dataset::Method method); // AR methods only
dataset::Method method_for(StrategyMode mode);

struct Strategy {
    std::string strategy_id; // doc_id:mode:proposal:ordinal
    std::string doc_id;
    StrategyMode mode = StrategyMode::task_agnostic;
    int proposal_ordinal = 0; // which proposal call produced it
    int ordinal = 0;          // position within that proposal's parse
    std::string text;         // without the "##" prefix, non-empty
};

/// Pure parse of a proposal output: every block introduced by a line
/// beginning "##", in order. A block's text is its lines joined, minus the
/// prefix and surrounding whitespace; empty blocks are skipped.
std::vector<std::string> parse_strategy_blocks(std::string_view output);

struct ProposalParse {
    std::vector<std::string> strategy_texts;
    std::optional<std::string> raw_question_block; // task_specific only
    bool missing_marker = false; // task_specific output lacked <start_strategies>
};

ProposalParse parse_proposal(StrategyMode mode, std::string_view output);

struct QaParse {
    std::vector<dataset::QaPair> pairs;
    int dropped_lines = 0; // non-empty lines with no "? " split point
};

/// One pair per line, split at the first "? "; the question keeps its mark.
QaParse parse_qa_lines(std::string_view output);

struct ProposalOutcome {
    std::vector<Strategy> strategies;
    std::optional<std::string> raw_question_block;
    bool flagged = false;      // zero strategies or missing marker
    std::string flag_reason;
    std::string raw_text;
    std::string prompt_hash;
    std::string model_id;
};

ProposalOutcome propose_strategies(const corpus::Document& doc, StrategyMode mode,
                                   backend::BackendClient& client, std::uint64_t seed,
                                   int proposal_ordinal, const std::string& tag = {});

dataset::SyntheticRecord apply_strategy(const corpus::Document& doc, const Strategy& strategy,
                                        backend::BackendClient& client, std::uint64_t seed,
                                        int max_output_words = 0, double temperature = 1.0,
                                        const std::string& tag = {});

dataset::SyntheticRecord paraphrase(const corpus::Document& doc, backend::BackendClient& client,
                                    std::uint64_t seed, int max_output_words = 0,
                                    double temperature = 1.0, const std::string& tag = {});

struct SynthQaResult {
    dataset::SyntheticRecord record;
    int dropped_lines = 0;
    bool zero_pairs = false;
};

SynthQaResult synth_qa(const corpus::Document& doc, backend::BackendClient& client,
                       std::uint64_t seed, int max_output_words = 0, double temperature = 1.0,
                       const std::string& tag = {});

dataset::SyntheticRecord repeat(const corpus::Document& doc, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Job runner
// ---------------------------------------------------------------------------

/// Persistent unit ledger. Implementations must make put durable before
/// returning; the runner assumes a unit observed done stays done.
struct UnitState {
    std::string status; // "done" or "failed"
    ojson payload;
};

class UnitStore {
public:
    virtual ~UnitStore() = default;
    virtual std::optional<UnitState> get(const std::string& key) = 0;
    virtual void put(const std::string& key, const UnitState& state) = 0;
};

class MemoryUnitStore : public UnitStore {
public:
    std::optional<UnitState> get(const std::string& key) override;
    void put(const std::string& key, const UnitState& state) override;
    std::size_t size() const { return units_.size(); }

private:
    std::map<std::string, UnitState> units_;
};

/// Transient backend exhaustion: the job can be re-run and will pick up
/// where it left off. Maps to the resumable-failure exit code in the CLI.
class JobHalted : public Error {
public:
    using Error::Error;
};

struct GenJobSpec {
    dataset::Method method = dataset::Method::repeat;
    long long word_budget = 0;
    int passes_cap = 0; // <= 0: uncapped
    std::uint64_t seed = 0;
    int max_output_words = 0;
    double temperature = 1.0;
    long long shard_cap_bytes = 512ll * 1024 * 1024;
};

struct GenJobStats {
    long long records = 0;
    long long words_total = 0;
    int rounds = 0;
    long long qa_dropped_lines = 0;
    long long failed_units = 0;
    int proposals = 0;
    int flagged_proposals = 0;
    int retired_docs = 0;
    bool stalled = false;
};

/// Round-based generation over `docs` until the word budget is crossed or
/// passes_cap rounds complete. One unit = one (doc, round) generation; units
/// and strategy proposals persist in `store`, so re-running with the same
/// arguments skips completed work. The dataset (shards, manifest, summary)
/// lands in `out_dir`, records sorted by record_id. `local_sink` receives
/// ledger lines for units that need no backend call (repeat).
GenJobStats run_generation_job(const std::vector<corpus::Document>& docs, const GenJobSpec& spec,
                               backend::BackendClient& client, UnitStore& store,
                               const std::filesystem::path& out_dir,
                               const backend::CallSink& local_sink = {});

} // namespace arpipe::synthgen
