#pragma once

#include "arpipe/dataset.hpp"
#include "arpipe/util/jsonio.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace arpipe::mixer {

/// Weights are carried as decimal strings so proportion arithmetic can be
/// exact; doubles would drift on the published table's values.
struct SourceWeight {
    std::string name;
    std::string weight; // positive decimal literal, e.g. "755.2"
};

struct MixSpec {
    std::vector<SourceWeight> sources;
    long long seq_len_tokens = 4096;
    long long batch_tokens = 4194304;
    std::string target_source;
    long long steps_on_target = 5000;
    std::string learning_rate; // surfaced in the report, consumed by nothing
};

void validate(const MixSpec& spec);

struct MixSchedule {
    std::vector<std::string> source_names;
    std::vector<double> proportions;
    std::vector<std::string> proportions_rendered; // exact ratio at 6 decimals
    std::vector<std::string> percents_rendered;    // exact ratio × 100 at 4 decimals
    std::vector<double> per_source_steps;
    long long steps_on_target = 0;
    long long total_steps = 0;
    long long total_tokens = 0;
    std::string total_tokens_3sf; // e.g. "2.62E+10"
};

/// Exact-rational schedule arithmetic. total_steps divides steps_on_target
/// by the target's nominal proportion (the exact ratio rounded to 4 decimal
/// places, i.e. the percentage as published); dividing by the unrounded
/// ratio does not reproduce the published step counts.
MixSchedule schedule(const MixSpec& spec);

/// One CSV mirroring the published table layout: one column per spec, rows
/// for learning rate, weights, percentages, steps and total tokens.
std::string schedule_csv(const std::vector<std::pair<std::string, MixSpec>>& columns);

/// Round-half-away-from-zero rendering of num/den to `places` decimals.
std::string render_ratio(unsigned long long num, unsigned long long den, int places);

/// Decimal weight strings to integers at a common power-of-ten scale.
std::vector<unsigned long long> scale_weights(const std::vector<std::string>& weights);

/// value rendered to 3 significant figures as d.ddE+ee.
std::string render_3sf(long long value);

// ---------------------------------------------------------------------------
// Interleaving
// ---------------------------------------------------------------------------

/// Emits one source index per call such that after any N calls every
/// source's count deviates from N × proportion by strictly less than 1.
/// Greedy quota rule on exact integer weights; ties break to the lower
/// index, so the stream is fully deterministic.
class Interleaver {
public:
    Interleaver(std::vector<unsigned long long> weights);
    int next();
    const std::vector<long long>& counts() const { return counts_; }

private:
    std::vector<unsigned long long> weights_;
    unsigned long long weight_total_ = 0;
    std::vector<long long> counts_;
    long long emitted_ = 0;
};

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

class TokenCounter {
public:
    virtual ~TokenCounter() = default;
    virtual long long word_cost(std::string_view word) const = 0;
};

/// Deterministic byte-length approximation: max(1, ceil(bytes/4)). The
/// mixture arithmetic only needs a consistent counter; swap in a real
/// tokenizer through the interface when fidelity matters.
class ApproxTokenCounter : public TokenCounter {
public:
    long long word_cost(std::string_view word) const override;
};

struct Segment {
    std::string record_id;
    long long word_begin = 0;
    long long word_end = 0; // exclusive
};

struct PackedSequence {
    std::string source;
    std::vector<Segment> segments;
    long long content_tokens = 0;
    long long separator_tokens = 0;
    long long pad_tokens = 0; // content + separators + pad == seq_len
};

struct PackRecord {
    std::string record_id;
    std::vector<std::string> words;
    std::vector<long long> costs; // same length as words
};

PackRecord make_pack_record(const std::string& record_id, const std::string& text,
                            const TokenCounter& counter, long long seq_len);

/// Greedy per-lane packer: whole records separated by one marker token;
/// a record that does not fit is split at a word boundary and its
/// continuation opens the next sequence of the same lane without a leading
/// separator. Words are atomic (a word's cost is capped at seq_len).
class LanePacker {
public:
    LanePacker(std::string source, long long seq_len);

    /// Feed words of `rec` starting at word index `at`; returns the number
    /// of words consumed. Completed sequences land in `out`.
    long long feed(const PackRecord& rec, long long at, std::vector<PackedSequence>& out);

    /// Close the trailing partial sequence, if any.
    void flush(std::vector<PackedSequence>& out);

    bool mid_record() const { return !segments_.empty() || used_ > 0; }

private:
    void close(std::vector<PackedSequence>& out);

    std::string source_;
    long long seq_len_;
    long long used_ = 0;
    long long separators_ = 0;
    std::vector<Segment> segments_;
};

/// Finite drain: pack `records` in order into one lane, flushing the final
/// partial sequence.
std::vector<PackedSequence> pack_records(const std::vector<PackRecord>& records,
                                         const std::string& source, long long seq_len);

// ---------------------------------------------------------------------------
// Mix run (schedule + interleave + pack + shard output)
// ---------------------------------------------------------------------------

struct MixSourceInput {
    std::string name;
    std::string weight;
    std::filesystem::path dataset_dir;
};

struct MixParams {
    long long seq_len_tokens = 4096;
    long long batch_tokens = 4194304;
    std::string target_source;
    long long steps_on_target = 5000;
    std::string learning_rate;
    std::uint64_t seed = 0;
    long long batches = 1; // batches of batch_tokens/seq_len sequences to emit
    long long shard_cap_bytes = 512ll * 1024 * 1024;
};

struct MixStats {
    MixSchedule sched;
    long long sequences = 0;
    long long batches = 0;
    long long content_tokens = 0;
    long long separator_tokens = 0;
    long long pad_tokens = 0;
    std::vector<long long> per_source_sequences;
    std::vector<long long> per_source_records; // record placements (splits count once)
    std::vector<long long> per_source_epochs;  // epochs started, ceil(records/|source|)
    long long empty_records_skipped = 0;
};

/// Emits `batches` batches of packed sequences to out_dir/shard-*.jsonl plus
/// schedule.csv and summary.json. Fully deterministic under (inputs, seed).
MixStats run_mix(const std::vector<MixSourceInput>& sources, const MixParams& params,
                 const TokenCounter& counter, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

/// Seeded shuffle, then the shortest prefix whose cumulative word_count
/// reaches target_words. Returned rows keep the sampled order.
std::vector<dataset::ManifestRow> subsample(const std::vector<dataset::ManifestRow>& manifest,
                                            long long target_words, std::uint64_t seed);

} // namespace arpipe::mixer
