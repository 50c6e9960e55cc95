#include "arpipe/mixer.hpp"

#include "arpipe/util/digest.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

namespace arpipe::mixer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Exact weight arithmetic
// ---------------------------------------------------------------------------

namespace {

struct ParsedWeight {
    unsigned long long digits = 0; // weight with the decimal point removed
    int decimals = 0;
};

ParsedWeight parse_weight(const std::string& s) {
    if (s.empty()) throw Error("weight must be a positive decimal, got empty string");
    ParsedWeight w;
    bool seen_digit = false;
    bool seen_dot = false;
    for (const char c : s) {
        if (c == '.') {
            if (seen_dot) throw Error("weight has two decimal points: " + s);
            seen_dot = true;
            continue;
        }
        if (c < '0' || c > '9') throw Error("weight must be a positive decimal: " + s);
        seen_digit = true;
        if (w.digits > (~0ull - 9) / 10) throw Error("weight too large: " + s);
        w.digits = w.digits * 10 + static_cast<unsigned>(c - '0');
        if (seen_dot) ++w.decimals;
    }
    if (!seen_digit) throw Error("weight must be a positive decimal: " + s);
    if (w.decimals > 9) throw Error("weight has more than 9 decimal places: " + s);
    if (w.digits == 0) throw Error("weight must be positive: " + s);
    return w;
}

unsigned long long pow10u(int n) {
    unsigned long long p = 1;
    for (int i = 0; i < n; ++i) p *= 10;
    return p;
}

} // namespace

std::vector<unsigned long long> scale_weights(const std::vector<std::string>& weights) {
    std::vector<ParsedWeight> parsed;
    int max_decimals = 0;
    for (const auto& s : weights) {
        parsed.push_back(parse_weight(s));
        max_decimals = std::max(max_decimals, parsed.back().decimals);
    }
    std::vector<unsigned long long> units;
    for (const auto& w : parsed) {
        const unsigned long long scale = pow10u(max_decimals - w.decimals);
        if (w.digits > ~0ull / scale) throw Error("weight too large after scaling");
        units.push_back(w.digits * scale);
    }
    return units;
}

std::string render_ratio(unsigned long long num, unsigned long long den, int places) {
    if (den == 0) throw Error("render_ratio: zero denominator");
    using u128 = unsigned __int128;
    const u128 scaled = static_cast<u128>(num) * pow10u(places);
    u128 q = scaled / den;
    const u128 r = scaled % den;
    if (2 * r >= den) ++q;
    const unsigned long long frac_scale = pow10u(places);
    const auto whole = static_cast<unsigned long long>(q / frac_scale);
    const auto frac = static_cast<unsigned long long>(q % frac_scale);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%llu.%0*llu", whole, places, frac);
    return buf;
}

std::string render_3sf(long long value) {
    if (value <= 0) throw Error("render_3sf: value must be positive");
    long long scale = 1;
    int e = 0;
    while (value / scale >= 1000) {
        scale *= 10;
        ++e;
    }
    long long m = (value + scale / 2) / scale; // 100..1000 after rounding
    if (m >= 1000) {
        m /= 10;
        ++e;
    }
    while (m < 100) { // values under 100 scale up exactly
        m *= 10;
        --e;
    }
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%lld.%02lldE+%02d", m / 100, m % 100, e + 2);
    return buf;
}

void validate(const MixSpec& spec) {
    if (spec.sources.empty()) throw Error("mix spec: no sources");
    if (spec.seq_len_tokens < 1) throw Error("mix spec: seq_len must be >= 1");
    if (spec.batch_tokens < 1 || spec.batch_tokens % spec.seq_len_tokens != 0) {
        throw Error("mix spec: seq_len must divide batch_tokens");
    }
    if (spec.steps_on_target < 1) throw Error("mix spec: steps_on_target must be >= 1");
    bool target_found = false;
    for (std::size_t i = 0; i < spec.sources.size(); ++i) {
        const auto& s = spec.sources[i];
        if (s.name.empty()) throw Error("mix spec: source name empty");
        for (std::size_t j = 0; j < i; ++j) {
            if (spec.sources[j].name == s.name) {
                throw Error("mix spec: duplicate source name " + s.name);
            }
        }
        if (s.name == spec.target_source) target_found = true;
    }
    if (!target_found) {
        throw Error("mix spec: target source " + spec.target_source + " not among sources");
    }
}

MixSchedule schedule(const MixSpec& spec) {
    validate(spec);
    std::vector<std::string> weight_strings;
    for (const auto& s : spec.sources) weight_strings.push_back(s.weight);
    const std::vector<unsigned long long> units = scale_weights(weight_strings);
    unsigned long long total = 0;
    for (const auto u : units) {
        if (total > ~0ull - u) throw Error("mix spec: weight total overflow");
        total += u;
    }

    MixSchedule sched;
    sched.steps_on_target = spec.steps_on_target;
    std::size_t target_index = 0;
    for (std::size_t i = 0; i < spec.sources.size(); ++i) {
        sched.source_names.push_back(spec.sources[i].name);
        sched.proportions.push_back(static_cast<double>(units[i]) / static_cast<double>(total));
        sched.proportions_rendered.push_back(render_ratio(units[i], total, 6));
        sched.percents_rendered.push_back(render_ratio(units[i] * 100, total, 4));
        if (spec.sources[i].name == spec.target_source) target_index = i;
    }

    // Nominal proportion: exact ratio rounded to 4 decimals, matching the
    // published percentage precision.
    using u128 = unsigned __int128;
    const u128 n4_raw = static_cast<u128>(units[target_index]) * 10000;
    unsigned long long n4 =
        static_cast<unsigned long long>((2 * n4_raw + total) / (2 * static_cast<u128>(total)));
    if (n4 == 0) {
        throw Error("mix spec: target proportion of " + spec.target_source +
                    " rounds to zero at 4 decimals; cannot derive a step count");
    }
    const u128 steps_scaled = static_cast<u128>(spec.steps_on_target) * 10000;
    sched.total_steps =
        static_cast<long long>((2 * steps_scaled + n4) / (2 * static_cast<u128>(n4)));
    sched.total_tokens = sched.total_steps * spec.batch_tokens;
    sched.total_tokens_3sf = render_3sf(sched.total_tokens);
    for (std::size_t i = 0; i < units.size(); ++i) {
        sched.per_source_steps.push_back(sched.proportions[i] *
                                         static_cast<double>(sched.total_steps));
    }
    return sched;
}

std::string schedule_csv(const std::vector<std::pair<std::string, MixSpec>>& columns) {
    // Union of source names, in first-appearance order.
    std::vector<std::string> names;
    for (const auto& [_, spec] : columns) {
        for (const auto& s : spec.sources) {
            if (std::find(names.begin(), names.end(), s.name) == names.end()) {
                names.push_back(s.name);
            }
        }
    }
    std::vector<MixSchedule> scheds;
    for (const auto& [_, spec] : columns) scheds.push_back(schedule(spec));

    const auto row = [&](const std::string& label, const auto& cell) {
        std::string line = label;
        for (std::size_t c = 0; c < columns.size(); ++c) {
            line += ',';
            line += cell(c);
        }
        return line + "\n";
    };
    const auto source_cell = [&](std::size_t c, const std::string& name,
                                 const auto& fn) -> std::string {
        const auto& spec = columns[c].second;
        for (std::size_t i = 0; i < spec.sources.size(); ++i) {
            if (spec.sources[i].name == name) return fn(c, i);
        }
        return "0";
    };

    std::string csv = row("config", [&](std::size_t c) { return columns[c].first; });
    csv += row("learning_rate", [&](std::size_t c) {
        const auto& lr = columns[c].second.learning_rate;
        return lr.empty() ? std::string("-") : lr;
    });
    for (const auto& name : names) {
        csv += row("weight " + name, [&](std::size_t c) {
            return source_cell(c, name,
                               [&](std::size_t cc, std::size_t i) {
                                   return columns[cc].second.sources[i].weight;
                               });
        });
    }
    for (const auto& name : names) {
        csv += row("percent " + name, [&](std::size_t c) {
            return source_cell(c, name, [&](std::size_t cc, std::size_t i) {
                return scheds[cc].percents_rendered[i];
            });
        });
    }
    csv += row("steps_on_target",
               [&](std::size_t c) { return std::to_string(scheds[c].steps_on_target); });
    csv += row("total_steps", [&](std::size_t c) { return std::to_string(scheds[c].total_steps); });
    csv += row("total_tokens", [&](std::size_t c) { return scheds[c].total_tokens_3sf; });
    return csv;
}

// ---------------------------------------------------------------------------
// Interleaver
// ---------------------------------------------------------------------------

Interleaver::Interleaver(std::vector<unsigned long long> weights)
    : weights_(std::move(weights)), counts_(weights_.size(), 0) {
    if (weights_.empty()) throw Error("interleaver: no sources");
    for (const auto w : weights_) {
        if (w == 0) throw Error("interleaver: zero weight");
        if (weight_total_ > ~0ull - w) throw Error("interleaver: weight overflow");
        weight_total_ += w;
    }
}

int Interleaver::next() {
    // Pick the source with the largest quota deficit for emission t+1:
    // argmax (t+1)·w_i − c_i·W, exact in 128-bit, ties to the lower index.
    using i128 = __int128;
    const i128 t1 = emitted_ + 1;
    int best = 0;
    i128 best_score = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        const i128 score = t1 * static_cast<i128>(weights_[i]) -
                           static_cast<i128>(counts_[i]) * static_cast<i128>(weight_total_);
        if (i == 0 || score > best_score) {
            best = static_cast<int>(i);
            best_score = score;
        }
    }
    ++counts_[static_cast<std::size_t>(best)];
    ++emitted_;
    return best;
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

long long ApproxTokenCounter::word_cost(std::string_view word) const {
    return std::max<long long>(1, (static_cast<long long>(word.size()) + 3) / 4);
}

PackRecord make_pack_record(const std::string& record_id, const std::string& text,
                            const TokenCounter& counter, long long seq_len) {
    PackRecord rec;
    rec.record_id = record_id;
    for (const auto w : util::split_words(text)) {
        rec.words.emplace_back(w);
        rec.costs.push_back(std::min(counter.word_cost(w), seq_len));
    }
    return rec;
}

LanePacker::LanePacker(std::string source, long long seq_len)
    : source_(std::move(source)), seq_len_(seq_len) {
    if (seq_len_ < 2) throw Error("lane packer: seq_len must be >= 2");
}

void LanePacker::close(std::vector<PackedSequence>& out) {
    PackedSequence seq;
    seq.source = source_;
    seq.segments = std::move(segments_);
    seq.separator_tokens = separators_;
    seq.content_tokens = used_ - separators_;
    seq.pad_tokens = seq_len_ - used_;
    out.push_back(std::move(seq));
    segments_.clear();
    used_ = 0;
    separators_ = 0;
}

long long LanePacker::feed(const PackRecord& rec, long long at,
                           std::vector<PackedSequence>& out) {
    const auto n = static_cast<long long>(rec.words.size());
    if (at >= n) return 0;
    // A separator precedes the record's first word here unless it opens the
    // sequence; a continuation chunk always opens one (used_ == 0 then).
    const long long sep = used_ > 0 ? 1 : 0;
    if (used_ + sep + rec.costs[static_cast<std::size_t>(at)] > seq_len_) {
        close(out); // nothing consumed; the caller re-feeds the fresh sequence
        return 0;
    }
    used_ += sep;
    separators_ += sep;
    long long idx = at;
    while (idx < n && used_ + rec.costs[static_cast<std::size_t>(idx)] <= seq_len_) {
        used_ += rec.costs[static_cast<std::size_t>(idx)];
        ++idx;
    }
    segments_.push_back({rec.record_id, at, idx});
    if (idx < n) close(out); // split: continuation opens the next sequence
    return idx - at;
}

void LanePacker::flush(std::vector<PackedSequence>& out) {
    if (used_ > 0 || !segments_.empty()) close(out);
}

std::vector<PackedSequence> pack_records(const std::vector<PackRecord>& records,
                                         const std::string& source, long long seq_len) {
    LanePacker lane(source, seq_len);
    std::vector<PackedSequence> out;
    for (const auto& rec : records) {
        long long at = 0;
        while (at < static_cast<long long>(rec.words.size())) {
            at += lane.feed(rec, at, out);
        }
    }
    lane.flush(out);
    return out;
}

// ---------------------------------------------------------------------------
// Mix run
// ---------------------------------------------------------------------------

namespace {

constexpr char k_separator = '\x1e';

struct Lane {
    std::string name;
    std::vector<PackRecord> records;
    std::unique_ptr<LanePacker> packer;
    std::vector<std::size_t> order; // current epoch's record order
    std::size_t cursor = 0;         // next record within order
    long long epoch = 0;
    long long carry_at = -1;   // word index into the mid-split record, -1 if none
    std::size_t carry_rec = 0; // index into records
    long long records_placed = 0;
    std::uint64_t seed = 0;

    void reshuffle() {
        util::Rng rng(util::derive_seed(seed, {"epoch", name, std::to_string(epoch)}));
        rng.shuffle(order);
        cursor = 0;
    }

    // Produce exactly one full sequence; record supply is infinite via
    // epoch wraparound, so a sequence only ever closes full.
    PackedSequence next_sequence() {
        std::vector<PackedSequence> out;
        while (out.empty()) {
            if (carry_at >= 0) {
                const PackRecord& rec = records[carry_rec];
                const long long consumed = packer->feed(rec, carry_at, out);
                carry_at += consumed;
                if (carry_at >= static_cast<long long>(rec.words.size())) carry_at = -1;
                continue;
            }
            if (cursor >= order.size()) {
                ++epoch;
                reshuffle();
            }
            carry_rec = order[cursor++];
            carry_at = 0;
            ++records_placed;
        }
        // feed() can emit at most one closed sequence per call here because
        // it returns control right after a split.
        if (out.size() != 1) throw Error("lane packer: unexpected multi-sequence emission");
        return std::move(out[0]);
    }
};

std::string sequence_line(const PackedSequence& seq, long long batch,
                          const std::vector<PackRecord>& records,
                          const std::map<std::string, std::size_t>& by_id) {
    ojson j;
    j["batch"] = batch;
    j["source"] = seq.source;
    json segs = json::array();
    std::string text;
    for (const auto& seg : seq.segments) {
        segs.push_back(json::array({seg.record_id, seg.word_begin, seg.word_end}));
        if (!text.empty()) text += k_separator;
        const PackRecord& rec = records[by_id.at(seg.record_id)];
        for (long long w = seg.word_begin; w < seg.word_end; ++w) {
            if (w > seg.word_begin) text += ' ';
            text += rec.words[static_cast<std::size_t>(w)];
        }
    }
    j["segments"] = segs;
    j["pad"] = seq.pad_tokens;
    j["text"] = text;
    return j.dump();
}

} // namespace

MixStats run_mix(const std::vector<MixSourceInput>& sources, const MixParams& params,
                 const TokenCounter& counter, const fs::path& out_dir) {
    MixSpec spec;
    for (const auto& s : sources) spec.sources.push_back({s.name, s.weight});
    spec.seq_len_tokens = params.seq_len_tokens;
    spec.batch_tokens = params.batch_tokens;
    spec.target_source = params.target_source;
    spec.steps_on_target = params.steps_on_target;
    spec.learning_rate = params.learning_rate;

    MixStats stats;
    stats.sched = schedule(spec);
    if (params.batches < 1) throw Error("mix: batches must be >= 1");

    util::ensure_dir(out_dir);

    std::vector<Lane> lanes;
    for (const auto& src : sources) {
        Lane lane;
        lane.name = src.name;
        lane.seed = params.seed;
        lane.packer = std::make_unique<LanePacker>(src.name, params.seq_len_tokens);
        for (const auto& rec : dataset::load_records(src.dataset_dir)) {
            PackRecord pr = make_pack_record(rec.record_id, dataset::canonical_text(rec),
                                             counter, params.seq_len_tokens);
            if (pr.words.empty()) {
                ++stats.empty_records_skipped;
                continue;
            }
            lane.records.push_back(std::move(pr));
        }
        if (lane.records.empty()) {
            throw Error("mix: source " + src.name + " has no non-empty records");
        }
        lane.order.resize(lane.records.size());
        for (std::size_t i = 0; i < lane.order.size(); ++i) lane.order[i] = i;
        lane.reshuffle();
        lanes.push_back(std::move(lane));
    }

    std::vector<std::string> weight_strings;
    for (const auto& s : sources) weight_strings.push_back(s.weight);
    Interleaver interleaver(scale_weights(weight_strings));

    // Per-lane id lookup for resolving segment text.
    std::vector<std::map<std::string, std::size_t>> by_id(lanes.size());
    for (std::size_t l = 0; l < lanes.size(); ++l) {
        for (std::size_t i = 0; i < lanes[l].records.size(); ++i) {
            by_id[l][lanes[l].records[i].record_id] = i;
        }
    }

    const long long seqs_per_batch = params.batch_tokens / params.seq_len_tokens;
    const long long total_sequences = params.batches * seqs_per_batch;
    stats.per_source_sequences.assign(lanes.size(), 0);
    stats.per_source_records.assign(lanes.size(), 0);
    stats.per_source_epochs.assign(lanes.size(), 0);

    int shard_index = 0;
    std::string shard_buf;
    const auto shard_name = [](int index) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "shard-%05d.jsonl", index);
        return std::string(buf);
    };
    const auto roll_shard = [&] {
        util::write_file_atomic(out_dir / shard_name(shard_index), shard_buf);
        shard_buf.clear();
        ++shard_index;
    };

    for (long long s = 0; s < total_sequences; ++s) {
        const int lane_index = interleaver.next();
        Lane& lane = lanes[static_cast<std::size_t>(lane_index)];
        const long long placed_before = lane.records_placed;
        PackedSequence seq = lane.next_sequence();
        stats.per_source_sequences[static_cast<std::size_t>(lane_index)] += 1;
        stats.per_source_records[static_cast<std::size_t>(lane_index)] +=
            lane.records_placed - placed_before;
        stats.content_tokens += seq.content_tokens;
        stats.separator_tokens += seq.separator_tokens;
        stats.pad_tokens += seq.pad_tokens;

        const std::string line =
            sequence_line(seq, s / seqs_per_batch, lane.records,
                          by_id[static_cast<std::size_t>(lane_index)]) +
            "\n";
        if (!shard_buf.empty() &&
            static_cast<long long>(shard_buf.size() + line.size()) > params.shard_cap_bytes) {
            roll_shard();
        }
        shard_buf += line;
    }
    if (!shard_buf.empty() || shard_index == 0) roll_shard();
    stats.sequences = total_sequences;
    stats.batches = params.batches;
    for (std::size_t l = 0; l < lanes.size(); ++l) {
        stats.per_source_epochs[l] = lanes[l].records_placed > 0 ? lanes[l].epoch + 1 : 0;
    }

    util::write_file_atomic(out_dir / "schedule.csv",
                            schedule_csv({{params.target_source, spec}}));

    ojson summary;
    summary["sequences"] = stats.sequences;
    summary["batches"] = stats.batches;
    summary["seq_len_tokens"] = params.seq_len_tokens;
    summary["batch_tokens"] = params.batch_tokens;
    summary["content_tokens"] = stats.content_tokens;
    summary["separator_tokens"] = stats.separator_tokens;
    summary["pad_tokens"] = stats.pad_tokens;
    summary["empty_records_skipped"] = stats.empty_records_skipped;
    ojson per_source = ojson::object();
    for (std::size_t l = 0; l < lanes.size(); ++l) {
        ojson s;
        s["weight"] = sources[l].weight;
        s["proportion"] = stats.sched.proportions_rendered[l];
        s["sequences"] = stats.per_source_sequences[l];
        s["records_placed"] = stats.per_source_records[l];
        s["epochs_started"] = stats.per_source_epochs[l];
        per_source[lanes[l].name] = s;
    }
    summary["sources"] = per_source;
    ojson sched_json;
    sched_json["total_steps"] = stats.sched.total_steps;
    sched_json["total_tokens"] = stats.sched.total_tokens;
    sched_json["total_tokens_3sf"] = stats.sched.total_tokens_3sf;
    sched_json["steps_on_target"] = stats.sched.steps_on_target;
    summary["schedule"] = sched_json;
    util::write_file_atomic(out_dir / "summary.json", summary.dump(2) + "\n");
    return stats;
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

std::vector<dataset::ManifestRow> subsample(const std::vector<dataset::ManifestRow>& manifest,
                                            long long target_words, std::uint64_t seed) {
    if (target_words < 0) throw Error("subsample: target must be >= 0");
    long long total = 0;
    for (const auto& row : manifest) total += row.word_count;
    if (target_words > total) {
        throw Error("subsample: target " + std::to_string(target_words) +
                    " exceeds dataset total " + std::to_string(total));
    }
    std::vector<dataset::ManifestRow> rows = manifest;
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.record_id < b.record_id; });
    util::Rng rng(util::derive_seed(seed, {"subsample"}));
    rng.shuffle(rows);
    std::vector<dataset::ManifestRow> out;
    long long cum = 0;
    for (auto& row : rows) {
        if (cum >= target_words) break;
        cum += row.word_count;
        out.push_back(std::move(row));
    }
    return out;
}

} // namespace arpipe::mixer
