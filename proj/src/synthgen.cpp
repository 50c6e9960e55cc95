#include "arpipe/synthgen.hpp"

#include "arpipe/prompts.hpp"
#include "arpipe/util/digest.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <algorithm>

namespace arpipe::synthgen {

using backend::GenerationRequest;
using dataset::Method;
using dataset::SyntheticRecord;

std::string_view to_string(StrategyMode mode) {
    return mode == StrategyMode::task_agnostic ? "task_agnostic" : "task_specific";
}

StrategyMode strategy_mode_for(Method method) {
    if (method == Method::ar_task_agnostic) return StrategyMode::task_agnostic;
    if (method == Method::ar_task_specific) return StrategyMode::task_specific;
    throw Error("method has no strategy mode: " + std::string(dataset::to_string(method)));
}

Method method_for(StrategyMode mode) {
    return mode == StrategyMode::task_agnostic ? Method::ar_task_agnostic
                                               : Method::ar_task_specific;
}

// ---------------------------------------------------------------------------
// Parsers
// ---------------------------------------------------------------------------

namespace {

std::string_view rtrim(std::string_view s) {
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\n' ||
                          s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

} // namespace

std::vector<std::string> parse_strategy_blocks(std::string_view output) {
    std::vector<std::string> blocks;
    std::optional<std::string> current;
    const auto flush = [&] {
        if (!current) return;
        const std::string_view trimmed = rtrim(*current);
        if (!trimmed.empty()) blocks.emplace_back(trimmed);
        current.reset();
    };
    for (const auto line : util::split_lines(output)) {
        if (util::starts_with(line, "##")) {
            flush();
            std::string_view rest = line.substr(2);
            while (!rest.empty() && (rest.front() == ' ' || rest.front() == '\t')) {
                rest.remove_prefix(1);
            }
            current = std::string(rest);
        } else if (current) {
            *current += '\n';
            *current += line;
        }
        // Lines before the first "##" are preamble, not strategy content.
    }
    flush();
    return blocks;
}

ProposalParse parse_proposal(StrategyMode mode, std::string_view output) {
    ProposalParse parse;
    if (mode == StrategyMode::task_agnostic) {
        parse.strategy_texts = parse_strategy_blocks(output);
        return parse;
    }
    const std::size_t at = output.find(prompts::kStartStrategiesMarker);
    if (at == std::string_view::npos) {
        parse.strategy_texts = parse_strategy_blocks(output);
        parse.raw_question_block = std::string();
        parse.missing_marker = true;
        return parse;
    }
    parse.raw_question_block = std::string(rtrim(output.substr(0, at)));
    parse.strategy_texts =
        parse_strategy_blocks(output.substr(at + prompts::kStartStrategiesMarker.size()));
    return parse;
}

QaParse parse_qa_lines(std::string_view output) {
    QaParse parse;
    for (const auto line : util::split_lines(output)) {
        const std::string_view t = util::trim(line);
        if (t.empty()) continue;
        const std::size_t at = t.find("? ");
        if (at == std::string_view::npos) {
            ++parse.dropped_lines;
            continue;
        }
        std::string_view answer = t.substr(at + 2);
        if (util::trim(answer).empty()) {
            ++parse.dropped_lines;
            continue;
        }
        parse.pairs.emplace_back(std::string(t.substr(0, at + 1)), std::string(answer));
    }
    return parse;
}

// ---------------------------------------------------------------------------
// Single-record operations
// ---------------------------------------------------------------------------

namespace {

std::string proposal_tag(const std::string& doc_id, StrategyMode mode, int ordinal) {
    return doc_id + "|" + std::string(to_string(mode)) + "|proposal|" + std::to_string(ordinal);
}

GenerationRequest proposal_request(const corpus::Document& doc, StrategyMode mode,
                                   std::uint64_t seed, const std::string& tag) {
    GenerationRequest req;
    req.prompt = prompts::render(mode == StrategyMode::task_agnostic
                                     ? prompts::TemplateId::strategies_task_agnostic
                                     : prompts::TemplateId::strategies_task_specific,
                                 {{"chunk", doc.body}});
    req.temperature = 1.0;
    req.seed = seed;
    req.tag = tag;
    return req;
}

ProposalOutcome proposal_from_output(const corpus::Document& doc, StrategyMode mode,
                                     int proposal_ordinal, const std::string& raw,
                                     const std::string& prompt_hash,
                                     const std::string& model_id) {
    ProposalOutcome outcome;
    outcome.raw_text = raw;
    outcome.prompt_hash = prompt_hash;
    outcome.model_id = model_id;
    ProposalParse parse = parse_proposal(mode, raw);
    outcome.raw_question_block = std::move(parse.raw_question_block);
    for (std::size_t i = 0; i < parse.strategy_texts.size(); ++i) {
        Strategy s;
        s.doc_id = doc.doc_id;
        s.mode = mode;
        s.proposal_ordinal = proposal_ordinal;
        s.ordinal = static_cast<int>(i);
        s.text = std::move(parse.strategy_texts[i]);
        s.strategy_id = doc.doc_id + ":" + std::string(to_string(mode)) + ":" +
                        std::to_string(proposal_ordinal) + ":" + std::to_string(i);
        outcome.strategies.push_back(std::move(s));
    }
    if (parse.missing_marker) {
        outcome.flagged = true;
        outcome.flag_reason = "missing_marker";
    } else if (outcome.strategies.empty()) {
        outcome.flagged = true;
        outcome.flag_reason = "zero_strategies";
    }
    return outcome;
}

SyntheticRecord text_record(Method method, const corpus::Document& doc,
                            const Strategy* strategy, const std::string& text,
                            const std::string& prompt_hash, const std::string& model_id,
                            std::uint64_t seed) {
    SyntheticRecord rec;
    rec.method = method;
    rec.doc_id = doc.doc_id;
    if (strategy) {
        rec.strategy_id = strategy->strategy_id;
        rec.strategy_text = strategy->text;
    }
    rec.text = text;
    rec.word_count = util::word_count(text);
    rec.prompt_hash = prompt_hash;
    rec.model_id = model_id;
    rec.seed = seed;
    rec.record_id = dataset::make_record_id(method, rec.doc_id, rec.strategy_id, seed);
    return rec;
}

SyntheticRecord qa_record(const corpus::Document& doc, const std::string& output,
                          const std::string& prompt_hash, const std::string& model_id,
                          std::uint64_t seed, QaParse& parse_out) {
    parse_out = parse_qa_lines(output);
    SyntheticRecord rec;
    rec.method = Method::synth_qa;
    rec.doc_id = doc.doc_id;
    rec.qa_pairs = parse_out.pairs;
    rec.word_count = util::word_count(dataset::canonical_text(rec));
    rec.prompt_hash = prompt_hash;
    rec.model_id = model_id;
    rec.seed = seed;
    rec.record_id = dataset::make_record_id(rec.method, rec.doc_id, std::nullopt, seed);
    return rec;
}

} // namespace

ProposalOutcome propose_strategies(const corpus::Document& doc, StrategyMode mode,
                                   backend::BackendClient& client, std::uint64_t seed,
                                   int proposal_ordinal, const std::string& tag) {
    const std::string t = tag.empty() ? proposal_tag(doc.doc_id, mode, proposal_ordinal) : tag;
    const auto result = client.generate(proposal_request(doc, mode, seed, t));
    return proposal_from_output(doc, mode, proposal_ordinal, result.text, result.prompt_hash,
                                result.model_id);
}

dataset::SyntheticRecord apply_strategy(const corpus::Document& doc, const Strategy& strategy,
                                        backend::BackendClient& client, std::uint64_t seed,
                                        int max_output_words, double temperature,
                                        const std::string& tag) {
    if (strategy.doc_id != doc.doc_id) {
        throw Error("apply_strategy: strategy " + strategy.strategy_id + " belongs to doc " +
                    strategy.doc_id + ", not " + doc.doc_id);
    }
    GenerationRequest req;
    req.prompt = prompts::render(prompts::TemplateId::apply_strategy,
                                 {{"strategy", strategy.text}, {"chunk", doc.body}});
    req.max_output_words = max_output_words;
    req.temperature = temperature;
    req.seed = seed;
    req.tag = tag.empty() ? "apply|" + strategy.strategy_id + "|" + std::to_string(seed) : tag;
    const auto result = client.generate(req);
    return text_record(method_for(strategy.mode), doc, &strategy, result.text,
                       result.prompt_hash, result.model_id, seed);
}

dataset::SyntheticRecord paraphrase(const corpus::Document& doc, backend::BackendClient& client,
                                    std::uint64_t seed, int max_output_words, double temperature,
                                    const std::string& tag) {
    GenerationRequest req;
    req.prompt = prompts::render(prompts::TemplateId::paraphrase, {{"chunk", doc.body}});
    req.max_output_words = max_output_words;
    req.temperature = temperature;
    req.seed = seed;
    req.tag = tag.empty() ? "paraphrase|" + doc.doc_id + "|" + std::to_string(seed) : tag;
    const auto result = client.generate(req);
    return text_record(Method::paraphrase, doc, nullptr, result.text, result.prompt_hash,
                       result.model_id, seed);
}

SynthQaResult synth_qa(const corpus::Document& doc, backend::BackendClient& client,
                       std::uint64_t seed, int max_output_words, double temperature,
                       const std::string& tag) {
    GenerationRequest req;
    req.prompt = prompts::render(prompts::TemplateId::synth_qa, {{"chunk", doc.body}});
    req.max_output_words = max_output_words;
    req.temperature = temperature;
    req.seed = seed;
    req.tag = tag.empty() ? "synth_qa|" + doc.doc_id + "|" + std::to_string(seed) : tag;
    const auto result = client.generate(req);
    SynthQaResult out;
    QaParse parse;
    out.record = qa_record(doc, result.text, result.prompt_hash, result.model_id, seed, parse);
    out.dropped_lines = parse.dropped_lines;
    out.zero_pairs = parse.pairs.empty();
    return out;
}

dataset::SyntheticRecord repeat(const corpus::Document& doc, std::uint64_t seed) {
    return text_record(Method::repeat, doc, nullptr, doc.body,
                       util::sha256_hex16(doc.body), "local", seed);
}

// ---------------------------------------------------------------------------
// Job runner
// ---------------------------------------------------------------------------

std::optional<UnitState> MemoryUnitStore::get(const std::string& key) {
    const auto it = units_.find(key);
    if (it == units_.end()) return std::nullopt;
    return it->second;
}

void MemoryUnitStore::put(const std::string& key, const UnitState& state) {
    units_[key] = state;
}

namespace {

struct DocState {
    const corpus::Document* doc = nullptr;
    std::vector<Strategy> strategies;
    int proposals_done = 0;
    int consecutive_empty = 0;
    bool retired = false;
};

std::string unit_key(const std::string& doc_id, Method method, int round) {
    return doc_id + "|" + std::string(dataset::to_string(method)) + "|" + std::to_string(round);
}

// Classify a failed outcome: auth aborts the job, transient exhaustion halts
// it resumably, anything else permanently fails just this unit.
enum class FailAction { abort, halt, fail_unit };

FailAction action_for(backend::ErrorKind kind) {
    if (kind == backend::ErrorKind::auth) return FailAction::abort;
    if (backend::is_retryable(kind)) return FailAction::halt;
    return FailAction::fail_unit;
}

} // namespace

GenJobStats run_generation_job(const std::vector<corpus::Document>& docs, const GenJobSpec& spec,
                               backend::BackendClient& client, UnitStore& store,
                               const std::filesystem::path& out_dir,
                               const backend::CallSink& local_sink) {
    if (docs.empty()) throw Error("generation job: document set is empty");
    if (spec.word_budget < 0) throw Error("generation job: word budget must be >= 0");

    // Canonical processing order: sort by doc_id, then one seeded shuffle.
    std::vector<DocState> states(docs.size());
    {
        std::vector<const corpus::Document*> ordered;
        ordered.reserve(docs.size());
        for (const auto& d : docs) ordered.push_back(&d);
        std::sort(ordered.begin(), ordered.end(),
                  [](const auto* a, const auto* b) { return a->doc_id < b->doc_id; });
        for (std::size_t i = 1; i < ordered.size(); ++i) {
            if (ordered[i]->doc_id == ordered[i - 1]->doc_id) {
                throw Error("generation job: duplicate doc_id " + ordered[i]->doc_id);
            }
        }
        util::Rng rng(util::derive_seed(spec.seed, {"gen", "order"}));
        rng.shuffle(ordered);
        for (std::size_t i = 0; i < ordered.size(); ++i) states[i].doc = ordered[i];
    }

    GenJobStats stats;
    std::vector<SyntheticRecord> records;
    long long words = 0;
    const bool ar = dataset::is_active_reading(spec.method);
    const StrategyMode mode =
        ar ? strategy_mode_for(spec.method) : StrategyMode::task_agnostic;

    const auto absorb_proposal = [&](DocState& st, const ProposalOutcome& outcome) {
        ++stats.proposals;
        if (outcome.flagged) ++stats.flagged_proposals;
        if (outcome.strategies.empty()) {
            if (++st.consecutive_empty >= 2) {
                st.retired = true;
                ++stats.retired_docs;
            }
        } else {
            st.consecutive_empty = 0;
            for (const auto& s : outcome.strategies) st.strategies.push_back(s);
        }
        ++st.proposals_done;
    };

    // One round of proposal calls for every doc still short of `round`
    // strategies. Returns false when no doc needed one.
    const auto replenish_once = [&](int round) {
        std::vector<DocState*> needing;
        for (auto& st : states) {
            if (!st.retired && static_cast<int>(st.strategies.size()) <= round) {
                needing.push_back(&st);
            }
        }
        if (needing.empty()) return false;

        std::vector<GenerationRequest> reqs;
        std::vector<DocState*> to_run;
        for (auto* st : needing) {
            const std::string key = proposal_tag(st->doc->doc_id, mode, st->proposals_done);
            if (store.get(key)) continue;
            reqs.push_back(proposal_request(
                *st->doc, mode,
                util::derive_seed(spec.seed, {"proposal", to_string(mode), st->doc->doc_id,
                                              std::to_string(st->proposals_done)}),
                key));
            to_run.push_back(st);
        }
        std::optional<std::string> halt;
        if (!reqs.empty()) {
            const auto outcomes = client.generate_batch(reqs);
            for (std::size_t i = 0; i < outcomes.size(); ++i) {
                const std::string key =
                    proposal_tag(to_run[i]->doc->doc_id, mode, to_run[i]->proposals_done);
                const auto& out = outcomes[i];
                if (out.ok()) {
                    ojson payload;
                    payload["raw_text"] = out.result->text;
                    payload["prompt_hash"] = out.result->prompt_hash;
                    payload["model_id"] = out.result->model_id;
                    store.put(key, {"done", payload});
                    continue;
                }
                switch (action_for(out.error->last_kind)) {
                case FailAction::abort:
                    throw Error("backend authentication failure: " + out.error->message);
                case FailAction::halt:
                    if (!halt) halt = key + ": " + out.error->message;
                    break;
                case FailAction::fail_unit:
                    store.put(key, {"failed", ojson{{"reason", out.error->message}}});
                    break;
                }
            }
        }
        if (halt) throw JobHalted("generation halted at " + *halt);

        for (auto* st : needing) {
            const std::string key = proposal_tag(st->doc->doc_id, mode, st->proposals_done);
            const auto state = store.get(key);
            if (!state) throw Error("generation job: proposal unit lost: " + key);
            if (state->status != "done") {
                ProposalOutcome failed;
                failed.flagged = true;
                failed.flag_reason = "proposal_failed";
                absorb_proposal(*st, failed);
                continue;
            }
            absorb_proposal(*st, proposal_from_output(
                                     *st->doc, mode, st->proposals_done,
                                     state->payload.at("raw_text").get<std::string>(),
                                     state->payload.at("prompt_hash").get<std::string>(),
                                     state->payload.at("model_id").get<std::string>()));
        }
        return true;
    };

    int round = 0;
    while (true) {
        if (words >= spec.word_budget) break;
        if (spec.passes_cap > 0 && round >= spec.passes_cap) break;

        if (ar) {
            while (replenish_once(round)) {
            }
        }

        struct Pending {
            DocState* st;
            std::string key;
        };
        std::vector<Pending> units;
        for (auto& st : states) {
            if (ar && (st.retired || static_cast<int>(st.strategies.size()) <= round)) continue;
            units.push_back({&st, unit_key(st.doc->doc_id, spec.method, round)});
        }
        if (units.empty()) {
            stats.stalled = true; // every doc retired before the budget was met
            break;
        }

        const std::uint64_t round_seed = spec.seed + static_cast<std::uint64_t>(round);
        long long round_words = 0;
        std::vector<GenerationRequest> reqs;
        std::vector<Pending*> to_run;
        for (auto& u : units) {
            if (const auto state = store.get(u.key)) {
                if (state->status == "done") {
                    SyntheticRecord rec = dataset::record_from_json(state->payload);
                    round_words += rec.word_count;
                    if (state->payload.contains("qa_dropped")) {
                        stats.qa_dropped_lines += state->payload["qa_dropped"].get<long long>();
                    }
                    records.push_back(std::move(rec));
                } else {
                    ++stats.failed_units;
                }
                continue;
            }
            if (spec.method == Method::repeat) {
                SyntheticRecord rec = repeat(*u.st->doc, round_seed);
                store.put(u.key, {"done", dataset::record_to_json(rec)});
                if (local_sink) {
                    local_sink({rec.prompt_hash, u.key, "ok", 0, rec.word_count});
                }
                round_words += rec.word_count;
                records.push_back(std::move(rec));
                continue;
            }
            GenerationRequest req;
            if (spec.method == Method::paraphrase) {
                req.prompt = prompts::render(prompts::TemplateId::paraphrase,
                                             {{"chunk", u.st->doc->body}});
            } else if (spec.method == Method::synth_qa) {
                req.prompt = prompts::render(prompts::TemplateId::synth_qa,
                                             {{"chunk", u.st->doc->body}});
            } else {
                const Strategy& s = u.st->strategies[static_cast<std::size_t>(round)];
                req.prompt = prompts::render(prompts::TemplateId::apply_strategy,
                                             {{"strategy", s.text}, {"chunk", u.st->doc->body}});
            }
            req.max_output_words = spec.max_output_words;
            req.temperature = spec.temperature;
            req.seed = round_seed;
            req.tag = u.key;
            reqs.push_back(std::move(req));
            to_run.push_back(&u);
        }

        std::optional<std::string> halt;
        if (!reqs.empty()) {
            const auto outcomes = client.generate_batch(reqs);
            for (std::size_t i = 0; i < outcomes.size(); ++i) {
                const Pending& u = *to_run[i];
                const auto& out = outcomes[i];
                if (out.ok()) {
                    SyntheticRecord rec;
                    ojson payload;
                    if (spec.method == Method::synth_qa) {
                        QaParse parse;
                        rec = qa_record(*u.st->doc, out.result->text, out.result->prompt_hash,
                                        out.result->model_id, round_seed, parse);
                        payload = dataset::record_to_json(rec);
                        payload["qa_dropped"] = parse.dropped_lines;
                        stats.qa_dropped_lines += parse.dropped_lines;
                    } else {
                        const Strategy* s =
                            ar ? &u.st->strategies[static_cast<std::size_t>(round)] : nullptr;
                        rec = text_record(spec.method, *u.st->doc, s, out.result->text,
                                          out.result->prompt_hash, out.result->model_id,
                                          round_seed);
                        payload = dataset::record_to_json(rec);
                    }
                    store.put(u.key, {"done", payload});
                    round_words += rec.word_count;
                    records.push_back(std::move(rec));
                    continue;
                }
                switch (action_for(out.error->last_kind)) {
                case FailAction::abort:
                    throw Error("backend authentication failure: " + out.error->message);
                case FailAction::halt:
                    if (!halt) halt = u.key + ": " + out.error->message;
                    break;
                case FailAction::fail_unit:
                    store.put(u.key, {"failed", ojson{{"reason", out.error->message}}});
                    ++stats.failed_units;
                    break;
                }
            }
        }
        if (halt) throw JobHalted("generation halted at " + *halt);

        words += round_words;
        ++round;
        stats.rounds = round;
        if (round_words == 0) {
            stats.stalled = true; // a whole round produced nothing; budget unreachable
            break;
        }
    }

    std::sort(records.begin(), records.end(),
              [](const auto& a, const auto& b) { return a.record_id < b.record_id; });
    dataset::DatasetWriter writer(out_dir, spec.shard_cap_bytes);
    for (const auto& rec : records) writer.add(rec);
    ojson extra;
    extra["documents"] = docs.size();
    extra["method"] = dataset::to_string(spec.method);
    extra["seed"] = spec.seed;
    extra["word_budget"] = spec.word_budget;
    extra["rounds"] = stats.rounds;
    extra["qa_dropped_lines"] = stats.qa_dropped_lines;
    extra["failed_units"] = stats.failed_units;
    extra["proposals"] = stats.proposals;
    extra["flagged_proposals"] = stats.flagged_proposals;
    extra["retired_docs"] = stats.retired_docs;
    extra["stalled"] = stats.stalled;
    const auto summary = writer.finalize(extra);
    stats.records = summary.records;
    stats.words_total = summary.words_total;
    return stats;
}

} // namespace arpipe::synthgen
