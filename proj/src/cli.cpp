#include "arpipe/cli.hpp"

#include "arpipe/analysis.hpp"
#include "arpipe/corpus.hpp"
#include "arpipe/evalharness.hpp"
#include "arpipe/mixer.hpp"
#include "arpipe/util/digest.hpp"
#include "arpipe/util/memo.hpp"
#include "arpipe/util/text.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <set>

namespace fs = std::filesystem;

namespace arpipe::cli {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

Config load_config(const std::optional<fs::path>& path,
                   const std::map<std::string, std::string>* env) {
    Config c;
    if (path) {
        json j;
        try {
            j = json::parse(util::read_file(*path));
        } catch (const json::exception& e) {
            throw Error("config " + path->string() + ": " + e.what());
        }
        if (!j.is_object()) throw Error("config " + path->string() + ": expected an object");
        static const std::set<std::string> known = {
            "backend",         "seed",           "max_in_flight", "max_attempts",
            "requests_per_minute", "timeout_seconds", "backoff_base_ms", "mock",
            "remote",          "max_output_words", "temperature",  "shard_cap_bytes",
        };
        for (const auto& [key, value] : j.items()) {
            if (!known.count(key)) {
                throw Error("config " + path->string() + ": unknown key \"" + key + "\"");
            }
        }
        c.backend_kind = j.value("backend", c.backend_kind);
        c.seed = j.value("seed", c.seed);
        c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
        c.max_attempts = j.value("max_attempts", c.max_attempts);
        c.requests_per_minute = j.value("requests_per_minute", c.requests_per_minute);
        c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
        c.backoff_base_ms = j.value("backoff_base_ms", c.backoff_base_ms);
        if (j.contains("mock")) c.mock = backend::mock_behavior_from_json(j["mock"]);
        if (j.contains("remote")) {
            const auto& r = j["remote"];
            c.remote_url = r.value("url", c.remote_url);
            c.remote_model = r.value("model", c.remote_model);
            c.remote_api_key = r.value("api_key", c.remote_api_key);
            c.remote_schema = r.value("schema", c.remote_schema);
        }
        c.max_output_words = j.value("max_output_words", c.max_output_words);
        c.temperature = j.value("temperature", c.temperature);
        c.shard_cap_bytes = j.value("shard_cap_bytes", c.shard_cap_bytes);
    }
    if (c.backend_kind != "mock" && c.backend_kind != "remote") {
        throw Error("config: backend must be \"mock\" or \"remote\"");
    }

    const auto env_get = [&](const char* name) -> std::optional<std::string> {
        if (env) {
            const auto it = env->find(name);
            if (it == env->end()) return std::nullopt;
            return it->second;
        }
        const char* v = std::getenv(name);
        if (!v) return std::nullopt;
        return std::string(v);
    };
    if (const auto v = env_get("ARPIPE_ENDPOINT")) c.remote_url = *v;
    if (const auto v = env_get("ARPIPE_API_KEY")) c.remote_api_key = *v;
    if (const auto v = env_get("ARPIPE_MODEL")) c.remote_model = *v;
    return c;
}

ojson config_snapshot(const Config& c) {
    ojson j;
    j["backend"] = c.backend_kind;
    j["max_output_words"] = c.max_output_words;
    j["temperature"] = c.temperature;
    j["shard_cap_bytes"] = c.shard_cap_bytes;
    if (c.backend_kind == "mock") {
        ojson m;
        m["seed"] = c.mock.seed;
        m["model_id"] = c.mock.model_id;
        m["strategies_per_proposal"] = c.mock.strategies_per_proposal;
        m["question_block_lines"] = c.mock.question_block_lines;
        m["emit_marker"] = c.mock.emit_marker;
        m["qa_pairs_per_output"] = c.mock.qa_pairs_per_output;
        m["words_per_output"] = c.mock.words_per_output;
        m["fail_unknown"] = c.mock.fail_unknown;
        j["mock"] = m;
    } else {
        ojson r;
        r["url"] = c.remote_url;
        r["model"] = c.remote_model;
        r["schema"] = c.remote_schema;
        j["remote"] = r;
    }
    return j;
}

std::string config_hash(const Config& c) {
    const std::string body = config_snapshot(c).dump();
    return util::sha256_hex16(std::string("config") + '\0' + body);
}

backend::BackendPolicy policy_from(const Config& c) {
    backend::BackendPolicy policy;
    policy.max_in_flight = c.max_in_flight;
    policy.max_attempts = c.max_attempts;
    policy.requests_per_minute = c.requests_per_minute;
    policy.timeout_seconds = c.timeout_seconds;
    policy.backoff_base_ms = c.backoff_base_ms;
    return policy;
}

std::shared_ptr<backend::TextBackend> make_backend(const Config& c) {
    if (c.backend_kind == "mock") {
        return std::make_shared<backend::MockBackend>(c.mock);
    }
    if (c.remote_url.empty()) {
        throw Error("remote backend requires an endpoint url (config remote.url or "
                    "ARPIPE_ENDPOINT)");
    }
    backend::RemoteConfig rc;
    rc.url = c.remote_url;
    rc.model = c.remote_model;
    rc.api_key = c.remote_api_key;
    rc.schema = backend::wire_schema_from_string(c.remote_schema);
    rc.timeout_seconds = c.timeout_seconds;
    return std::make_shared<backend::RemoteBackend>(rc);
}

// ---------------------------------------------------------------------------
// Ledgers
// ---------------------------------------------------------------------------

FileUnitStore::FileUnitStore(fs::path file) : file_(std::move(file)) {
    util::for_each_line(file_, [&](std::size_t line_no, std::string_view line) {
        if (util::trim(line).empty()) return;
        try {
            ojson j = ojson::parse(line);
            synthgen::UnitState state;
            state.status = j.at("status").get<std::string>();
            state.payload = j.at("payload");
            units_[j.at("key").get<std::string>()] = std::move(state);
        } catch (const json::exception& e) {
            throw Error(file_.string() + ":" + std::to_string(line_no) + ": bad unit line: " +
                        e.what());
        }
    });
}

namespace {

std::string unit_line(const std::string& key, const synthgen::UnitState& state) {
    ojson j;
    j["key"] = key;
    j["status"] = state.status;
    j["payload"] = state.payload;
    return j.dump();
}

} // namespace

std::optional<synthgen::UnitState> FileUnitStore::get(const std::string& key) {
    const auto it = units_.find(key);
    if (it == units_.end()) return std::nullopt;
    return it->second;
}

void FileUnitStore::put(const std::string& key, const synthgen::UnitState& state) {
    util::append_line(file_, unit_line(key, state));
    units_[key] = state;
}

void FileUnitStore::finalize() {
    std::string buf;
    for (const auto& [key, state] : units_) {
        buf += unit_line(key, state);
        buf += '\n';
    }
    util::write_file_atomic(file_, buf);
}

CallLedger::CallLedger(fs::path file) : file_(std::move(file)) {
    util::for_each_line(file_, [&](std::size_t line_no, std::string_view line) {
        if (util::trim(line).empty()) return;
        try {
            const json j = json::parse(line);
            backend::CallRecord rec;
            rec.tag = j.at("tag").get<std::string>();
            rec.prompt_hash = j.at("prompt_hash").get<std::string>();
            rec.status = j.at("status").get<std::string>();
            rec.attempt_count = j.at("attempt_count").get<int>();
            rec.output_words = j.at("output_words").get<long long>();
            records_.push_back(std::move(rec));
        } catch (const json::exception& e) {
            throw Error(file_.string() + ":" + std::to_string(line_no) + ": bad call line: " +
                        e.what());
        }
    });
}

namespace {

std::string call_line(const backend::CallRecord& rec) {
    ojson j;
    j["tag"] = rec.tag;
    j["prompt_hash"] = rec.prompt_hash;
    j["status"] = rec.status;
    j["attempt_count"] = rec.attempt_count;
    j["output_words"] = rec.output_words;
    return j.dump();
}

} // namespace

void CallLedger::record(const backend::CallRecord& rec) {
    std::lock_guard<std::mutex> lock(mu_);
    records_.push_back(rec);
    util::append_line(file_, call_line(rec));
}

backend::CallSink CallLedger::sink() {
    return [this](const backend::CallRecord& rec) { record(rec); };
}

std::vector<backend::CallRecord> CallLedger::canonical() const {
    // Later records replace earlier ones for the same (tag, prompt_hash),
    // except a failure never replaces a success: a resumed run's ok wins
    // over the interrupted run's failure regardless of order.
    std::map<std::pair<std::string, std::string>, backend::CallRecord> by_key;
    for (const auto& rec : records_) {
        const auto key = std::make_pair(rec.tag, rec.prompt_hash);
        const auto it = by_key.find(key);
        if (it == by_key.end() || rec.status == "ok" || it->second.status != "ok") {
            by_key[key] = rec;
        }
    }
    std::vector<backend::CallRecord> out;
    out.reserve(by_key.size());
    for (const auto& [key, rec] : by_key) out.push_back(rec);
    return out;
}

void CallLedger::finalize() {
    std::lock_guard<std::mutex> lock(mu_);
    auto canon = canonical();
    std::string buf;
    for (const auto& rec : canon) {
        buf += call_line(rec);
        buf += '\n';
    }
    util::write_file_atomic(file_, buf);
    records_ = std::move(canon);
}

CallLedger::Totals CallLedger::totals() const {
    Totals t;
    for (const auto& rec : canonical()) {
        ++t.calls;
        t.retries += std::max(0, rec.attempt_count - 1);
        if (rec.status != "ok") ++t.failed;
        t.output_words += rec.output_words;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Job manifest
// ---------------------------------------------------------------------------

std::string job_id(const JobManifest& m) {
    std::string body = "job";
    body += '\0';
    body += m.command;
    body += '\0';
    body += m.config_hash;
    body += '\0';
    body += std::to_string(m.seed);
    body += '\0';
    body += m.params.dump();
    return util::sha256_hex16(body);
}

ojson manifest_to_json(const JobManifest& m) {
    ojson j;
    j["job_id"] = job_id(m);
    j["command"] = m.command;
    j["config_hash"] = m.config_hash;
    j["seed"] = m.seed;
    j["params"] = m.params;
    j["status"] = m.status;
    j["counters"] = m.counters;
    j["results"] = m.results;
    return j;
}

void write_job_manifest(const fs::path& out_dir, const JobManifest& m) {
    util::write_file_atomic(out_dir / "job.json", manifest_to_json(m).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace {

/// Archives the semantic snapshot; a resumed job must present the same one.
void archive_config(const fs::path& out_dir, const Config& config) {
    const fs::path file = out_dir / "config.json";
    ojson j;
    j["config_hash"] = config_hash(config);
    j["config"] = config_snapshot(config);
    const std::string body = j.dump(2) + "\n";
    if (fs::exists(file)) {
        const json prev = json::parse(util::read_file(file));
        if (prev.value("config_hash", "") != config_hash(config)) {
            throw Error("output directory " + out_dir.string() +
                        " was produced under a different config; refusing to mix");
        }
        return;
    }
    util::write_file_atomic(file, body);
}

JobManifest base_manifest(const std::string& command, const Config& config) {
    JobManifest m;
    m.command = command;
    m.config_hash = config_hash(config);
    m.seed = config.seed;
    m.params = ojson::object();
    m.counters = ojson::object();
    m.results = ojson::object();
    return m;
}

struct CommonOpts {
    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> backend;
    std::optional<int> max_in_flight;
};

Config resolve_config(const CommonOpts& opts) {
    std::optional<fs::path> path;
    if (opts.config_path) path = *opts.config_path;
    Config c = load_config(path);
    if (opts.seed) c.seed = *opts.seed;
    if (opts.backend) {
        if (*opts.backend != "mock" && *opts.backend != "remote") {
            throw Error("--backend must be mock or remote");
        }
        c.backend_kind = *opts.backend;
    }
    if (opts.max_in_flight) c.max_in_flight = *opts.max_in_flight;
    return c;
}

corpus::DocSet docset_from_file(const fs::path& path) {
    return corpus::docset_from_json(json::parse(util::read_file(path)));
}

int cmd_ingest(const Config& config, const std::string& input, const std::string& format,
               const std::string& source_tag, const fs::path& out) {
    util::ensure_dir(out);
    corpus::SourceDescriptor source;
    source.path = input;
    source.format = corpus::source_format_from_string(format);
    source.source_tag = source_tag;

    corpus::DocStore store;
    std::vector<corpus::ManifestEntry> entries;
    const auto stats = corpus::ingest(
        source,
        [&](corpus::Document doc) {
            entries.push_back({doc.doc_id, doc.source_tag,
                               analysis::word_count(doc.body), input});
            store.add(std::move(doc));
        },
        [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; });

    store.save(out / "docstore.jsonl");
    corpus::write_manifest(out / "manifest.jsonl", entries);
    corpus::DocSet all{source_tag, store.ids_sorted(), config.seed};
    util::write_file_atomic(out / "docset.json", corpus::docset_to_json(all).dump(2) + "\n");
    archive_config(out, config);

    JobManifest m = base_manifest("ingest", config);
    m.params["input"] = input;
    m.params["format"] = format;
    m.params["source_tag"] = source_tag;
    m.counters["documents"] = stats.documents;
    m.counters["skipped"] = stats.skipped;
    m.counters["duplicates"] = stats.duplicates;
    m.results["documents"] = static_cast<long long>(store.size());
    write_job_manifest(out, m);

    std::cout << "ingested " << store.size() << " documents (" << stats.skipped << " skipped, "
              << stats.duplicates << " duplicates) -> " << out.string() << "\n";
    return 0;
}

int cmd_expand(const Config& config, const std::string& docstore, const std::string& base,
               const std::optional<std::string>& pool, int multiplier, const fs::path& out) {
    util::ensure_dir(out);
    const auto store = corpus::DocStore::load(docstore);
    const auto base_set = docset_from_file(base);
    corpus::DocSet pool_set;
    if (pool) {
        pool_set = docset_from_file(*pool);
    } else {
        pool_set = corpus::DocSet{"pool", store.ids_sorted(), 0};
    }
    const auto expanded = corpus::expand_with_distractors(base_set, pool_set, multiplier,
                                                          config.seed);
    for (const auto& id : expanded.members) store.at(id);

    util::write_file_atomic(out / "docset.json", corpus::docset_to_json(expanded).dump(2) + "\n");
    archive_config(out, config);

    JobManifest m = base_manifest("expand", config);
    m.params["docstore"] = docstore;
    m.params["base"] = base;
    m.params["pool"] = pool ? ojson(*pool) : ojson(nullptr);
    m.params["multiplier"] = multiplier;
    m.results["members"] = static_cast<long long>(expanded.members.size());
    write_job_manifest(out, m);

    std::cout << "expanded " << base_set.members.size() << " -> " << expanded.members.size()
              << " documents -> " << out.string() << "\n";
    return 0;
}

int cmd_gen(const Config& config, const std::string& docstore,
            const std::optional<std::string>& docset, const std::string& method_name,
            long long budget_words, int passes_cap,
            const std::optional<long long>& mock_fail_after, const fs::path& out) {
    util::ensure_dir(out);
    const auto method = dataset::method_from_string(method_name);
    const auto store = corpus::DocStore::load(docstore);
    std::vector<corpus::Document> docs;
    if (docset) {
        for (const auto& id : docset_from_file(*docset).members) docs.push_back(store.at(id));
    } else {
        for (const auto& id : store.ids_sorted()) docs.push_back(store.at(id));
    }

    archive_config(out, config);

    Config run_config = config;
    if (mock_fail_after) run_config.mock.fail_after_requests = *mock_fail_after;

    CallLedger ledger(out / "calls.jsonl");
    backend::BackendClient client(make_backend(run_config), policy_from(run_config),
                                  ledger.sink());
    FileUnitStore units(out / "units.jsonl");

    synthgen::GenJobSpec spec;
    spec.method = method;
    spec.word_budget = budget_words;
    spec.passes_cap = passes_cap;
    spec.seed = config.seed;
    spec.max_output_words = config.max_output_words;
    spec.temperature = config.temperature;
    spec.shard_cap_bytes = config.shard_cap_bytes;

    JobManifest m = base_manifest("gen", config);
    m.params["docstore"] = docstore;
    m.params["docset"] = docset ? ojson(*docset) : ojson(nullptr);
    m.params["method"] = method_name;
    m.params["budget_words"] = budget_words;
    m.params["passes_cap"] = passes_cap;

    const auto unit_counters = [&] {
        long long done = 0;
        long long failed = 0;
        for (const auto& [key, state] : units.entries()) {
            if (state.status == "done") ++done;
            else ++failed;
        }
        const auto t = ledger.totals();
        ojson counters;
        counters["units_done"] = done;
        counters["units_failed"] = failed;
        counters["backend_calls"] = t.calls;
        counters["retries"] = t.retries;
        counters["failed_calls"] = t.failed;
        counters["output_words"] = t.output_words;
        return counters;
    };

    synthgen::GenJobStats stats;
    try {
        stats = synthgen::run_generation_job(docs, spec, client, units, out, ledger.sink());
    } catch (const synthgen::JobHalted& e) {
        m.status = "halted";
        m.counters = unit_counters();
        m.results["reason"] = std::string(e.what());
        write_job_manifest(out, m);
        std::cerr << "gen halted (resumable): " << e.what() << "\n";
        return 2;
    }

    units.finalize();
    ledger.finalize();
    m.counters = unit_counters();
    m.counters["rounds"] = stats.rounds;
    m.counters["proposals"] = stats.proposals;
    m.counters["flagged_proposals"] = stats.flagged_proposals;
    m.counters["retired_docs"] = stats.retired_docs;
    m.counters["qa_dropped_lines"] = stats.qa_dropped_lines;
    m.results["records"] = stats.records;
    m.results["words_generated"] = stats.words_total;
    m.results["stalled"] = stats.stalled;
    write_job_manifest(out, m);

    std::cout << "generated " << stats.records << " records, " << stats.words_total
              << " words in " << stats.rounds << " rounds -> " << out.string() << "\n";
    return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (const char ch : s) {
        if (ch == ',') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    return parts;
}

int cmd_mix_weights_only(const Config& config, const std::string& weights_csv,
                         long long steps_on_target, const std::string& learning_rate,
                         long long seq_len, long long batch_tokens, const fs::path& out) {
    util::ensure_dir(out);
    mixer::MixSpec spec;
    int index = 0;
    for (const auto& w : split_csv(weights_csv)) {
        ++index;
        spec.sources.push_back({"source" + std::to_string(index), std::string(util::trim(w))});
    }
    if (spec.sources.empty()) throw Error("--weights needs at least one weight");
    spec.seq_len_tokens = seq_len;
    spec.batch_tokens = batch_tokens;
    spec.target_source = spec.sources.front().name;
    spec.steps_on_target = steps_on_target;
    spec.learning_rate = learning_rate;

    const auto sched = mixer::schedule(spec);
    util::write_file_atomic(out / "schedule.csv", mixer::schedule_csv({{"config", spec}}));
    archive_config(out, config);

    JobManifest m = base_manifest("mix", config);
    m.params["weights"] = weights_csv;
    m.params["steps_on_target"] = steps_on_target;
    m.params["seq_len_tokens"] = seq_len;
    m.params["batch_tokens"] = batch_tokens;
    m.results["total_steps"] = sched.total_steps;
    m.results["total_tokens"] = sched.total_tokens;
    m.results["total_tokens_3sf"] = sched.total_tokens_3sf;
    ojson percents = ojson::object();
    for (std::size_t i = 0; i < sched.source_names.size(); ++i) {
        percents[sched.source_names[i]] = sched.percents_rendered[i];
    }
    m.results["percents"] = percents;
    write_job_manifest(out, m);

    std::cout << "schedule: total_steps " << sched.total_steps << ", total_tokens "
              << sched.total_tokens_3sf << " -> " << out.string() << "\n";
    return 0;
}

int cmd_mix(const Config& config, const std::vector<std::string>& source_args,
            const std::string& target, long long steps_on_target,
            const std::string& learning_rate, long long seq_len, long long batch_tokens,
            long long batches, const fs::path& out) {
    util::ensure_dir(out);
    std::vector<mixer::MixSourceInput> sources;
    for (const auto& arg : source_args) {
        const auto eq1 = arg.find('=');
        const auto eq2 = eq1 == std::string::npos ? std::string::npos : arg.find('=', eq1 + 1);
        if (eq2 == std::string::npos) {
            throw Error("--source expects NAME=WEIGHT=DATASET_DIR, got \"" + arg + "\"");
        }
        mixer::MixSourceInput src;
        src.name = arg.substr(0, eq1);
        src.weight = arg.substr(eq1 + 1, eq2 - eq1 - 1);
        src.dataset_dir = arg.substr(eq2 + 1);
        sources.push_back(std::move(src));
    }

    mixer::MixParams params;
    params.seq_len_tokens = seq_len;
    params.batch_tokens = batch_tokens;
    params.target_source = target;
    params.steps_on_target = steps_on_target;
    params.learning_rate = learning_rate;
    params.seed = config.seed;
    params.batches = batches;
    params.shard_cap_bytes = config.shard_cap_bytes;

    archive_config(out, config);
    const mixer::ApproxTokenCounter counter;
    const auto stats = mixer::run_mix(sources, params, counter, out);

    JobManifest m = base_manifest("mix", config);
    ojson src_params = ojson::array();
    for (const auto& src : sources) {
        src_params.push_back(ojson{{"name", src.name},
                                   {"weight", src.weight},
                                   {"dataset", src.dataset_dir.string()}});
    }
    m.params["sources"] = src_params;
    m.params["target"] = target;
    m.params["steps_on_target"] = steps_on_target;
    m.params["seq_len_tokens"] = seq_len;
    m.params["batch_tokens"] = batch_tokens;
    m.params["batches"] = batches;
    m.counters["sequences"] = stats.sequences;
    m.counters["content_tokens"] = stats.content_tokens;
    m.counters["separator_tokens"] = stats.separator_tokens;
    m.counters["pad_tokens"] = stats.pad_tokens;
    m.counters["empty_records_skipped"] = stats.empty_records_skipped;
    m.results["batches"] = stats.batches;
    m.results["total_steps"] = stats.sched.total_steps;
    m.results["total_tokens_3sf"] = stats.sched.total_tokens_3sf;
    write_job_manifest(out, m);

    std::cout << "packed " << stats.sequences << " sequences in " << stats.batches
              << " batches -> " << out.string() << "\n";
    return 0;
}

int cmd_subsample(const Config& config, const std::string& dataset, long long target_words,
                  const fs::path& out) {
    util::ensure_dir(out);
    const fs::path dataset_dir(dataset);
    const auto manifest = dataset::read_manifest(dataset_dir);
    auto rows = mixer::subsample(manifest, target_words, config.seed);
    std::sort(rows.begin(), rows.end(),
              [](const dataset::ManifestRow& a, const dataset::ManifestRow& b) {
                  return a.record_id < b.record_id;
              });

    dataset::DatasetWriter writer(out, config.shard_cap_bytes);
    long long words = 0;
    for (const auto& row : rows) {
        const auto rec = dataset::fetch_record(dataset_dir, row);
        words += rec.word_count;
        writer.add(rec);
    }
    const json src_summary = dataset::load_summary(dataset_dir);
    ojson extra;
    extra["method"] = src_summary.value("method", "mixed");
    extra["subsampled_from"] = dataset;
    extra["target_words"] = target_words;
    extra["seed"] = config.seed;
    const auto summary = writer.finalize(extra);
    archive_config(out, config);

    JobManifest m = base_manifest("subsample", config);
    m.params["dataset"] = dataset;
    m.params["target_words"] = target_words;
    m.results["records"] = summary.records;
    m.results["words_total"] = summary.words_total;
    write_job_manifest(out, m);

    std::cout << "subsampled " << summary.records << " records, " << summary.words_total
              << " words -> " << out.string() << "\n";
    return 0;
}

int cmd_diversity(const Config& config, const std::string& dataset,
                  const std::optional<std::string>& label, int sample_cap, int max_n,
                  const fs::path& out) {
    util::ensure_dir(out);
    const fs::path dataset_dir(dataset);
    const auto records = dataset::load_records(dataset_dir);
    std::vector<std::pair<std::string, std::string>> id_texts;
    id_texts.reserve(records.size());
    for (const auto& rec : records) {
        id_texts.emplace_back(rec.record_id, dataset::canonical_text(rec));
    }
    const json summary = dataset::load_summary(dataset_dir);
    const std::string method = summary.value("method", "unknown");

    analysis::SelfBleuOptions options;
    options.max_n = max_n;
    options.sample_cap = sample_cap;
    options.seed = config.seed;
    const auto report = analysis::diversity_report(label ? *label : method, id_texts, options);

    util::write_file_atomic(out / "diversity.csv", analysis::to_csv(report));
    util::write_file_atomic(out / "diversity.md", analysis::to_markdown(report));
    util::write_file_atomic(out / "diversity.json", analysis::to_json(report).dump(2) + "\n");
    archive_config(out, config);

    JobManifest m = base_manifest("diversity", config);
    m.params["dataset"] = dataset;
    m.params["label"] = report.label;
    m.params["sample_cap"] = sample_cap;
    m.params["max_n"] = max_n;
    m.params["method"] = method;
    m.params["dataset_words"] = summary.value("words_total", 0ll);
    m.results["mean_self_bleu"] = report.mean;
    m.results["n_docs_sampled"] = report.n_docs_sampled;
    write_job_manifest(out, m);

    std::cout << "self-BLEU " << report.mean << " over " << report.n_docs_sampled
              << " docs -> " << out.string() << "\n";
    return 0;
}

int cmd_coverage(const Config& config, const std::string& dataset, const std::string& questions,
                 long long k_max, const std::string& judge_kind, const fs::path& out) {
    util::ensure_dir(out);
    const fs::path dataset_dir(dataset);
    const auto records = dataset::load_records(dataset_dir);
    const auto chunks = analysis::chunks_by_doc(records);
    const auto qs = analysis::load_questions(questions);
    const json summary = dataset::load_summary(dataset_dir);

    analysis::CoverageReport report;
    if (judge_kind == "substring") {
        analysis::SubstringJudge judge;
        report = analysis::coverage_curve(qs, chunks, judge, k_max);
    } else if (judge_kind == "model") {
        CallLedger ledger(out / "calls.jsonl");
        backend::BackendClient client(make_backend(config), policy_from(config), ledger.sink());
        analysis::ModelJudge model_judge(client, config.seed);
        util::DiskMemo memo(out / "judge_memo.jsonl");
        analysis::MemoizedJudge judge(model_judge, memo);
        report = analysis::coverage_curve(qs, chunks, judge, k_max);
        ledger.finalize();
    } else {
        throw Error("--judge must be substring or model");
    }

    util::write_file_atomic(out / "coverage.csv", analysis::to_csv(report));
    util::write_file_atomic(out / "coverage.md", analysis::to_markdown(report));
    util::write_file_atomic(out / "coverage.json", analysis::to_json(report).dump(2) + "\n");
    archive_config(out, config);

    JobManifest m = base_manifest("coverage", config);
    m.params["dataset"] = dataset;
    m.params["questions"] = questions;
    m.params["k_max"] = k_max;
    m.params["judge"] = report.judge_label;
    m.params["method"] = summary.value("method", "unknown");
    m.params["dataset_words"] = summary.value("words_total", 0ll);
    m.counters["judge_errors"] = report.judge_errors;
    m.counters["never_answerable_docs"] = report.never_answerable_docs;
    m.results["n_questions"] = report.n_questions;
    m.results["fraction_at_k_max"] = report.curve.back().second;
    ojson curve = ojson::array();
    for (const auto& [k, fraction] : report.curve) {
        curve.push_back(ojson{{"k", k}, {"fraction", fraction}});
    }
    m.results["curve"] = curve;
    write_job_manifest(out, m);

    std::cout << "coverage at k=" << k_max << ": " << report.curve.back().second << " ("
              << report.n_questions << " questions) -> " << out.string() << "\n";
    return 0;
}

int cmd_eval(const Config& config, const std::string& benchmark, const std::string& docstore,
             const std::string& mode_name, const std::string& grader_name, const fs::path& out) {
    util::ensure_dir(out);
    const auto items = evalharness::load_benchmark(benchmark);
    const auto store = corpus::DocStore::load(docstore);
    const auto mode = evalharness::answer_mode_from_string(mode_name);
    const auto grader = evalharness::grader_mode_from_string(grader_name);

    CallLedger ledger(out / "calls.jsonl");
    backend::BackendClient client(make_backend(config), policy_from(config), ledger.sink());
    std::optional<util::DiskMemo> memo;
    if (grader == evalharness::GraderMode::model_grader) {
        memo.emplace(out / "verdict_memo.jsonl");
    }
    const auto report = evalharness::evaluate(items, mode, grader, client, store, config.seed,
                                              memo ? &*memo : nullptr);
    ledger.finalize();

    util::write_file_atomic(out / "eval.md", evalharness::to_markdown(report));
    util::write_file_atomic(out / "eval.csv", evalharness::to_csv(report));
    util::write_file_atomic(out / "eval.json", evalharness::to_json(report).dump(2) + "\n");
    std::string items_buf;
    for (const auto& item : report.items) {
        items_buf += evalharness::item_to_json(item).dump();
        items_buf += '\n';
    }
    util::write_file_atomic(out / "items.jsonl", items_buf);
    archive_config(out, config);

    JobManifest m = base_manifest("eval", config);
    m.params["benchmark"] = benchmark;
    m.params["docstore"] = docstore;
    m.params["mode"] = mode_name;
    m.params["grader"] = grader_name;
    m.counters["answer_failures"] = report.answer_failures;
    m.counters["grader_errors"] = report.grader_errors;
    m.results["accuracy"] = report.accuracy;
    m.results["correct"] = report.correct;
    m.results["total"] = report.total;
    m.results["not_attempted"] = report.not_attempted;
    write_job_manifest(out, m);

    std::cout << "accuracy " << report.accuracy << " (" << report.correct << "/" << report.total
              << ") -> " << out.string() << "\n";
    return 0;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (const char ch : s) {
        if (ch == '"') out += "\"\"";
        else out += ch;
    }
    out += "\"";
    return out;
}

int cmd_report(const std::vector<std::string>& job_dirs, const fs::path& out) {
    util::ensure_dir(out);
    struct LoadedJob {
        std::string dir;
        json manifest;
    };
    std::vector<LoadedJob> jobs;
    std::vector<std::string> pending;
    for (const auto& dir : job_dirs) {
        const fs::path file = fs::path(dir) / "job.json";
        if (!fs::exists(file)) {
            pending.push_back(dir + " (no manifest)");
            continue;
        }
        json manifest = json::parse(util::read_file(file));
        if (manifest.value("status", "") != "complete") {
            pending.push_back(dir + " (" + manifest.value("status", "unknown") + ")");
            continue;
        }
        jobs.push_back({dir, std::move(manifest)});
    }

    std::set<std::string> hashes;
    for (const auto& job : jobs) hashes.insert(job.manifest.value("config_hash", ""));
    if (hashes.size() > 1) {
        std::string list;
        for (const auto& h : hashes) {
            if (!list.empty()) list += ", ";
            list += h;
        }
        throw Error("report: jobs span different config snapshots: " + list);
    }

    std::string md = "# Pipeline report\n\n";
    std::string csv = "section,name,words,metric,value\n";
    if (!hashes.empty()) md += "config: `" + *hashes.begin() + "`\n\n";
    if (!pending.empty()) {
        md += "**Partial report.** Pending jobs:\n";
        for (const auto& p : pending) md += "- " + p + "\n";
        md += "\n";
    }

    const auto jobs_of = [&](const std::string& command) {
        std::vector<const LoadedJob*> out_jobs;
        for (const auto& job : jobs) {
            if (job.manifest.value("command", "") == command) out_jobs.push_back(&job);
        }
        return out_jobs;
    };

    if (const auto gen_jobs = jobs_of("gen"); !gen_jobs.empty()) {
        md += "## Generated datasets\n\n";
        md += "| method | budget words | words generated | records | rounds |\n";
        md += "|---|---|---|---|---|\n";
        for (const auto* job : gen_jobs) {
            const auto& j = job->manifest;
            const std::string method = j["params"].value("method", "?");
            const auto words = j["results"].value("words_generated", 0ll);
            md += "| " + method + " | " + std::to_string(j["params"].value("budget_words", 0ll)) +
                  " | " + std::to_string(words) + " | " +
                  std::to_string(j["results"].value("records", 0ll)) + " | " +
                  std::to_string(j["counters"].value("rounds", 0ll)) + " |\n";
            csv += "gen," + csv_escape(method) + "," + std::to_string(words) + ",records," +
                   std::to_string(j["results"].value("records", 0ll)) + "\n";
        }
        md += "\n";
    }

    if (const auto mix_jobs = jobs_of("mix"); !mix_jobs.empty()) {
        md += "## Mix schedules\n\n";
        md += "| target | total steps | total tokens |\n|---|---|---|\n";
        for (const auto* job : mix_jobs) {
            const auto& j = job->manifest;
            const std::string target = j["params"].value("target", "source1");
            const auto steps = j["results"].value("total_steps", 0ll);
            const std::string tokens = j["results"].value("total_tokens_3sf", "");
            md += "| " + target + " | " + std::to_string(steps) + " | " + tokens + " |\n";
            csv += "mix," + csv_escape(target) + ",,total_steps," + std::to_string(steps) + "\n";
        }
        md += "\n";
    }

    if (const auto div_jobs = jobs_of("diversity"); !div_jobs.empty()) {
        md += "## Diversity (self-BLEU, lower = more diverse)\n\n";
        md += "| label | dataset words | mean self-BLEU | docs sampled |\n|---|---|---|---|\n";
        for (const auto* job : div_jobs) {
            const auto& j = job->manifest;
            const std::string label = j["params"].value("label", "?");
            const auto words = j["params"].value("dataset_words", 0ll);
            char mean[32];
            std::snprintf(mean, sizeof(mean), "%.6f", j["results"].value("mean_self_bleu", 0.0));
            md += "| " + label + " | " + std::to_string(words) + " | " + mean + " | " +
                  std::to_string(j["results"].value("n_docs_sampled", 0ll)) + " |\n";
            csv += "diversity," + csv_escape(label) + "," + std::to_string(words) +
                   ",self_bleu_mean," + mean + "\n";
        }
        md += "\n";
    }

    if (const auto cov_jobs = jobs_of("coverage"); !cov_jobs.empty()) {
        md += "## Coverage curves\n\n";
        for (const auto* job : cov_jobs) {
            const auto& j = job->manifest;
            const std::string judge = j["params"].value("judge", "?");
            const std::string method = j["params"].value("method", "?");
            md += "### " + method + " (judge: " + judge + ")\n\n";
            md += "| k | fraction answerable |\n|---|---|\n";
            for (const auto& point : j["results"]["curve"]) {
                char frac[32];
                std::snprintf(frac, sizeof(frac), "%.6f", point.value("fraction", 0.0));
                md += "| " + std::to_string(point.value("k", 0ll)) + " | " + frac + " |\n";
                csv += "coverage," + csv_escape(method) + "," +
                       std::to_string(point.value("k", 0ll)) + ",fraction_answerable," + frac +
                       "\n";
            }
            md += "\n";
        }
    }

    if (const auto eval_jobs = jobs_of("eval"); !eval_jobs.empty()) {
        md += "## QA accuracy\n\n";
        md += "| mode | grader | correct | total | accuracy |\n|---|---|---|---|---|\n";
        for (const auto* job : eval_jobs) {
            const auto& j = job->manifest;
            const std::string mode = j["params"].value("mode", "?");
            const std::string grader = j["params"].value("grader", "?");
            char acc[32];
            std::snprintf(acc, sizeof(acc), "%.4f", j["results"].value("accuracy", 0.0));
            md += "| " + mode + " | " + grader + " | " +
                  std::to_string(j["results"].value("correct", 0ll)) + " | " +
                  std::to_string(j["results"].value("total", 0ll)) + " | " + acc + " |\n";
            csv += "eval," + csv_escape(mode + "/" + grader) + "," +
                   std::to_string(j["results"].value("total", 0ll)) + ",accuracy," + acc + "\n";
        }
        md += "\n";
    }

    if (jobs.empty()) md += "No completed jobs.\n";

    util::write_file_atomic(out / "report.md", md);
    util::write_file_atomic(out / "report.csv", csv);
    std::cout << "report over " << jobs.size() << " jobs (" << pending.size()
              << " pending) -> " << out.string() << "\n";
    return 0;
}

} // namespace

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Synthetic data pipeline: strategy-driven augmentation, mixing, evaluation"};
    app.require_subcommand(0, 1);
    app.fallthrough();

    CommonOpts common;
    app.add_option("--config", common.config_path, "Config file (json)");
    app.add_option("--seed", common.seed, "Seed override");
    app.add_option("--backend", common.backend, "Backend override: mock or remote");
    app.add_option("--max-in-flight", common.max_in_flight, "Concurrent request cap");

    auto* ingest = app.add_subcommand("ingest", "Ingest a corpus into a docstore");
    std::string ingest_input, ingest_format = "jsonl", ingest_tag, ingest_out;
    ingest->add_option("--input", ingest_input, "Corpus path")->required();
    ingest->add_option("--format", ingest_format, "jsonl or text_dir");
    ingest->add_option("--source-tag", ingest_tag, "Provenance tag")->required();
    ingest->add_option("--out", ingest_out, "Output directory")->required();

    auto* expand = app.add_subcommand("expand", "Expand a docset with distractors");
    std::string expand_store, expand_base, expand_out;
    std::optional<std::string> expand_pool;
    int expand_multiplier = 4;
    expand->add_option("--docstore", expand_store, "Docstore file")->required();
    expand->add_option("--base", expand_base, "Base docset json")->required();
    expand->add_option("--pool", expand_pool, "Distractor pool docset (default: whole store)");
    expand->add_option("--multiplier", expand_multiplier, "Target size multiple")->required();
    expand->add_option("--out", expand_out, "Output directory")->required();

    auto* gen = app.add_subcommand("gen", "Generate synthetic records");
    std::string gen_store, gen_method, gen_out;
    std::optional<std::string> gen_docset;
    long long gen_budget = 0;
    int gen_passes_cap = 0;
    std::optional<long long> gen_fail_after;
    gen->add_option("--docstore", gen_store, "Docstore file")->required();
    gen->add_option("--docset", gen_docset, "Docset json restricting the run");
    gen->add_option("--method", gen_method,
                    "repeat | paraphrase | synth_qa | ar_task_agnostic | ar_task_specific")
        ->required();
    gen->add_option("--budget-words", gen_budget, "Stop once generated words reach this")
        ->required();
    gen->add_option("--passes-cap", gen_passes_cap, "Max rounds over the corpus (0 = uncapped)");
    gen->add_option("--mock-fail-after", gen_fail_after,
                    "Mock only: backend dies after N requests (testing aid, not persisted)");
    gen->add_option("--out", gen_out, "Output directory")->required();

    auto* mix = app.add_subcommand("mix", "Compute a mixture schedule and pack shards");
    std::vector<std::string> mix_sources;
    std::string mix_weights, mix_target, mix_lr, mix_out;
    long long mix_steps = 5000, mix_seq_len = 4096, mix_batch_tokens = 4194304, mix_batches = 1;
    mix->add_option("--source", mix_sources, "NAME=WEIGHT=DATASET_DIR (repeatable)");
    mix->add_option("--weights", mix_weights, "Schedule-only mode: comma list, target first");
    mix->add_option("--target", mix_target, "Target source name");
    mix->add_option("--steps-on-target", mix_steps, "Steps the target must receive");
    mix->add_option("--learning-rate", mix_lr, "Recorded in the schedule report");
    mix->add_option("--seq-len", mix_seq_len, "Tokens per packed sequence");
    mix->add_option("--batch-tokens", mix_batch_tokens, "Tokens per batch");
    mix->add_option("--batches", mix_batches, "Batches to emit");
    mix->add_option("--out", mix_out, "Output directory")->required();

    auto* subsample = app.add_subcommand("subsample", "Cut a dataset down to a word target");
    std::string sub_dataset, sub_out;
    long long sub_target = 0;
    subsample->add_option("--dataset", sub_dataset, "Dataset directory")->required();
    subsample->add_option("--target-words", sub_target, "Word target")->required();
    subsample->add_option("--out", sub_out, "Output directory")->required();

    auto* diversity = app.add_subcommand("diversity", "Self-BLEU diversity report");
    std::string div_dataset, div_out;
    std::optional<std::string> div_label;
    int div_cap = 100, div_max_n = 4;
    diversity->add_option("--dataset", div_dataset, "Dataset directory")->required();
    diversity->add_option("--label", div_label, "Report label (default: dataset method)");
    diversity->add_option("--sample-cap", div_cap, "Documents scored");
    diversity->add_option("--max-n", div_max_n, "Longest n-gram");
    diversity->add_option("--out", div_out, "Output directory")->required();

    auto* coverage = app.add_subcommand("coverage", "Question coverage curve");
    std::string cov_dataset, cov_questions, cov_judge = "substring", cov_out;
    long long cov_k_max = 10;
    coverage->add_option("--dataset", cov_dataset, "Dataset directory")->required();
    coverage->add_option("--questions", cov_questions, "Questions jsonl")->required();
    coverage->add_option("--k-max", cov_k_max, "Curve extent");
    coverage->add_option("--judge", cov_judge, "substring or model");
    coverage->add_option("--out", cov_out, "Output directory")->required();

    auto* eval = app.add_subcommand("eval", "Answer and grade a benchmark");
    std::string eval_benchmark, eval_store, eval_mode = "closed_book",
                eval_grader = "string_match", eval_out;
    eval->add_option("--benchmark", eval_benchmark, "Benchmark jsonl")->required();
    eval->add_option("--docstore", eval_store, "Docstore file")->required();
    eval->add_option("--mode", eval_mode, "closed_book or gold_context");
    eval->add_option("--grader", eval_grader, "string_match or model_grader");
    eval->add_option("--out", eval_out, "Output directory")->required();

    auto* report = app.add_subcommand("report", "Consolidate job outputs");
    std::vector<std::string> report_jobs;
    std::string report_out;
    report->add_option("--job", report_jobs, "Job directory (repeatable)");
    report->add_option("--out", report_out, "Output directory")->required();

    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.push_back("arpipe");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const auto& a : full) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (ingest->parsed()) {
            return cmd_ingest(resolve_config(common), ingest_input, ingest_format, ingest_tag,
                              ingest_out);
        }
        if (expand->parsed()) {
            return cmd_expand(resolve_config(common), expand_store, expand_base, expand_pool,
                              expand_multiplier, expand_out);
        }
        if (gen->parsed()) {
            return cmd_gen(resolve_config(common), gen_store, gen_docset, gen_method, gen_budget,
                           gen_passes_cap, gen_fail_after, gen_out);
        }
        if (mix->parsed()) {
            if (!mix_weights.empty()) {
                return cmd_mix_weights_only(resolve_config(common), mix_weights, mix_steps,
                                            mix_lr, mix_seq_len, mix_batch_tokens, mix_out);
            }
            if (mix_sources.empty()) {
                throw Error("mix needs --source entries or --weights");
            }
            if (mix_target.empty()) throw Error("mix --source mode needs --target");
            return cmd_mix(resolve_config(common), mix_sources, mix_target, mix_steps, mix_lr,
                           mix_seq_len, mix_batch_tokens, mix_batches, mix_out);
        }
        if (subsample->parsed()) {
            return cmd_subsample(resolve_config(common), sub_dataset, sub_target, sub_out);
        }
        if (diversity->parsed()) {
            return cmd_diversity(resolve_config(common), div_dataset, div_label, div_cap,
                                 div_max_n, div_out);
        }
        if (coverage->parsed()) {
            return cmd_coverage(resolve_config(common), cov_dataset, cov_questions, cov_k_max,
                                cov_judge, cov_out);
        }
        if (eval->parsed()) {
            return cmd_eval(resolve_config(common), eval_benchmark, eval_store, eval_mode,
                            eval_grader, eval_out);
        }
        if (report->parsed()) {
            return cmd_report(report_jobs, report_out);
        }
        std::cout << app.help();
        return 1;
    } catch (const synthgen::JobHalted& e) {
        std::cerr << "halted (resumable): " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace arpipe::cli
