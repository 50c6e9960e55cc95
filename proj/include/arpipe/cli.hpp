#pragma once

#include "arpipe/backend.hpp"
#include "arpipe/synthgen.hpp"
#include "arpipe/util/jsonio.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace arpipe::cli {

/// Resolved run configuration. Fields split into two tiers: semantic fields
/// shape outputs and are archived + hashed; operational fields (concurrency,
/// retry pacing, fault injection) only shape execution and never reach an
/// artifact, so reruns under different operational settings stay
/// byte-identical.
struct Config {
    std::string backend_kind = "mock"; // "mock" | "remote"
    std::uint64_t seed = 0;

    // operational
    int max_in_flight = 4;
    int max_attempts = 3;
    int requests_per_minute = 0;
    int timeout_seconds = 120;
    int backoff_base_ms = 250;

    // semantic
    backend::MockBehavior mock;   // latency/fail fields inside are operational
    std::string remote_url;
    std::string remote_model;
    std::string remote_api_key;   // credential: never archived or hashed
    std::string remote_schema = "chat";
    int max_output_words = 0;
    double temperature = 1.0;
    long long shard_cap_bytes = 512ll * 1024 * 1024;
};

/// Parses the config file (all keys optional) and applies environment
/// overrides ARPIPE_ENDPOINT / ARPIPE_API_KEY / ARPIPE_MODEL. `env` defaults
/// to the process environment; injectable for tests.
Config load_config(const std::optional<std::filesystem::path>& path,
                   const std::map<std::string, std::string>* env = nullptr);

/// The archived snapshot: every semantic field, no credentials, no
/// operational knobs.
ojson config_snapshot(const Config& config);

/// Hash of the snapshot; stamped into every job manifest so a report can
/// refuse to mix artifacts from different configurations.
std::string config_hash(const Config& config);

backend::BackendPolicy policy_from(const Config& config);

std::shared_ptr<backend::TextBackend> make_backend(const Config& config);

// ---------------------------------------------------------------------------
// Durable ledgers
// ---------------------------------------------------------------------------

/// Append-only unit ledger at `file` (one json object per line: key, status,
/// payload; later lines win). finalize() rewrites it sorted by key.
class FileUnitStore : public synthgen::UnitStore {
public:
    explicit FileUnitStore(std::filesystem::path file);

    std::optional<synthgen::UnitState> get(const std::string& key) override;
    void put(const std::string& key, const synthgen::UnitState& state) override;

    const std::map<std::string, synthgen::UnitState>& entries() const { return units_; }
    void finalize();

private:
    std::filesystem::path file_;
    std::map<std::string, synthgen::UnitState> units_;
};

/// Append-only backend call ledger. One line per finished request (ok or
/// final failure). finalize() canonicalizes: dedupe by (tag, prompt_hash)
/// preferring an ok record, sort, rewrite. Thread safe.
class CallLedger {
public:
    explicit CallLedger(std::filesystem::path file);

    void record(const backend::CallRecord& rec);
    backend::CallSink sink();

    void finalize();

    struct Totals {
        long long calls = 0;
        long long retries = 0; // attempts beyond the first, surviving records
        long long failed = 0;
        long long output_words = 0;
    };
    /// Over the canonical (deduped) view.
    Totals totals() const;

private:
    std::filesystem::path file_;
    std::mutex mu_;
    std::vector<backend::CallRecord> records_;

    std::vector<backend::CallRecord> canonical() const;
};

// ---------------------------------------------------------------------------
// Job manifest
// ---------------------------------------------------------------------------

/// job.json: identity (command, config hash, seed, params), status
/// ("complete" | "halted"), counters and headline results. Everything in it
/// is a pure function of inputs + config, so byte-comparing manifests is a
/// valid determinism check.
struct JobManifest {
    std::string command;
    std::string config_hash;
    std::uint64_t seed = 0;
    ojson params;
    std::string status = "complete";
    ojson counters;
    ojson results;
};

std::string job_id(const JobManifest& manifest);
ojson manifest_to_json(const JobManifest& manifest);
void write_job_manifest(const std::filesystem::path& out_dir, const JobManifest& manifest);

/// Entry point. `args` excludes the program name. Returns the process exit
/// code: 0 success, 1 usage/validation error, 2 halted-but-resumable job.
int run_cli(const std::vector<std::string>& args);

} // namespace arpipe::cli
