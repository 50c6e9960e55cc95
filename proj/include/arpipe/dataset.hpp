#pragma once

#include "arpipe/util/jsonio.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace arpipe::dataset {

enum class Method {
    repeat,
    paraphrase,
    synth_qa,
    ar_task_agnostic,
    ar_task_specific,
};

std::string_view to_string(Method m);
Method method_from_string(std::string_view s);
bool is_active_reading(Method m);

using QaPair = std::pair<std::string, std::string>;

/// One generated training record. Serialized one per line; field set and
/// order are part of the on-disk contract. No timestamps: identical inputs
/// must produce identical bytes.
struct SyntheticRecord {
    std::string record_id;
    Method method = Method::repeat;
    std::string doc_id;
    std::optional<std::string> strategy_id;
    std::optional<std::string> strategy_text;
    std::string text; // empty iff method == synth_qa
    std::optional<std::vector<QaPair>> qa_pairs;
    long long word_count = 0;
    std::string prompt_hash;
    std::string model_id;
    std::uint64_t seed = 0;
};

/// Identity is (method, doc_id, strategy_id, seed); text is excluded so a
/// re-generated record lands on the same id.
std::string make_record_id(Method method, const std::string& doc_id,
                           const std::optional<std::string>& strategy_id, std::uint64_t seed);

/// Flat text used for packing and word accounting: the text itself, or for
/// QA records one "question answer" line per pair.
std::string canonical_text(const SyntheticRecord& rec);

ojson record_to_json(const SyntheticRecord& rec);
SyntheticRecord record_from_json(const json& j);

struct ManifestRow {
    std::string record_id;
    Method method = Method::repeat;
    std::string doc_id;
    std::optional<std::string> strategy_id;
    long long word_count = 0;
    std::string shard; // file name relative to the dataset dir
    long long offset = 0; // byte offset of the record line within the shard
};

struct DatasetSummary {
    long long records = 0;
    long long words_total = 0;
    // method name -> (records, words)
    std::vector<std::pair<std::string, std::pair<long long, long long>>> per_method;
};

/// Writes records-%05d.jsonl shards plus manifest.jsonl. Records must be
/// added in final (record_id-sorted) order; the writer only tracks offsets.
class DatasetWriter {
public:
    explicit DatasetWriter(std::filesystem::path dir,
                           long long shard_cap_bytes = 512ll * 1024 * 1024);
    void add(const SyntheticRecord& rec);
    /// Writes the manifest; `extra` is merged into summary.json.
    DatasetSummary finalize(const ojson& extra = ojson::object());

private:
    void open_shard();

    std::filesystem::path dir_;
    long long shard_cap_bytes_;
    int shard_index_ = -1;
    long long shard_bytes_ = 0;
    std::string shard_name_;
    std::string shard_buf_;
    std::vector<ManifestRow> manifest_;
    bool finalized_ = false;
};

std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir);

/// All records, in manifest (record_id) order.
std::vector<SyntheticRecord> load_records(const std::filesystem::path& dir);

/// Random access through a manifest row.
SyntheticRecord fetch_record(const std::filesystem::path& dir, const ManifestRow& row);

json load_summary(const std::filesystem::path& dir);

} // namespace arpipe::dataset
