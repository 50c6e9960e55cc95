#include "arpipe/dataset.hpp"

#include "arpipe/util/digest.hpp"
#include "arpipe/util/text.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

namespace arpipe::dataset {

namespace fs = std::filesystem;

std::string_view to_string(Method m) {
    switch (m) {
    case Method::repeat: return "repeat";
    case Method::paraphrase: return "paraphrase";
    case Method::synth_qa: return "synth_qa";
    case Method::ar_task_agnostic: return "ar_task_agnostic";
    case Method::ar_task_specific: return "ar_task_specific";
    }
    return "unknown";
}

Method method_from_string(std::string_view s) {
    if (s == "repeat") return Method::repeat;
    if (s == "paraphrase") return Method::paraphrase;
    if (s == "synth_qa") return Method::synth_qa;
    if (s == "ar_task_agnostic") return Method::ar_task_agnostic;
    if (s == "ar_task_specific") return Method::ar_task_specific;
    throw Error("unknown method: " + std::string(s));
}

bool is_active_reading(Method m) {
    return m == Method::ar_task_agnostic || m == Method::ar_task_specific;
}

std::string make_record_id(Method method, const std::string& doc_id,
                           const std::optional<std::string>& strategy_id, std::uint64_t seed) {
    std::string key = "record";
    key += '\0';
    key += to_string(method);
    key += '\0';
    key += doc_id;
    key += '\0';
    key += strategy_id.value_or("");
    key += '\0';
    key += std::to_string(seed);
    return util::sha256_hex16(key);
}

std::string canonical_text(const SyntheticRecord& rec) {
    if (rec.method != Method::synth_qa) return rec.text;
    std::string out;
    if (!rec.qa_pairs) return out;
    for (const auto& [q, a] : *rec.qa_pairs) {
        if (!out.empty()) out += '\n';
        out += q;
        out += ' ';
        out += a;
    }
    return out;
}

ojson record_to_json(const SyntheticRecord& rec) {
    ojson j;
    j["record_id"] = rec.record_id;
    j["method"] = to_string(rec.method);
    j["doc_id"] = rec.doc_id;
    j["strategy_id"] = rec.strategy_id ? json(*rec.strategy_id) : json(nullptr);
    j["strategy_text"] = rec.strategy_text ? json(*rec.strategy_text) : json(nullptr);
    j["text"] = rec.text;
    if (rec.qa_pairs) {
        json pairs = json::array();
        for (const auto& [q, a] : *rec.qa_pairs) pairs.push_back(json::array({q, a}));
        j["qa_pairs"] = pairs;
    } else {
        j["qa_pairs"] = nullptr;
    }
    j["word_count"] = rec.word_count;
    j["prompt_hash"] = rec.prompt_hash;
    j["model_id"] = rec.model_id;
    j["seed"] = rec.seed;
    return j;
}

SyntheticRecord record_from_json(const json& j) {
    SyntheticRecord rec;
    rec.record_id = j.at("record_id").get<std::string>();
    rec.method = method_from_string(j.at("method").get<std::string>());
    rec.doc_id = j.at("doc_id").get<std::string>();
    if (j.contains("strategy_id") && !j["strategy_id"].is_null()) {
        rec.strategy_id = j["strategy_id"].get<std::string>();
    }
    if (j.contains("strategy_text") && !j["strategy_text"].is_null()) {
        rec.strategy_text = j["strategy_text"].get<std::string>();
    }
    rec.text = j.at("text").get<std::string>();
    if (j.contains("qa_pairs") && !j["qa_pairs"].is_null()) {
        std::vector<QaPair> pairs;
        for (const auto& p : j["qa_pairs"]) {
            if (!p.is_array() || p.size() != 2) throw Error("record: malformed qa pair");
            pairs.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
        }
        rec.qa_pairs = std::move(pairs);
    }
    rec.word_count = j.at("word_count").get<long long>();
    rec.prompt_hash = j.at("prompt_hash").get<std::string>();
    rec.model_id = j.at("model_id").get<std::string>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    const bool has_text = !rec.text.empty();
    const bool has_pairs = rec.qa_pairs && !rec.qa_pairs->empty();
    if (rec.method == Method::synth_qa) {
        if (has_text) throw Error("record " + rec.record_id + ": synth_qa carries text");
    } else if (has_pairs) {
        throw Error("record " + rec.record_id + ": qa_pairs on non-QA method");
    }
    return rec;
}

// ---------------------------------------------------------------------------
// DatasetWriter
// ---------------------------------------------------------------------------

namespace {

std::string shard_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "records-%05d.jsonl", index);
    return buf;
}

ojson manifest_row_to_json(const ManifestRow& row) {
    ojson j;
    j["record_id"] = row.record_id;
    j["method"] = to_string(row.method);
    j["doc_id"] = row.doc_id;
    j["strategy_id"] = row.strategy_id ? json(*row.strategy_id) : json(nullptr);
    j["word_count"] = row.word_count;
    j["shard"] = row.shard;
    j["offset"] = row.offset;
    return j;
}

ManifestRow manifest_row_from_json(const json& j) {
    ManifestRow row;
    row.record_id = j.at("record_id").get<std::string>();
    row.method = method_from_string(j.at("method").get<std::string>());
    row.doc_id = j.at("doc_id").get<std::string>();
    if (!j.at("strategy_id").is_null()) row.strategy_id = j["strategy_id"].get<std::string>();
    row.word_count = j.at("word_count").get<long long>();
    row.shard = j.at("shard").get<std::string>();
    row.offset = j.at("offset").get<long long>();
    return row;
}

} // namespace

DatasetWriter::DatasetWriter(fs::path dir, long long shard_cap_bytes)
    : dir_(std::move(dir)), shard_cap_bytes_(shard_cap_bytes) {
    if (shard_cap_bytes_ < 1) throw Error("dataset writer: shard cap must be >= 1 byte");
    util::ensure_dir(dir_);
}

void DatasetWriter::open_shard() {
    if (shard_index_ >= 0) {
        util::write_file_atomic(dir_ / shard_name_, shard_buf_);
    }
    ++shard_index_;
    shard_name_ = shard_file_name(shard_index_);
    shard_buf_.clear();
    shard_bytes_ = 0;
}

void DatasetWriter::add(const SyntheticRecord& rec) {
    if (finalized_) throw Error("dataset writer: add after finalize");
    if (!manifest_.empty() && !(manifest_.back().record_id < rec.record_id)) {
        throw Error("dataset writer: records must arrive sorted by record_id");
    }
    const std::string line = record_to_json(rec).dump();
    if (shard_index_ < 0 || (shard_bytes_ > 0 &&
                             shard_bytes_ + static_cast<long long>(line.size()) + 1 >
                                 shard_cap_bytes_)) {
        open_shard();
    }
    ManifestRow row;
    row.record_id = rec.record_id;
    row.method = rec.method;
    row.doc_id = rec.doc_id;
    row.strategy_id = rec.strategy_id;
    row.word_count = rec.word_count;
    row.shard = shard_name_;
    row.offset = shard_bytes_;
    manifest_.push_back(std::move(row));
    shard_buf_ += line;
    shard_buf_ += '\n';
    shard_bytes_ += static_cast<long long>(line.size()) + 1;
}

DatasetSummary DatasetWriter::finalize(const ojson& extra) {
    if (finalized_) throw Error("dataset writer: double finalize");
    finalized_ = true;
    if (shard_index_ < 0) open_shard(); // empty dataset still gets one shard
    util::write_file_atomic(dir_ / shard_name_, shard_buf_);

    std::string manifest_buf;
    for (const auto& row : manifest_) {
        manifest_buf += manifest_row_to_json(row).dump();
        manifest_buf += '\n';
    }
    util::write_file_atomic(dir_ / "manifest.jsonl", manifest_buf);

    DatasetSummary summary;
    std::map<std::string, std::pair<long long, long long>> per_method;
    for (const auto& row : manifest_) {
        ++summary.records;
        summary.words_total += row.word_count;
        auto& slot = per_method[std::string(to_string(row.method))];
        ++slot.first;
        slot.second += row.word_count;
    }
    for (const auto& [name, counts] : per_method) summary.per_method.emplace_back(name, counts);

    ojson j;
    j["records"] = summary.records;
    j["words_total"] = summary.words_total;
    ojson methods = ojson::object();
    for (const auto& [name, counts] : summary.per_method) {
        methods[name] = ojson{{"records", counts.first}, {"words", counts.second}};
    }
    j["methods"] = methods;
    for (const auto& [key, value] : extra.items()) j[key] = value;
    util::write_file_atomic(dir_ / "summary.json", j.dump(2) + "\n");
    return summary;
}

// ---------------------------------------------------------------------------
// Readers
// ---------------------------------------------------------------------------

std::vector<ManifestRow> read_manifest(const fs::path& dir) {
    std::vector<ManifestRow> rows;
    const fs::path path = dir / "manifest.jsonl";
    const bool found = util::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
        if (util::trim(line).empty()) return;
        try {
            rows.push_back(manifest_row_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw Error(path.string() + ":" + std::to_string(line_no) +
                        ": bad manifest line: " + e.what());
        }
    });
    if (!found) throw Error("dataset manifest not found: " + path.string());
    return rows;
}

std::vector<SyntheticRecord> load_records(const fs::path& dir) {
    std::vector<SyntheticRecord> records;
    for (const auto& row : read_manifest(dir)) {
        records.push_back(fetch_record(dir, row));
    }
    return records;
}

SyntheticRecord fetch_record(const fs::path& dir, const ManifestRow& row) {
    std::ifstream in(dir / row.shard, std::ios::binary);
    if (!in) throw Error("dataset shard not found: " + (dir / row.shard).string());
    in.seekg(row.offset);
    std::string line;
    if (!std::getline(in, line)) {
        throw Error("dataset shard " + row.shard + ": no record at offset " +
                    std::to_string(row.offset));
    }
    try {
        SyntheticRecord rec = record_from_json(json::parse(line));
        if (rec.record_id != row.record_id) {
            throw Error("dataset shard " + row.shard + ": record_id mismatch at offset " +
                        std::to_string(row.offset));
        }
        return rec;
    } catch (const json::exception& e) {
        throw Error("dataset shard " + row.shard + ": bad record at offset " +
                    std::to_string(row.offset) + ": " + e.what());
    }
}

json load_summary(const fs::path& dir) {
    return json::parse(util::read_file(dir / "summary.json"));
}

} // namespace arpipe::dataset
