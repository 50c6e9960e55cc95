#pragma once

#include "arpipe/util/jsonio.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace arpipe::corpus {

/// A source text unit. Immutable after construction; `doc_id` is a pure
/// function of (source_tag, body) so re-ingestion is idempotent.
struct Document {
    std::string doc_id;
    std::string title;
    std::string body;
    std::string source_tag;
};

std::string make_doc_id(std::string_view source_tag, std::string_view body);

Document make_document(std::string_view source_tag, std::string_view title, std::string_view body);

enum class SourceFormat { jsonl, text_dir };

SourceFormat source_format_from_string(std::string_view s);

struct SourceDescriptor {
    std::filesystem::path path;
    SourceFormat format = SourceFormat::jsonl;
    std::string source_tag;
};

struct IngestStats {
    long long documents = 0;
    long long skipped = 0;   // malformed or empty records
    long long duplicates = 0; // identical (source_tag, body) seen again
};

/// Streams every valid input record as a Document, in a deterministic order
/// (file order for jsonl, sorted paths for text_dir). Duplicate documents are
/// collapsed. Warnings for skipped records go to `warn` when provided.
IngestStats ingest(const SourceDescriptor& source,
                   const std::function<void(Document)>& sink,
                   const std::function<void(const std::string&)>& warn = {});

struct ChunkPolicy {
    enum class Mode { whole_document, split };
    Mode mode = Mode::whole_document;
    int max_words = 1000;
};

ChunkPolicy::Mode chunk_mode_from_string(std::string_view s);

/// chunk_id is "<doc_id>#<index>". Chunks tile the document body exactly:
/// concatenating chunk texts in index order reproduces the body byte for byte.
struct Chunk {
    std::string chunk_id;
    std::string text;
    long long word_count = 0;
};

std::vector<Chunk> chunk(const Document& doc, const ChunkPolicy& policy);

/// Ordered, duplicate-free list of doc ids plus the seed that built it.
struct DocSet {
    std::string name;
    std::vector<std::string> members;
    std::uint64_t seed = 0;
};

/// Grows `base` to multiplier*|base| members by sampling distractors from
/// `pool` (minus base members) without replacement. A single seeded
/// permutation of the pool is prefix-sampled, so expansion levels nest: the
/// 4x set is a subset of the 16x set built from the same seed and pool.
DocSet expand_with_distractors(const DocSet& base, const DocSet& pool, int multiplier,
                               std::uint64_t seed);

ojson docset_to_json(const DocSet& ds);
DocSet docset_from_json(const json& j);

/// Documents keyed by doc_id, loadable from / writable to a docstore file
/// (one record per line, same shape as a corpus file plus doc_id/source_tag).
class DocStore {
public:
    void add(Document doc);
    const Document* find(const std::string& doc_id) const;
    const Document& at(const std::string& doc_id) const;
    std::vector<std::string> ids_sorted() const;
    std::size_t size() const { return docs_.size(); }

    void save(const std::filesystem::path& path) const;
    static DocStore load(const std::filesystem::path& path);

private:
    std::map<std::string, Document> docs_;
};

/// Manifest line per document: doc_id, source_tag, word_count, origin path.
struct ManifestEntry {
    std::string doc_id;
    std::string source_tag;
    long long word_count = 0;
    std::string origin;
};

void write_manifest(const std::filesystem::path& path, std::vector<ManifestEntry> entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

} // namespace arpipe::corpus
