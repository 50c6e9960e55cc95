#include "arpipe/corpus.hpp"

#include "arpipe/util/digest.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <algorithm>
#include <unordered_set>

namespace arpipe::corpus {

namespace fs = std::filesystem;

std::string make_doc_id(std::string_view source_tag, std::string_view body) {
    std::string buf;
    buf.reserve(source_tag.size() + 1 + body.size());
    buf.append(source_tag);
    buf.push_back('\0');
    buf.append(body);
    return util::sha256_hex16(buf);
}

Document make_document(std::string_view source_tag, std::string_view title, std::string_view body) {
    Document d;
    d.source_tag = std::string(source_tag);
    d.title = std::string(title);
    d.body = std::string(body);
    d.doc_id = make_doc_id(source_tag, body);
    return d;
}

SourceFormat source_format_from_string(std::string_view s) {
    if (s == "jsonl") return SourceFormat::jsonl;
    if (s == "textdir" || s == "text_dir") return SourceFormat::text_dir;
    throw Error("unknown source format: " + std::string(s));
}

namespace {

void emit(const Document& doc, const std::function<void(Document)>& sink,
          std::unordered_set<std::string>& seen, IngestStats& stats) {
    if (!seen.insert(doc.doc_id).second) {
        ++stats.duplicates;
        return;
    }
    ++stats.documents;
    sink(doc);
}

void ingest_jsonl(const SourceDescriptor& source, const std::function<void(Document)>& sink,
                  const std::function<void(const std::string&)>& warn, IngestStats& stats) {
    std::unordered_set<std::string> seen;
    const bool found = util::for_each_line(source.path, [&](std::size_t line_no, std::string_view line) {
        auto skip = [&](const std::string& why) {
            ++stats.skipped;
            if (warn) {
                warn(source.path.string() + ":" + std::to_string(line_no) + ": skipped: " + why);
            }
        };
        if (util::trim(line).empty()) {
            skip("blank line");
            return;
        }
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object()) {
            skip("not a JSON object");
            return;
        }
        if (!rec.contains("text") || !rec["text"].is_string()) {
            skip("missing required field: text");
            return;
        }
        const std::string text = rec["text"].get<std::string>();
        if (util::trim(text).empty()) {
            skip("empty text");
            return;
        }
        std::string title;
        if (rec.contains("title") && rec["title"].is_string()) title = rec["title"].get<std::string>();
        emit(make_document(source.source_tag, title, text), sink, seen, stats);
    });
    if (!found) throw Error("unreadable source: " + source.path.string());
}

void ingest_text_dir(const SourceDescriptor& source, const std::function<void(Document)>& sink,
                     const std::function<void(const std::string&)>& warn, IngestStats& stats) {
    if (!fs::is_directory(source.path)) {
        throw Error("unreadable source: not a directory: " + source.path.string());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(source.path)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::unordered_set<std::string> seen;
    for (const auto& file : files) {
        const std::string body = util::read_file(file);
        if (util::trim(body).empty()) {
            ++stats.skipped;
            if (warn) warn(file.string() + ": skipped: empty file");
            continue;
        }
        emit(make_document(source.source_tag, file.stem().string(), body), sink, seen, stats);
    }
}

} // namespace

IngestStats ingest(const SourceDescriptor& source, const std::function<void(Document)>& sink,
                   const std::function<void(const std::string&)>& warn) {
    IngestStats stats;
    switch (source.format) {
        case SourceFormat::jsonl:
            ingest_jsonl(source, sink, warn, stats);
            break;
        case SourceFormat::text_dir:
            ingest_text_dir(source, sink, warn, stats);
            break;
    }
    return stats;
}

ChunkPolicy::Mode chunk_mode_from_string(std::string_view s) {
    if (s == "whole_document" || s == "whole") return ChunkPolicy::Mode::whole_document;
    if (s == "split") return ChunkPolicy::Mode::split;
    throw Error("unknown chunk mode: " + std::string(s));
}

std::vector<Chunk> chunk(const Document& doc, const ChunkPolicy& policy) {
    if (policy.mode == ChunkPolicy::Mode::split && policy.max_words < 1) {
        throw Error("chunk policy: max_words must be >= 1");
    }
    std::vector<Chunk> chunks;
    auto push = [&](std::string_view text) {
        Chunk c;
        c.chunk_id = doc.doc_id + "#" + std::to_string(chunks.size());
        c.text = std::string(text);
        c.word_count = util::word_count(text);
        chunks.push_back(std::move(c));
    };

    if (policy.mode == ChunkPolicy::Mode::whole_document) {
        push(doc.body);
        return chunks;
    }

    const std::string_view body = doc.body;
    const auto words = util::split_words(body);
    if (words.size() <= static_cast<std::size_t>(policy.max_words)) {
        push(body);
        return chunks;
    }
    // Cut points sit where the first word past the limit begins, so each
    // chunk keeps its trailing whitespace and the pieces tile the body.
    std::size_t begin = 0;
    std::size_t word_idx = 0;
    while (word_idx < words.size()) {
        const std::size_t last = std::min(word_idx + static_cast<std::size_t>(policy.max_words),
                                          words.size());
        std::size_t end;
        if (last == words.size()) {
            end = body.size();
        } else {
            end = static_cast<std::size_t>(words[last].data() - body.data());
        }
        push(body.substr(begin, end - begin));
        begin = end;
        word_idx = last;
    }
    return chunks;
}

DocSet expand_with_distractors(const DocSet& base, const DocSet& pool, int multiplier,
                               std::uint64_t seed) {
    if (multiplier < 1) throw Error("expand: multiplier must be >= 1");
    DocSet out;
    out.name = base.name + "-x" + std::to_string(multiplier);
    out.seed = seed;
    out.members = base.members;
    if (multiplier == 1) return out;

    std::unordered_set<std::string> base_set(base.members.begin(), base.members.end());
    std::vector<std::string> candidates;
    candidates.reserve(pool.members.size());
    for (const auto& id : pool.members) {
        if (!base_set.contains(id)) candidates.push_back(id);
    }
    const std::size_t need = base.members.size() * static_cast<std::size_t>(multiplier - 1);
    if (candidates.size() < need) {
        throw Error("expand: pool too small: need " + std::to_string(need) +
                    " distractors, pool supplies " + std::to_string(candidates.size()));
    }
    // One permutation, prefix-selected: a 4x and a 16x expansion from the
    // same seed and pool nest.
    util::Rng rng(util::derive_seed(seed, {"expand", base.name}));
    rng.shuffle(candidates);
    out.members.insert(out.members.end(), candidates.begin(),
                       candidates.begin() + static_cast<std::ptrdiff_t>(need));
    return out;
}

ojson docset_to_json(const DocSet& ds) {
    ojson j;
    j["name"] = ds.name;
    j["seed"] = ds.seed;
    j["members"] = ds.members;
    return j;
}

DocSet docset_from_json(const json& j) {
    DocSet ds;
    ds.name = j.at("name").get<std::string>();
    ds.seed = j.at("seed").get<std::uint64_t>();
    ds.members = j.at("members").get<std::vector<std::string>>();
    std::unordered_set<std::string> seen;
    for (const auto& m : ds.members) {
        if (!seen.insert(m).second) throw Error("docset: duplicate member " + m);
    }
    return ds;
}

void DocStore::add(Document doc) {
    docs_[doc.doc_id] = std::move(doc);
}

const Document* DocStore::find(const std::string& doc_id) const {
    auto it = docs_.find(doc_id);
    return it == docs_.end() ? nullptr : &it->second;
}

const Document& DocStore::at(const std::string& doc_id) const {
    const Document* d = find(doc_id);
    if (!d) throw Error("docstore: unknown doc_id " + doc_id);
    return *d;
}

std::vector<std::string> DocStore::ids_sorted() const {
    std::vector<std::string> ids;
    ids.reserve(docs_.size());
    for (const auto& [id, _] : docs_) ids.push_back(id);
    return ids;
}

void DocStore::save(const fs::path& path) const {
    std::string out;
    for (const auto& [id, doc] : docs_) {
        ojson j;
        j["id"] = doc.doc_id;
        j["title"] = doc.title;
        j["text"] = doc.body;
        j["source_tag"] = doc.source_tag;
        out += j.dump();
        out += '\n';
    }
    util::write_file_atomic(path, out);
}

DocStore DocStore::load(const fs::path& path) {
    DocStore store;
    const bool found = util::for_each_line(path, [&](std::size_t line_no, std::string_view line) {
        if (util::trim(line).empty()) return;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw Error("docstore: bad line " + std::to_string(line_no) + " in " + path.string());
        }
        Document d;
        d.doc_id = j.at("id").get<std::string>();
        d.title = j.value("title", std::string{});
        d.body = j.at("text").get<std::string>();
        d.source_tag = j.value("source_tag", std::string{});
        store.add(std::move(d));
    });
    if (!found) throw Error("docstore: cannot read " + path.string());
    return store;
}

void write_manifest(const fs::path& path, std::vector<ManifestEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.doc_id < b.doc_id; });
    std::string out;
    for (const auto& e : entries) {
        ojson j;
        j["doc_id"] = e.doc_id;
        j["source_tag"] = e.source_tag;
        j["word_count"] = e.word_count;
        j["origin"] = e.origin;
        out += j.dump();
        out += '\n';
    }
    util::write_file_atomic(path, out);
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::vector<ManifestEntry> entries;
    const bool found = util::for_each_line(path, [&](std::size_t, std::string_view line) {
        if (util::trim(line).empty()) return;
        json j = json::parse(line);
        ManifestEntry e;
        e.doc_id = j.at("doc_id").get<std::string>();
        e.source_tag = j.value("source_tag", std::string{});
        e.word_count = j.value("word_count", 0LL);
        e.origin = j.value("origin", std::string{});
        entries.push_back(std::move(e));
    });
    if (!found) throw Error("manifest: cannot read " + path.string());
    return entries;
}

} // namespace arpipe::corpus
