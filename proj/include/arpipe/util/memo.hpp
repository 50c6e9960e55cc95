#pragma once

#include "arpipe/util/jsonio.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace arpipe::util {

/// Append-only key/value cache backed by a jsonl file. Existing entries are
/// loaded at construction; put writes through immediately, so a crashed run
/// keeps everything it already computed.
class DiskMemo {
public:
    explicit DiskMemo(std::filesystem::path file);

    std::optional<json> get(const std::string& key) const;
    void put(const std::string& key, const json& value);
    std::size_t size() const { return map_.size(); }

private:
    std::filesystem::path file_;
    std::map<std::string, json> map_;
};

} // namespace arpipe::util
